#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kiss/data.hpp"
#include "kiss/model.hpp"
#include "kiss/training.hpp"

namespace kiss {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentPolicy augment;
  GeneratorConfig generator;
  std::string train_dir;
  std::string val_dir;
  std::string checkpoint;
  bool tta = false;
  bool case_insensitive = false;

  void validate() const;
};

/// Defaults used when no config file or flag overrides a key.
RunConfig default_run_config();

struct ConfigKeyInfo {
  std::string name;
  std::string help;
  bool model;  // part of the model architecture, stored in checkpoints
};

const std::vector<ConfigKeyInfo>& config_keys();

/// Throws ConfigError for unknown keys or unparsable values.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& config, std::string_view key);

/// `key = value` lines; `#` starts a comment. Applied on top of `config`.
void apply_config_text(RunConfig& config, std::string_view text, std::string_view source = "<text>");
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// `key = value` dump of every key, in table order.
std::string format_config(const RunConfig& config);

}  // namespace kiss
