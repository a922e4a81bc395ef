#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "kiss/config.hpp"
#include "kiss/model.hpp"
#include "kiss/training.hpp"

namespace kiss {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One fp32 tensor record.
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// File layout: magic "KISSCKPT", u32 version (1), u32 record count, records
/// (u16 name length, name, u8 dtype = 0, u8 rank, u64 dims, fp32 payload),
/// then a u32 CRC32 of all preceding bytes. Integers are little-endian.
struct Checkpoint {
  static constexpr char kMagic[9] = "KISSCKPT";
  static constexpr std::uint32_t kVersion = 1;

  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(std::string_view name) const;
  void add(std::string name, Shape shape, std::vector<float> values);
  void add_text(std::string name, std::string_view text);
  std::string text(std::string_view name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError naming the problem: magic, version, truncation, CRC.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters as `param.<name>`, optimizer moments as `optim.m.<name>` /
/// `optim.v.<name>` plus `optim.step` and `optim.lr`, the vocabulary as code
/// points (blank = 0) and every config key as `config.<key>` text.
template <typename T>
Checkpoint make_checkpoint(const KissModel<T>& model, const RAdam<T>* optimizer, const RunConfig& config);

/// Copies stored config values onto `base`; architecture keys always come from the checkpoint.
RunConfig config_from_checkpoint(const Checkpoint& ckpt, RunConfig base);

/// Throws ShapeError naming the tensor on a missing record or shape mismatch.
template <typename T>
void restore_parameters(ParameterStore<T>& params, const Checkpoint& ckpt);
template <typename T>
void restore_optimizer(RAdam<T>& optimizer, const ParameterStore<T>& params, const Checkpoint& ckpt);

}  // namespace kiss
