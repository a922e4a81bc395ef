#include "kiss/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace kiss {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    std::string(expected));
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto end = comma == std::string_view::npos ? v.size() : comma;
    out.push_back(parse_size(key, trim(v.substr(start, end - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string fmt(double d) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d, std::chars_format::general);
  return std::string(buf, p);
}

std::string fmt(bool b) { return b ? "true" : "false"; }

std::string fmt(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct KeyHandler {
  ConfigKeyInfo info;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define KISS_SIZE(NAME, FIELD, MODEL, HELP)                                                              \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = parse_size(NAME, v); },        \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                                       \
  }
#define KISS_U64(NAME, FIELD, MODEL, HELP)                                                               \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = parse_u64(NAME, v); },         \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                                       \
  }
#define KISS_DOUBLE(NAME, FIELD, MODEL, HELP)                                                            \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = parse_double(NAME, v); },      \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                                  \
  }
#define KISS_BOOL(NAME, FIELD, MODEL, HELP)                                                              \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = parse_bool(NAME, v); },        \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                                  \
  }
#define KISS_LIST(NAME, FIELD, MODEL, HELP)                                                              \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = parse_list(NAME, v); },        \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                                  \
  }
#define KISS_STRING(NAME, FIELD, MODEL, HELP)                                                            \
  KeyHandler {                                                                                           \
    {NAME, HELP, MODEL}, [](RunConfig& c, std::string_view v) { c.FIELD = std::string(v); },             \
        [](const RunConfig& c) { return c.FIELD; }                                                       \
  }

const std::vector<KeyHandler>& handlers() {
  static const std::vector<KeyHandler> table = {
      KISS_SIZE("image_width", model.loc_backbone.input_width, true, "model input width"),
      KISS_SIZE("image_height", model.loc_backbone.input_height, true, "model input height"),
      KISS_LIST("loc.channels", model.loc_backbone.stage_channels, true, "localizer backbone stage widths"),
      KISS_LIST("loc.blocks", model.loc_backbone.blocks_per_stage, true, "localizer residual blocks per stage"),
      KISS_SIZE("loc.stem_stride", model.loc_backbone.stem_stride, true, "localizer stem stride"),
      KISS_SIZE("loc.norm_groups", model.loc_backbone.norm_groups, true, "localizer group-norm groups"),
      KISS_BOOL("loc.zero_init_residual", model.loc_backbone.zero_init_residual, true,
                "zero the last norm scale of each localizer block"),
      KISS_LIST("rec.channels", model.rec_backbone.stage_channels, true, "recognizer backbone stage widths"),
      KISS_LIST("rec.blocks", model.rec_backbone.blocks_per_stage, true, "recognizer residual blocks per stage"),
      KISS_SIZE("rec.stem_stride", model.rec_backbone.stem_stride, true, "recognizer stem stride"),
      KISS_SIZE("rec.norm_groups", model.rec_backbone.norm_groups, true, "recognizer group-norm groups"),
      KISS_BOOL("rec.zero_init_residual", model.rec_backbone.zero_init_residual, true,
                "zero the last norm scale of each recognizer block"),
      KISS_SIZE("n_rois", model.localizer.n_rois, true, "regions of interest per image"),
      KISS_SIZE("roi_width", model.localizer.roi_width, true, "crop width"),
      KISS_SIZE("roi_height", model.localizer.roi_height, true, "crop height"),
      KISS_SIZE("lstm_hidden", model.localizer.lstm_hidden, true, "LSTM hidden size"),
      KISS_DOUBLE("rotation_dropout", model.localizer.rotation_dropout, true, "rotation dropout probability"),
      KISS_STRING("loc.predictor", model.localizer.predictor, true, "affine predictor (lstm)"),
      KISS_DOUBLE("head_init_scale", model.localizer.head_init_scale, true, "affine head init bound"),
      KISS_SIZE("d_model", model.transformer.d_model, true, "transformer width"),
      KISS_SIZE("n_heads", model.transformer.n_heads, true, "attention heads"),
      KISS_SIZE("d_ff", model.transformer.d_ff, true, "feed-forward width"),
      KISS_SIZE("n_layers", model.transformer.n_layers, true, "encoder and decoder layers"),
      KISS_DOUBLE("dropout", model.transformer.dropout, true, "transformer dropout"),
      KISS_BOOL("recognition_only", model.recognition_only, true, "uniform slices instead of the localizer"),
      KISS_BOOL("softmax_recognizer", model.softmax_recognizer, true, "per-position softmax heads"),
      KISS_SIZE("batch_size", train.batch_size, false, "training batch size"),
      KISS_SIZE("epochs", train.epochs, false, "training epochs"),
      KISS_DOUBLE("lr", train.lr, false, "initial learning rate"),
      KISS_DOUBLE("lr_decay", train.lr_decay_per_epoch, false, "learning-rate factor per epoch"),
      KISS_DOUBLE("clip_norm", train.localizer_clip_norm, false, "localizer gradient norm bound"),
      KISS_U64("seed", train.seed, false, "training seed"),
      KISS_BOOL("augment", train.augment, false, "train-time augmentation"),
      KISS_DOUBLE("augment.fraction", augment.train_fraction, false, "fraction of augmented samples"),
      KISS_DOUBLE("augment.resize_min", augment.resize_min, false, "smallest downscale factor"),
      KISS_DOUBLE("augment.resize_max", augment.resize_max, false, "largest downscale factor"),
      KISS_DOUBLE("augment.blur_sigma_max", augment.blur_sigma_max, false, "largest blur sigma"),
      KISS_DOUBLE("augment.distortion", augment.distortion, false, "corner jitter fraction"),
      KISS_SIZE("gen.count", generator.count, false, "generated samples"),
      KISS_U64("gen.seed", generator.seed, false, "generator seed"),
      KISS_SIZE("gen.min_len", generator.min_len, false, "shortest label"),
      KISS_SIZE("gen.max_len", generator.max_len, false, "longest label"),
      KISS_STRING("gen.charset", generator.charset, false, "label alphabet"),
      KISS_SIZE("gen.width", generator.width, false, "rendered image width"),
      KISS_SIZE("gen.height", generator.height, false, "rendered image height"),
      KISS_STRING("train_dir", train_dir, false, "training dataset directory"),
      KISS_STRING("val_dir", val_dir, false, "validation dataset directory"),
      KISS_STRING("checkpoint", checkpoint, false, "checkpoint path"),
      KISS_BOOL("tta", tta, false, "test-time rotation augmentation"),
      KISS_BOOL("case_insensitive", case_insensitive, false, "case-insensitive accuracy"),
  };
  return table;
}

const KeyHandler& find(std::string_view key) {
  for (const auto& h : handlers()) {
    if (h.info.name == key) return h;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  augment.validate();
  generator.validate();
}

RunConfig default_run_config() { return RunConfig{}; }

const std::vector<ConfigKeyInfo>& config_keys() {
  static const std::vector<ConfigKeyInfo> keys = [] {
    std::vector<ConfigKeyInfo> out;
    for (const auto& h : handlers()) out.push_back(h.info);
    return out;
  }();
  return keys;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  find(key).set(config, trim(value));
}

std::string get_config_value(const RunConfig& config, std::string_view key) { return find(key).get(config); }

void apply_config_text(RunConfig& config, std::string_view text, std::string_view source) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_config_value(config, trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str(), path.string());
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& h : handlers()) out += h.info.name + " = " + h.get(config) + "\n";
  return out;
}

}  // namespace kiss
