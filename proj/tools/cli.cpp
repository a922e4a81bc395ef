#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <ostream>

#include "kiss/checkpoint.hpp"
#include "kiss/config.hpp"
#include "kiss/data.hpp"
#include "kiss/gradcheck.hpp"
#include "kiss/model.hpp"
#include "kiss/training.hpp"

namespace kiss::cli {

namespace {

namespace fs = std::filesystem;

// A command-line option that overrides one config key when given.
struct Override {
  CLI::Option* option;
  std::string key;
  std::string* value;
  bool is_flag;
};

class Overrides {
 public:
  void value(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    storage_.emplace_back();
    auto* opt = app->add_option(flag, storage_.back(), help + " [" + key + "]");
    items_.push_back(Override{opt, key, &storage_.back(), false});
  }
  void flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    storage_.emplace_back("true");
    auto* opt = app->add_flag(flag)->description(help + " [" + key + " = true]");
    items_.push_back(Override{opt, key, &storage_.back(), true});
  }
  void apply(RunConfig& config) const {
    for (const auto& o : items_) {
      if (o.option->count() > 0) set_config_value(config, o.key, *o.value);
    }
  }

 private:
  std::deque<std::string> storage_;
  std::vector<Override> items_;
};

std::string key_reference() {
  const auto defaults = default_run_config();
  std::string s = "Config keys (file `key = value`, or --set key=value; flag > file > default):\n";
  for (const auto& k : config_keys()) {
    s += "  " + k.name + " = " + get_config_value(defaults, k.name) + "    " + k.help + "\n";
  }
  return s;
}

Image roi_image(const Tensor<float>& crops, std::size_t index) {
  const std::size_t h = crops.dim(2), w = crops.dim(3);
  Image img(w, h);
  const float* src = crops.data().data() + index * crops.dim(1) * h * w;
  for (std::size_t i = 0; i < w * h; ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(src[i] * 255.0f), 0L, 255L));
  }
  return img;
}

std::string format_eval(const EvalReport& r) {
  char line[256];
  std::snprintf(line, sizeof line, "count\tsequence_accuracy\tchar_accuracy\tce\tpenalty\n%zu\t%.6f\t%.6f\t%.6f\t%.6f\n",
                r.count, r.sequence_accuracy, r.char_accuracy, r.ce, r.penalty);
  return line;
}

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<KissModel<float>> model;
};

LoadedModel load_model(const std::string& path, RunConfig base) {
  if (path.empty()) throw ConfigError("a checkpoint is required (--checkpoint)");
  const auto ckpt = read_checkpoint(path);
  LoadedModel lm;
  lm.config = config_from_checkpoint(ckpt, std::move(base));
  lm.model = std::make_unique<KissModel<float>>(lm.config.model, lm.config.train.seed);
  restore_parameters(lm.model->params(), ckpt);
  return lm;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  if (out_dir.empty()) throw ConfigError("gen-data needs an output directory (--out)");
  const auto samples = generate_samples(cfg.generator);
  DatasetMeta meta;
  meta.count = samples.size();
  meta.vocab_hash = Vocabulary::standard().hash();
  meta.seed = cfg.generator.seed;
  meta.max_len = cfg.generator.max_len;
  meta.charset = cfg.generator.charset;
  save_dataset(out_dir, samples, meta);
  out << "wrote " << samples.size() << " samples to " << out_dir << '\n';
  return kSuccess;
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir, std::size_t max_steps, std::ostream& out,
              std::ostream& err) {
  if (cfg.train_dir.empty()) throw ConfigError("train needs a dataset (--train-dir)");
  if (out_dir.empty()) throw ConfigError("train needs an output directory (--out)");
  const auto train_set = load_dataset(cfg.train_dir);
  Dataset val_set;
  if (!cfg.val_dir.empty()) val_set = load_dataset(cfg.val_dir);
  fs::create_directories(out_dir);
  {
    std::ofstream used(fs::path(out_dir) / "config.txt");
    used << format_config(cfg);
  }

  KissModel<float> model(cfg.model, cfg.train.seed);
  RAdam<float> optimizer(model.params(), cfg.train.lr);
  std::ofstream log_file(fs::path(out_dir) / "train.log");
  if (!log_file) throw std::runtime_error("cannot write training log in '" + out_dir + "'");

  // Tee the per-step log to the file and stdout.
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    Tee(std::streambuf* x, std::streambuf* y) : a(x), b(y) {}
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      return (a->sputc(static_cast<char>(c)) == EOF || b->sputc(static_cast<char>(c)) == EOF) ? EOF : c;
    }
    int sync() override { return (a->pubsync() | b->pubsync()) == 0 ? 0 : -1; }
  } tee(log_file.rdbuf(), out.rdbuf());
  std::ostream log(&tee);

  double best = -1.0;
  TrainHooks hooks;
  hooks.log = &log;
  hooks.max_steps = max_steps;
  hooks.on_epoch = [&](const EpochSummary& s) {
    const auto ckpt = make_checkpoint(model, &optimizer, cfg);
    write_checkpoint(fs::path(out_dir) / ("epoch_" + std::to_string(s.epoch + 1) + ".ckpt"), ckpt);
    write_checkpoint(fs::path(out_dir) / "last.ckpt", ckpt);
    double score = s.has_eval ? s.eval.sequence_accuracy : 0.0;
    err << "epoch " << s.epoch + 1 << " lr " << s.lr << " mean_loss " << s.mean_loss;
    if (s.has_eval) {
      err << " val_seq_acc " << s.eval.sequence_accuracy << " val_char_acc " << s.eval.char_accuracy
          << " val_penalty " << s.eval.penalty;
    }
    err << '\n';
    if (score > best) {
      best = score;
      write_checkpoint(fs::path(out_dir) / "best.ckpt", ckpt);
    }
  };
  train(model, optimizer, train_set.samples, val_set.samples.empty() ? nullptr : &val_set.samples, cfg.train,
        cfg.augment, hooks);
  return kSuccess;
}

int cmd_eval(const RunConfig& base, const std::string& data_dir, std::ostream& out) {
  if (data_dir.empty()) throw ConfigError("eval needs a dataset (--data)");
  auto lm = load_model(base.checkpoint, base);
  const auto ds = load_dataset(data_dir);
  EvalOptions opts;
  opts.use_tta = base.tta;
  opts.case_insensitive = base.case_insensitive;
  opts.batch_size = base.train.batch_size;
  out << format_eval(evaluate(*lm.model, ds.samples, opts));
  return kSuccess;
}

int cmd_infer(const RunConfig& base, const std::string& image_path, const std::string& dump_dir, std::ostream& out) {
  auto lm = load_model(base.checkpoint, base);
  const Image img = read_pgm(image_path);
  const auto decoded = recognize(*lm.model, {img}, base.tta);
  out << decoded[0].text << '\n';
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    const auto& mc = lm.model->config();
    const Image sized = resize_keep_aspect(img, mc.image_width(), mc.image_height());
    NoGrad<float> no_grad;
    std::mt19937_64 unused(0);
    const auto rois = lm.model->regions(images_to_tensor<float>({&sized}), false, unused);
    // rois.txt: index, theta1..theta6, then (u, v) of the top-left, top-right,
    // bottom-left and bottom-right grid corners.
    std::ofstream side(fs::path(dump_dir) / "rois.txt");
    const auto& g = rois.grid.coords;
    const std::size_t ho = g.dim(2), wo = g.dim(3);
    for (std::size_t n = 0; n < rois.crops.dim(0); ++n) {
      char name[32];
      std::snprintf(name, sizeof name, "roi_%02zu.pgm", n);
      write_pgm(fs::path(dump_dir) / name, roi_image(rois.crops, n));
      side << n;
      for (std::size_t k = 0; k < 6; ++k) side << '\t' << rois.affine.theta.data()[n * 6 + k];
      for (const auto& [j, i] : {std::pair{std::size_t{0}, std::size_t{0}}, {0, wo - 1}, {ho - 1, 0}, {ho - 1, wo - 1}})
        side << '\t' << g.at({0, n, j, i, 0}) << '\t' << g.at({0, n, j, i, 1});
      side << '\n';
    }
  }
  return kSuccess;
}

int cmd_grad_check(std::uint64_t seed, std::ostream& out) {
  GradCheckOptions opts;
  opts.seed = seed;
  const auto cases = gradcheck_registry();
  const auto reports = run_gradcheck(cases, opts, &out);
  const auto failed = std::count_if(reports.begin(), reports.end(), [](const auto& r) { return !r.passed; });
  out << reports.size() << " cases, " << failed << " failed\n";
  return failed == 0 ? kSuccess : kVerificationFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"KISS scene-text recognizer: data generation, training, evaluation and verification", "kiss"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(key_reference());

  std::string config_path, out_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "random seed for the selected command");
  app.add_option("--config", config_path, "config file of `key = value` lines");
  app.add_option("--out", out_path, "output directory");
  app.add_option("--set", sets, "override any config key: key=value");

  Overrides overrides;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic word dataset");
  overrides.value(gen, "--count", "gen.count", "number of samples");
  overrides.value(gen, "--min-len", "gen.min_len", "shortest label");
  overrides.value(gen, "--max-len", "gen.max_len", "longest label");
  overrides.value(gen, "--charset", "gen.charset", "label alphabet");
  bool full_charset = false;
  gen->add_flag("--full-charset", full_charset, "draw labels from all 94 symbols");

  auto* tr = app.add_subcommand("train", "train a model");
  overrides.value(tr, "--train-dir", "train_dir", "training dataset");
  overrides.value(tr, "--val-dir", "val_dir", "validation dataset");
  overrides.value(tr, "--epochs", "epochs", "epochs");
  overrides.value(tr, "--batch-size", "batch_size", "batch size");
  overrides.value(tr, "--lr", "lr", "initial learning rate");
  overrides.value(tr, "--lr-decay", "lr_decay", "learning-rate factor per epoch");
  overrides.flag(tr, "--recognition-only", "recognition_only", "uniform slices instead of the localizer");
  overrides.flag(tr, "--softmax-recognizer", "softmax_recognizer", "per-position softmax heads");
  std::size_t max_steps = 0;
  tr->add_option("--max-steps", max_steps, "stop after this many steps (0 = no limit)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string data_dir;
  overrides.value(ev, "--checkpoint", "checkpoint", "checkpoint file");
  ev->add_option("--data", data_dir, "dataset directory");
  overrides.flag(ev, "--tta", "tta", "test-time rotation augmentation");
  overrides.flag(ev, "--case-insensitive", "case_insensitive", "ignore case when scoring");

  auto* inf = app.add_subcommand("infer", "recognize the text in one PGM image");
  std::string image_path, dump_dir;
  overrides.value(inf, "--checkpoint", "checkpoint", "checkpoint file");
  inf->add_option("image", image_path, "input image (PGM)")->required();
  overrides.flag(inf, "--tta", "tta", "test-time rotation augmentation");
  inf->add_option("--dump-rois", dump_dir, "write the ROI crops as PGM files into this directory");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification of every op");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    RunConfig cfg = default_run_config();
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    overrides.apply(cfg);
    if (full_charset) cfg.generator.charset = std::string(Vocabulary::standard().printable());
    const bool seeded = seed_opt->count() > 0;

    if (gen->parsed()) {
      if (seeded) cfg.generator.seed = seed;
      cfg.generator.validate();
      return cmd_gen_data(cfg, out_path, out);
    }
    if (seeded) cfg.train.seed = seed;
    if (tr->parsed()) {
      cfg.validate();
      return cmd_train(cfg, out_path, max_steps, out, err);
    }
    if (ev->parsed()) return cmd_eval(cfg, data_dir, out);
    if (inf->parsed()) return cmd_infer(cfg, image_path, dump_dir, out);
    if (gc->parsed()) return cmd_grad_check(seeded ? seed : 1, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace kiss::cli
