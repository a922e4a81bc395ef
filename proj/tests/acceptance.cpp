// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is the number of failed criteria (capped at 125).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "kiss/checkpoint.hpp"
#include "kiss/config.hpp"
#include "kiss/data.hpp"
#include "kiss/gradcheck.hpp"
#include "kiss/localizer.hpp"
#include "kiss/model.hpp"
#include "kiss/ops.hpp"
#include "kiss/recognizer.hpp"
#include "kiss/training.hpp"

using namespace kiss;
namespace fs = std::filesystem;
using TD = Tensor<double>;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

TD uniform(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return TD(std::move(shape), std::move(v));
}

// Model used for every training criterion. Narrower than the defaults so a
// run fits the time budget on a single core.
RunConfig desk_config() {
  RunConfig r = default_run_config();
  apply_config_text(r, R"(
loc.channels = 8, 16, 32
loc.blocks = 1, 1, 1
rec.channels = 8, 16, 32
rec.blocks = 1, 1, 1
lstm_hidden = 64
d_model = 64
d_ff = 128
)");
  return r;
}

// Learning rate for the desk-scale runs (criteria 7, 8).
constexpr double kDeskLr = 1e-3;

std::vector<const Image*> image_ptrs(const std::vector<Sample>& s) {
  std::vector<const Image*> out;
  for (const auto& x : s) out.push_back(&x.image);
  return out;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opts;
  const auto reports = run_gradcheck(gradcheck_registry(), opts, nullptr);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  double worst_op = 0;
  std::string names;
  for (const auto& r : reports) {
    if (!r.passed) {
      ++failed;
      names += " " + r.name;
    }
    if (r.tolerance <= 1e-4) worst_op = std::max(worst_op, r.max_rel_error);
  }
  Outcome o;
  o.passed = failed == 0 && secs < 300;
  o.detail = std::to_string(reports.size()) + " cases, " + std::to_string(failed) + " failed" + names +
             ", worst per-op " + fmt("%.2e", worst_op) + ", " + fmt("%.1f", secs) + " s";
  return o;
}

Outcome stn_identity() {
  const auto s = render_word("KISS42", 200, 64, 3);
  const auto img = images_to_tensor<double>({&s.image});
  AffineParams<double> id{TD({1, 1, 2, 3}, {1, 0, 0, 0, 1, 0}), 1};
  const auto out = bilinear_sample(img, generate_grid(id, 200, 64));
  double err = 0;
  for (std::size_t i = 0; i < img.numel(); ++i) err = std::max(err, std::abs(out.data()[i] - img.data()[i]));
  return {out.shape() == img.shape() && err <= 1e-6, "max abs error " + fmt("%.2e", err)};
}

Outcome regularizer() {
  auto penalty_of = [](std::vector<double> coords) {
    const std::size_t n = coords.size() / 2;
    return out_of_image_penalty(SamplingGrid<double>{TD({1, 1, 1, n, 2}, std::move(coords)), n, 1}).item();
  };
  bool ok = penalty_of({1.5, 0.0}) == 0.5 && penalty_of({0.0, -1.25}) == 0.25;
  ok &= penalty_of({-1, 1, 1, -1, 0, 0.5}) == 0.0;
  std::mt19937_64 rng(1);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto c = uniform({10}, rng, -1.15, 1.15);
    bool inside = true;
    for (double v : c.data()) inside &= v >= -1 && v <= 1;
    if ((penalty_of(std::vector<double>(c.data().begin(), c.data().end())) == 0.0) != inside) ++mismatches;
  }
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  SamplingGrid<double> g{TD({1, 1, 1, 3, 2}, {1.5, -1.25, 0.3, -0.7, 2.0, -3.0}, true), 3, 1};
  tape.backward(out_of_image_penalty(g));
  const std::vector<double> expect{1, -1, 0, 0, 1, -1};
  bool grad_ok = true;
  for (std::size_t i = 0; i < 6; ++i) grad_ok &= g.coords.grad()[i] == expect[i];
  return {ok && mismatches == 0 && grad_ok,
          "reg(1.5) " + fmt("%g", penalty_of({1.5, 0.0})) + ", reg(-1.25) " + fmt("%g", penalty_of({0.0, -1.25})) +
              ", iff mismatches " + std::to_string(mismatches) + ", subgradient " + (grad_ok ? "ok" : "wrong")};
}

Outcome causality() {
  std::mt19937_64 init(2), rng(3);
  TransformerConfig tc;
  tc.d_model = 16;
  tc.n_heads = 2;
  tc.d_ff = 32;
  BackboneConfig bb;
  bb.input_width = 8;
  bb.input_height = 8;
  bb.stage_channels = {4};
  bb.blocks_per_stage = {1};
  bb.norm_groups = 2;
  ParameterStore<double> store;
  const std::size_t n = 7;
  Recognizer<double> rec(tc, bb, n, false, store, init);
  const auto memory = uniform({1, n, 16}, rng);
  std::uniform_int_distribution<int> tok(0, int(Vocabulary::kClasses) - 1);
  std::vector<int> tokens(n);
  tokens[0] = Vocabulary::kBos;
  for (std::size_t i = 1; i < n; ++i) tokens[i] = tok(rng);
  const auto base = rec.decode_step(tokens, n, memory, false, rng);
  const std::size_t C = Vocabulary::kClasses;
  std::size_t changed = 0;
  for (std::size_t edit = 1; edit < n; ++edit) {
    auto t2 = tokens;
    for (std::size_t j = edit; j < n; ++j) t2[j] = (t2[j] + 1 + int(j)) % int(C);
    const auto out = rec.decode_step(t2, n, memory, false, rng);
    for (std::size_t i = 0; i < edit * C; ++i) changed += out.data()[i] != base.data()[i];
  }

  // Attention rows, masked and unmasked.
  double row_err = 0;
  const auto x = uniform({2, n, 16}, rng, -3, 3);
  const auto& att = rec.decoder_layers()[0].self_attn;
  for (const bool masked : {false, true}) {
    const auto w = multi_head_attention(x, x, 2, att, masked ? causal_mask<double>(n) : TD()).weights;
    const std::size_t rows = w.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += w.data()[r * n + j];
      row_err = std::max(row_err, std::abs(s - 1));
    }
  }

  const auto pe = positional_encoding<double>(50, 64);
  bool pe0 = true;
  for (std::size_t i = 0; i < 64; ++i) pe0 &= pe.at({0, i}) == (i % 2 == 0 ? 0.0 : 1.0);
  double pyth = 0;
  for (std::size_t p = 0; p < 50; ++p)
    for (std::size_t i = 0; i < 64; i += 2) {
      const double a = pe.at({p, i}), b = pe.at({p, i + 1});
      pyth = std::max(pyth, std::abs(a * a + b * b - 1));
    }
  return {changed == 0 && row_err <= 1e-6 && pe0 && pyth <= 1e-6,
          "prefix logits changed " + std::to_string(changed) + ", row sum error " + fmt("%.1e", row_err) +
              ", PE(0) " + (pe0 ? "ok" : "wrong") + ", sin^2+cos^2 error " + fmt("%.1e", pyth)};
}

Outcome loss_sanity() {
  const std::size_t B = 4, N = Vocabulary::kMaxLength, C = Vocabulary::kClasses;
  std::vector<TokenSequence> targets;
  for (const char* s : {"KISS", "a", "Hello!", "0123456789"}) targets.push_back(Vocabulary::standard().encode(s, N));
  const auto logits = Tensor<double>::zeros({B, N, C});
  const double ce = recognition_loss(logits, targets).item();
  return {std::abs(ce - std::log(95.0)) <= 1e-4, "CE " + fmt("%.6f", ce) + " vs ln 95 " + fmt("%.6f", std::log(95.0))};
}

Outcome overfit() {
  auto cfg = desk_config();
  GeneratorConfig g;
  g.count = 8;
  g.seed = 11;
  const auto samples = generate_samples(g);
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const auto images = images_to_tensor<float>(image_ptrs(samples));
  const auto targets = encode_labels(ptrs, Vocabulary::kMaxLength);
  KissModel<float> model(cfg.model, 1);
  TrainConfig tc = cfg.train;
  tc.lr = 1e-3;
  RAdam<float> opt(model.params(), tc.lr);
  std::mt19937_64 rng(5);
  std::size_t step = 0;
  double ce = 0;
  for (step = 1; step <= 300; ++step) {
    ce = train_step(model, opt, images, targets, tc, rng).ce;
    if (ce < 0.01) break;
  }
  const auto decoded = model.predict(images);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) exact += decoded[i].text == samples[i].label;
  const bool reached = ce < 0.01;
  return {reached && exact == samples.size(),
          "CE " + fmt("%.4f", ce) + " after " + std::to_string(std::min<std::size_t>(step, 300)) + " steps, " +
              std::to_string(exact) + "/8 labels decoded exactly"};
}

struct DeskRun {
  EvalReport eval;
  double minutes = 0;
};

DeskRun desk_training(bool softmax) {
  auto cfg = desk_config();
  cfg.model.softmax_recognizer = softmax;
  cfg.train.lr = kDeskLr;
  GeneratorConfig train_gen;  // 2000 words, length <= 5, hex alphabet
  GeneratorConfig held_gen = train_gen;
  held_gen.count = 200;
  held_gen.seed = train_gen.seed + 1000;
  const auto training = generate_samples(train_gen);
  const auto held_out = generate_samples(held_gen);
  const auto t0 = std::chrono::steady_clock::now();
  KissModel<float> model(cfg.model, cfg.train.seed);
  RAdam<float> opt(model.params(), cfg.train.lr);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochSummary& s) {
    std::cerr << (softmax ? "  softmax" : "  full") << " epoch " << s.epoch + 1 << " mean loss " << s.mean_loss
              << "\n";
  };
  train(model, opt, training, nullptr, cfg.train, cfg.augment, hooks);
  DeskRun r;
  r.eval = evaluate(model, held_out, EvalOptions{});
  r.minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  return r;
}

Outcome checkpoint_roundtrip(const fs::path& dir) {
  auto cfg = desk_config();
  KissModel<float> model(cfg.model, 9);
  RAdam<float> opt(model.params(), 1e-3);
  GeneratorConfig g;
  g.count = 2;
  const auto samples = generate_samples(g);
  std::vector<const Sample*> ptrs{&samples[0], &samples[1]};
  const auto images = images_to_tensor<float>(image_ptrs(samples));
  const auto targets = encode_labels(ptrs, Vocabulary::kMaxLength);
  std::mt19937_64 rng(1);
  train_step(model, opt, images, targets, cfg.train, rng);

  const auto path = dir / "roundtrip.ckpt";
  write_checkpoint(path, make_checkpoint(model, &opt, cfg));
  const auto ckpt = read_checkpoint(path);
  const auto cfg2 = config_from_checkpoint(ckpt, default_run_config());
  KissModel<float> restored(cfg2.model, 1234);
  restore_parameters(restored.params(), ckpt);
  std::mt19937_64 r1(2), r2(2);
  const auto a = model.forward(images, targets, false, r1);
  const auto b = restored.forward(images, targets, false, r2);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < a.logits.numel(); ++i) differing += a.logits.data()[i] != b.logits.data()[i];
  const bool same_text = model.predict(images)[0].text == restored.predict(images)[0].text;

  auto bytes = serialize_checkpoint(ckpt);
  std::size_t rejected = 0;
  auto rejects = [&](std::vector<std::uint8_t> bad, const std::string& needle) {
    try {
      parse_checkpoint(bad);
    } catch (const CheckpointError& e) {
      if (std::string(e.what()).find(needle) != std::string::npos) ++rejected;
    }
  };
  auto magic = bytes;
  magic[1] ^= 0xff;
  rejects(magic, "KISSCKPT");
  rejects(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + std::ptrdiff_t(bytes.size() / 2)), "truncated");
  auto flipped = bytes;
  flipped[bytes.size() - 5] ^= 0x01;
  rejects(flipped, "CRC32");
  return {differing == 0 && same_text && rejected == 3,
          std::to_string(differing) + " differing logits, " + std::to_string(rejected) + "/3 corruptions rejected"};
}

Outcome determinism(const fs::path& dir) {
  const auto data = dir / "det_data", cfg_path = dir / "det.cfg";
  std::ofstream(cfg_path) << format_config(desk_config());
  std::ostringstream sink;
  if (cli::run({"--config", cfg_path.string(), "gen-data", "--count", "64", "--out", data.string()}, sink, sink) != 0)
    return {false, "gen-data failed: " + sink.str()};
  std::vector<std::string> logs;
  for (const char* run : {"det_a", "det_b"}) {
    if (cli::run({"--config", cfg_path.string(), "--seed", "5", "train", "--train-dir", data.string(), "--batch-size",
                  "8", "--max-steps", "10", "--out", (dir / run).string()},
                 sink, sink) != 0)
      return {false, "train failed: " + sink.str()};
    std::ifstream in(dir / run / "train.log");
    logs.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto loss_at = [](const std::string& log, std::size_t step) {
    std::istringstream in(log);
    std::string line;
    for (std::size_t i = 0; i < step && std::getline(in, line);) ++i;
    std::istringstream fields(line);
    std::string s, l;
    std::getline(fields, s, '\t');
    std::getline(fields, l, '\t');
    return l;
  };
  const auto a1 = loss_at(logs[0], 1), b1 = loss_at(logs[1], 1);
  const auto a10 = loss_at(logs[0], 10), b10 = loss_at(logs[1], 10);
  return {!a10.empty() && a1 == b1 && a10 == b10, "step 1 " + a1 + " / " + b1 + ", step 10 " + a10 + " / " + b10};
}

}  // namespace

int main() {
  const auto dir = fs::temp_directory_path() / ("kiss_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.passed;
    std::cout << "criterion " << id << " " << name << ": " << (o.passed ? "PASS" : "FAIL") << "  (" << o.detail
              << ")" << std::endl;
  };

  report(1, "gradient suite", gradient_suite);
  report(2, "STN identity", stn_identity);
  report(3, "out-of-image regularizer", regularizer);
  report(4, "transformer causality", causality);
  report(5, "loss sanity", loss_sanity);
  report(6, "overfit 8 samples", overfit);

  DeskRun full, soft;
  report(7, "desk-scale training", [&] {
    full = desk_training(false);
    return Outcome{full.eval.sequence_accuracy >= 0.90 && full.eval.penalty < 0.05 && full.minutes < 30,
                   "sequence accuracy " + fmt("%.3f", full.eval.sequence_accuracy) + ", char accuracy " +
                       fmt("%.3f", full.eval.char_accuracy) + ", penalty " + fmt("%.4f", full.eval.penalty) + ", " +
                       fmt("%.1f", full.minutes) + " min"};
  });
  report(8, "softmax ablation ordering", [&] {
    soft = desk_training(true);
    return Outcome{soft.eval.sequence_accuracy < full.eval.sequence_accuracy,
                   "softmax " + fmt("%.3f", soft.eval.sequence_accuracy) + " vs full " +
                       fmt("%.3f", full.eval.sequence_accuracy)};
  });
  report(9, "checkpoint round trip", [&] { return checkpoint_roundtrip(dir); });
  report(10, "determinism", [&] { return determinism(dir); });

  fs::remove_all(dir);
  std::cout << (10 - failures) << "/10 criteria passed" << std::endl;
  return std::min(failures, 125);
}
