#include "kiss/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "kiss/localizer.hpp"
#include "kiss/model.hpp"
#include "kiss/ops.hpp"
#include "kiss/recognizer.hpp"

namespace kiss {

namespace {

using TensorD = Tensor<double>;
using Inputs = std::vector<TensorD>;

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - n[i];
  return norm(d) / std::max({norm(a), norm(n), 1e-6});
}

std::vector<std::size_t> pick_indices(std::size_t n, std::size_t max, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n <= max) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TensorD uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return TensorD(std::move(shape), std::move(v));
}

// Uniform values at least `margin` away from every kink.
TensorD away_from(Shape shape, double lo, double hi, const std::vector<double>& kinks, double margin,
                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    bool ok = false;
    while (!ok) {
      x = d(rng);
      ok = std::none_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) < margin; });
    }
  }
  return TensorD(std::move(shape), std::move(v));
}

// Normalized coordinates whose pixel positions keep a fractional part in [0.2, 0.8].
TensorD off_grid_coords(Shape shape, std::size_t width, std::size_t height, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cell_x(-2, static_cast<int>(width));
  std::uniform_int_distribution<int> cell_y(-2, static_cast<int>(height));
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double px = cell_x(rng) + frac(rng);
    const double py = cell_y(rng) + frac(rng);
    v[i] = 2.0 * px / static_cast<double>(width - 1) - 1.0;
    v[i + 1] = 2.0 * py / static_cast<double>(height - 1) - 1.0;
  }
  return TensorD(std::move(shape), std::move(v));
}

double projected(const std::vector<TensorD>& outs, const std::vector<std::vector<double>>& r) {
  double s = 0;
  for (std::size_t k = 0; k < outs.size(); ++k) {
    const auto d = outs[k].data();
    for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * r[k][i];
  }
  return s;
}

GradCheckCase simple(std::string name, std::function<Inputs(std::mt19937_64&)> make, GradForward f,
                     double tolerance = 1e-4) {
  GradCheckCase c;
  c.name = name;
  c.tolerance = tolerance;
  c.run = [name, make, f, tolerance](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed ^ name_hash(name));
    return check_gradient(name, tolerance, f, make(rng), o);
  };
  return c;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.loc_backbone.input_width = 24;
  c.loc_backbone.input_height = 16;
  c.loc_backbone.stage_channels = {4};
  c.loc_backbone.blocks_per_stage = {1};
  c.loc_backbone.norm_groups = 2;
  c.rec_backbone = c.loc_backbone;
  c.localizer.n_rois = 3;
  c.localizer.roi_width = 6;
  c.localizer.roi_height = 8;
  c.localizer.lstm_hidden = 6;
  c.localizer.rotation_dropout = 0.0;
  c.localizer.head_init_scale = 0.5;
  c.transformer.d_model = 8;
  c.transformer.n_heads = 2;
  c.transformer.d_ff = 12;
  c.transformer.n_layers = 1;
  c.transformer.dropout = 0.0;
  return c;
}

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.input_width = 6;
  b.input_height = 8;
  b.stage_channels = {4};
  b.blocks_per_stage = {1};
  b.norm_groups = 2;
  return b;
}

}  // namespace

GradCheckReport check_gradient(const std::string& name, double tolerance, const GradForward& forward,
                               std::vector<TensorD> inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;
  report.tolerance = tolerance;
  try {
    std::mt19937_64 rng(options.seed ^ (name_hash(name) >> 1));
    std::vector<std::vector<double>> r;
    for (auto& in : inputs) {
      in.set_requires_grad(true);
      in.zero_grad();
    }
    {
      Tape<double> tape;
      ActiveTape<double> active(tape);
      const auto outs = forward(inputs);
      std::normal_distribution<double> nd(0.0, 1.0);
      TensorD loss;
      for (const auto& out : outs) {
        std::vector<double> proj(out.numel());
        for (auto& x : proj) x = nd(rng);
        const auto term = ops::sum(ops::mul(out, TensorD(out.shape(), proj)));
        loss = loss.defined() ? ops::add(loss, term) : term;
        r.push_back(std::move(proj));
      }
      tape.backward(loss);
    }
    auto eval = [&] {
      NoGrad<double> no_grad;
      return projected(forward(inputs), r);
    };
    const double h = options.step;
    for (auto& in : inputs) {
      const auto idx = pick_indices(in.numel(), options.max_probes_per_input, rng);
      std::vector<double> analytic, numeric;
      for (std::size_t i : idx) {
        auto data = in.mutable_data();
        const double orig = data[i];
        data[i] = orig + h;
        const double fp = eval();
        in.mutable_data()[i] = orig - h;
        const double fm = eval();
        in.mutable_data()[i] = orig;
        numeric.push_back((fp - fm) / (2 * h));
        analytic.push_back(in.has_grad() ? in.grad()[i] : 0.0);
      }
      report.probes += idx.size();
      report.max_rel_error = std::max(report.max_rel_error, rel_error(analytic, numeric));
    }
    report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error < tolerance;
  } catch (const std::exception& e) {
    report.error = e.what();
    report.passed = false;
  }
  return report;
}

const std::vector<std::string>& tape_op_names() {
  static const std::vector<std::string> names = {
      "add",        "sub",        "mul",          "add_scalar",     "mul_scalar",      "relu",
      "tanh",       "sigmoid",    "exp",          "log",            "matmul",          "linear",
      "reshape",    "permute",    "concat",       "slice",          "broadcast_to",    "sum",
      "sum_axis",   "mean",       "mean_axis",    "embedding",      "dropout",         "softmax",
      "layer_norm", "conv2d",     "group_norm",   "global_avg_pool", "softmax_cross_entropy",
      "affine_grid", "grid_sample", "out_of_image_penalty"};
  return names;
}

std::vector<GradCheckCase> gradcheck_registry() {
  std::vector<GradCheckCase> cases;
  auto u = [](Shape s, double lo, double hi) {
    return [s, lo, hi](std::mt19937_64& rng) { return uniform(s, lo, hi, rng); };
  };

  cases.push_back(simple(
      "add", [&](auto& rng) { return Inputs{uniform({2, 3, 4}, -1, 1, rng), uniform({3, 1}, -1, 1, rng)}; },
      [](const Inputs& x) { return Inputs{ops::add(x[0], x[1])}; }));
  cases.push_back(simple(
      "sub", [&](auto& rng) { return Inputs{uniform({2, 3}, -1, 1, rng), uniform({3}, -1, 1, rng)}; },
      [](const Inputs& x) { return Inputs{ops::sub(x[0], x[1]), ops::sub(x[1], x[0])}; }));
  cases.push_back(simple(
      "mul", [&](auto& rng) { return Inputs{uniform({2, 3, 4}, -1, 1, rng), uniform({1, 3, 1}, -1, 1, rng)}; },
      [](const Inputs& x) { return Inputs{ops::mul(x[0], x[1]), ops::mul(x[0], x[0])}; }));
  cases.push_back(simple(
      "add_scalar", [u](auto& rng) { return Inputs{u({3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::add_scalar(x[0], 0.7)}; }));
  cases.push_back(simple(
      "mul_scalar", [u](auto& rng) { return Inputs{u({3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::mul_scalar(x[0], -1.3)}; }));
  cases.push_back(simple(
      "relu", [](auto& rng) { return Inputs{away_from({4, 5}, -1, 1, {0.0}, 0.05, rng)}; },
      [](const Inputs& x) { return Inputs{ops::relu(x[0])}; }));
  cases.push_back(simple(
      "tanh", [u](auto& rng) { return Inputs{u({4, 5}, -2, 2)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::tanh(x[0])}; }));
  cases.push_back(simple(
      "sigmoid", [u](auto& rng) { return Inputs{u({4, 5}, -3, 3)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::sigmoid(x[0])}; }));
  cases.push_back(simple(
      "exp", [u](auto& rng) { return Inputs{u({4, 5}, -2, 2)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::exp(x[0])}; }));
  cases.push_back(simple(
      "log", [u](auto& rng) { return Inputs{u({4, 5}, 0.5, 2)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::log(x[0])}; }));
  cases.push_back(simple(
      "matmul",
      [](auto& rng) {
        return Inputs{uniform({3, 4}, -1, 1, rng),    uniform({4, 5}, -1, 1, rng), uniform({2, 3, 4}, -1, 1, rng),
                      uniform({2, 4, 2}, -1, 1, rng)};
      },
      [](const Inputs& x) {
        return Inputs{ops::matmul(x[0], x[1]), ops::matmul(x[2], x[1]), ops::matmul(x[2], x[3])};
      }));
  cases.push_back(simple(
      "linear",
      [](auto& rng) {
        return Inputs{uniform({2, 3, 4}, -1, 1, rng), uniform({4, 5}, -1, 1, rng), uniform({5}, -1, 1, rng)};
      },
      [](const Inputs& x) { return Inputs{ops::linear(x[0], x[1], x[2]), ops::linear(x[0], x[1], TensorD())}; }));
  cases.push_back(simple(
      "reshape", [u](auto& rng) { return Inputs{u({2, 6}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::reshape(x[0], {3, 4})}; }));
  cases.push_back(simple(
      "permute", [u](auto& rng) { return Inputs{u({2, 3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::permute(x[0], {2, 0, 1}), ops::transpose(x[0], 0, 1)}; }));
  cases.push_back(simple(
      "concat", [](auto& rng) { return Inputs{uniform({2, 3}, -1, 1, rng), uniform({2, 2}, -1, 1, rng)}; },
      [](const Inputs& x) { return Inputs{ops::concat<double>({x[0], x[1]}, 1)}; }));
  cases.push_back(simple(
      "slice", [u](auto& rng) { return Inputs{u({3, 5}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::slice(x[0], 1, 1, 4), ops::slice(x[0], 0, 2, 3)}; }));
  cases.push_back(simple(
      "broadcast_to", [u](auto& rng) { return Inputs{u({3, 1}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::broadcast_to(x[0], {2, 3, 4})}; }));
  cases.push_back(simple(
      "sum", [u](auto& rng) { return Inputs{u({3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::sum(x[0])}; }));
  cases.push_back(simple(
      "sum_axis", [u](auto& rng) { return Inputs{u({2, 3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::sum(x[0], 1), ops::sum(x[0], 2, true)}; }));
  cases.push_back(simple(
      "mean", [u](auto& rng) { return Inputs{u({3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::mean(x[0])}; }));
  cases.push_back(simple(
      "mean_axis", [u](auto& rng) { return Inputs{u({2, 3, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::mean(x[0], 0), ops::mean(x[0], 2, true)}; }));
  cases.push_back(simple(
      "embedding", [u](auto& rng) { return Inputs{u({6, 4}, -1, 1)(rng)}; },
      [](const Inputs& x) {
        const std::vector<int> ids = {1, 3, 1, 5};
        return Inputs{ops::embedding(x[0], std::span<const int>(ids), {2, 2})};
      }));
  cases.push_back(simple(
      "dropout", [u](auto& rng) { return Inputs{u({4, 6}, -1, 1)(rng)}; },
      [](const Inputs& x) {
        std::mt19937_64 mask_rng(99);
        return Inputs{ops::dropout(x[0], 0.3, mask_rng, true)};
      }));
  cases.push_back(simple(
      "softmax", [u](auto& rng) { return Inputs{u({3, 5}, -2, 2)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::softmax(x[0])}; }));
  cases.push_back(simple(
      "layer_norm",
      [](auto& rng) {
        return Inputs{uniform({2, 3, 6}, -1, 1, rng), uniform({6}, 0.5, 1.5, rng), uniform({6}, -1, 1, rng)};
      },
      [](const Inputs& x) { return Inputs{ops::layer_norm(x[0], x[1], x[2])}; }));
  cases.push_back(simple(
      "conv2d", [](auto& rng) { return Inputs{uniform({2, 3, 6, 5}, -1, 1, rng), uniform({4, 3, 3, 3}, -1, 1, rng)}; },
      [](const Inputs& x) { return Inputs{ops::conv2d(x[0], x[1], 2, 1), ops::conv2d(x[0], x[1], 1, 0)}; }));
  cases.push_back(simple(
      "group_norm",
      [](auto& rng) {
        return Inputs{uniform({2, 4, 3, 3}, -1, 1, rng), uniform({4}, 0.5, 1.5, rng), uniform({4}, -1, 1, rng)};
      },
      [](const Inputs& x) { return Inputs{ops::group_norm(x[0], 2, x[1], x[2])}; }));
  cases.push_back(simple(
      "global_avg_pool", [u](auto& rng) { return Inputs{u({2, 3, 4, 5}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::global_avg_pool(x[0])}; }));
  cases.push_back(simple(
      "softmax_cross_entropy", [u](auto& rng) { return Inputs{u({4, 6}, -2, 2)(rng)}; },
      [](const Inputs& x) {
        const std::vector<int> targets = {1, -1, 5, 0};
        return Inputs{ops::softmax_cross_entropy(x[0], std::span<const int>(targets), -1)};
      }));
  cases.push_back(simple(
      "affine_grid", [u](auto& rng) { return Inputs{u({2, 3, 2, 3}, -1, 1)(rng)}; },
      [](const Inputs& x) { return Inputs{ops::affine_grid(x[0], 5, 4)}; }));
  cases.push_back(simple(
      "grid_sample",
      [](auto& rng) { return Inputs{uniform({2, 2, 7, 9}, 0, 1, rng), off_grid_coords({2, 3, 4, 5, 2}, 9, 7, rng)}; },
      [](const Inputs& x) { return Inputs{ops::grid_sample(x[0], x[1])}; }));
  cases.push_back(simple(
      "out_of_image_penalty", [](auto& rng) { return Inputs{away_from({2, 3, 4, 5, 2}, -2.5, 2.5, {-1, 1}, 0.05, rng)}; },
      [](const Inputs& x) { return Inputs{ops::out_of_image_penalty(x[0])}; }));

  GradCheckCase lstm;
  lstm.name = "lstm";
  lstm.run = [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed ^ name_hash("lstm"));
    auto store = std::make_shared<ParameterStore<double>>();
    auto cell = std::make_shared<Lstm<double>>(5, 4, "lstm", *store, rng);
    Inputs inputs{uniform({2, 5}, -1, 1, rng)};
    for (auto& e : store->entries()) inputs.push_back(e.tensor);
    return check_gradient("lstm", 1e-4,
                          [store, cell](const Inputs& x) { return cell->run_constant_input(x[0], 3); }, inputs, o);
  };
  cases.push_back(lstm);

  GradCheckCase mha;
  mha.name = "multi_head_attention";
  mha.run = [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed ^ name_hash("multi_head_attention"));
    Inputs inputs{uniform({2, 4, 8}, -1, 1, rng), uniform({2, 3, 8}, -1, 1, rng)};
    for (int k = 0; k < 4; ++k) {
      inputs.push_back(uniform({8, 8}, -0.5, 0.5, rng));
      inputs.push_back(uniform({8}, -0.1, 0.1, rng));
    }
    return check_gradient(
        "multi_head_attention", 1e-4,
        [](const Inputs& x) {
          AttentionParams<double> p{x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9]};
          const auto self = multi_head_attention(x[0], x[0], 2, p, causal_mask<double>(4));
          const auto cross = multi_head_attention(x[0], x[1], 2, p, TensorD());
          return Inputs{self.output, cross.output};
        },
        inputs, o);
  };
  cases.push_back(mha);

  auto recognizer_case = [](std::string name, bool decoder) {
    GradCheckCase c;
    c.name = name;
    c.run = [name, decoder](const GradCheckOptions& o) {
      std::mt19937_64 rng(o.seed ^ name_hash(name));
      TransformerConfig tc;
      tc.d_model = 8;
      tc.n_heads = 2;
      tc.d_ff = 12;
      tc.dropout = 0.0;
      auto store = std::make_shared<ParameterStore<double>>();
      auto rec = std::make_shared<Recognizer<double>>(tc, tiny_backbone(), 4, false, *store, rng);
      Inputs inputs{uniform({2, 4, 8}, -1, 1, rng)};
      const std::string prefix = decoder ? "rec.decoder" : "rec.encoder";
      for (auto& e : store->entries()) {
        const bool wanted = e.name.rfind(prefix, 0) == 0 ||
                            (decoder && (e.name.rfind("rec.embedding", 0) == 0 || e.name.rfind("rec.classifier", 0) == 0));
        if (wanted) inputs.push_back(e.tensor);
      }
      const auto& vocab = Vocabulary::standard();
      const std::vector<TokenSequence> targets = {vocab.encode("ab", 4), vocab.encode("x", 4)};
      return check_gradient(
          name, 1e-4,
          [store, rec, decoder, targets](const Inputs& x) {
            std::mt19937_64 unused(0);
            if (!decoder) return Inputs{rec->encode(x[0], false, unused)};
            return Inputs{rec->teacher_forced_logits(x[0], targets, false, unused)};
          },
          inputs, o);
    };
    return c;
  };
  cases.push_back(recognizer_case("encoder_layer", false));
  cases.push_back(recognizer_case("decoder_layer", true));

  GradCheckCase e2e;
  e2e.name = "end_to_end";
  e2e.tolerance = 1e-3;
  e2e.run = [](const GradCheckOptions& o) { return check_end_to_end(o, 1e-3); };
  cases.push_back(e2e);
  return cases;
}

GradCheckReport check_end_to_end(const GradCheckOptions& options, double tolerance) {
  GradCheckReport report;
  report.name = "end_to_end";
  report.tolerance = tolerance;
  try {
    const auto cfg = tiny_model_config();
    KissModel<double> model(cfg, options.seed);
    std::mt19937_64 rng(options.seed ^ name_hash("end_to_end"));
    const std::size_t W = cfg.image_width(), H = cfg.image_height();
    const auto images = uniform({2, 1, H, W}, 0, 1, rng);
    const auto& vocab = Vocabulary::standard();
    const std::vector<TokenSequence> targets = {vocab.encode("ab", 3), vocab.encode("c", 3)};
    std::mt19937_64 unused(0);

    auto& params = model.params();
    params.zero_grad();
    {
      Tape<double> tape;
      ActiveTape<double> active(tape);
      const auto fwd = model.forward(images, targets, false, unused);
      tape.backward(fwd.loss);
    }

    auto run = [&](std::vector<double>* coords) {
      NoGrad<double> no_grad;
      const auto fwd = model.forward(images, targets, false, unused);
      if (coords) coords->assign(fwd.rois.grid.coords.data().begin(), fwd.rois.grid.coords.data().end());
      return fwd.loss.item();
    };
    std::vector<double> base;
    run(&base);
    // Same integer pixel cell and same side of each penalty kink.
    auto same_piece = [&](const std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double dim = static_cast<double>(i % 2 == 0 ? W : H) - 1;
        const double pa = (a[i] + 1) / 2 * dim, pb = (b[i] + 1) / 2 * dim;
        if (std::floor(pa) != std::floor(pb)) return false;
        if ((a[i] > 1) != (b[i] > 1) || (a[i] < -1) != (b[i] < -1)) return false;
      }
      return true;
    };

    std::vector<double> head_a, head_n, other_a, other_n;
    for (auto& e : params.entries()) {
      const bool head = e.name.rfind("loc.head.", 0) == 0;
      const auto idx = pick_indices(e.tensor.numel(), head ? e.tensor.numel() : 3, rng);
      for (std::size_t i : idx) {
        const double orig = e.tensor.data()[i];
        double h = options.step * 0.1;
        bool ok = false;
        double numeric = 0;
        for (int attempt = 0; attempt < 4 && !ok; ++attempt, h *= 0.25) {
          std::vector<double> cp, cm;
          e.tensor.mutable_data()[i] = orig + h;
          const double fp = run(&cp);
          e.tensor.mutable_data()[i] = orig - h;
          const double fm = run(&cm);
          e.tensor.mutable_data()[i] = orig;
          ok = same_piece(base, cp) && same_piece(base, cm);
          numeric = (fp - fm) / (2 * h);
        }
        if (!ok) {
          ++report.skipped;
          continue;
        }
        const double analytic = e.tensor.has_grad() ? e.tensor.grad()[i] : 0.0;
        (head ? head_a : other_a).push_back(analytic);
        (head ? head_n : other_n).push_back(numeric);
        ++report.probes;
      }
    }
    report.max_rel_error = std::max(rel_error(head_a, head_n), rel_error(other_a, other_n));
    report.passed = !head_a.empty() && std::isfinite(report.max_rel_error) && report.max_rel_error < tolerance;
    if (head_a.empty()) report.error = "no valid localizer-head probes";
  } catch (const std::exception& e) {
    report.error = e.what();
    report.passed = false;
  }
  return report;
}

std::vector<GradCheckReport> run_gradcheck(const std::vector<GradCheckCase>& cases, const GradCheckOptions& options,
                                           std::ostream* out) {
  std::vector<GradCheckReport> reports;
  for (const auto& c : cases) {
    auto r = c.run(options);
    if (out) {
      char line[256];
      std::snprintf(line, sizeof line, "%-24s %.3e  < %.0e  %s", r.name.c_str(), r.max_rel_error, r.tolerance,
                    r.passed ? "PASS" : "FAIL");
      *out << line;
      if (!r.error.empty()) *out << "  (" << r.error << ")";
      *out << '\n';
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace kiss
