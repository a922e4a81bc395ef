#include "kiss/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "kiss/ops.hpp"

namespace kiss {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (epochs == 0) throw std::invalid_argument("train: epochs must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(lr_decay_per_epoch > 0.0 && lr_decay_per_epoch <= 1.0)) {
    throw std::invalid_argument("train: lr_decay_per_epoch must lie in (0, 1]");
  }
  if (!(localizer_clip_norm > 0.0)) throw std::invalid_argument("train: localizer_clip_norm must be positive");
}

double TrainConfig::lr_at_epoch(std::size_t epoch) const {
  return lr * std::pow(lr_decay_per_epoch, static_cast<double>(epoch));
}

template <typename T>
RAdam<T>::RAdam(const ParameterStore<T>& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.numel(), T(0));
    v_.emplace_back(e.tensor.numel(), T(0));
  }
}

template <typename T>
double RAdam<T>::rho(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

template <typename T>
void RAdam<T>::step(ParameterStore<T>& params) {
  auto& entries = params.entries();
  if (entries.size() != m_.size()) throw std::logic_error("RAdam: parameter count changed since construction");
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (T g : e.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("RAdam: non-finite gradient for parameter '" + e.name + "'");
    }
  }
  ++t_;
  const double t = static_cast<double>(t_);
  const double bc1 = 1.0 - std::pow(beta1_, t);
  const double bc2 = 1.0 - std::pow(beta2_, t);
  const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
  const double rho_t = rho(t_, beta2_);
  const bool adaptive = rho_t > 4.0;
  const double r = adaptive ? std::sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
                            : 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& tensor = entries[i].tensor;
    auto w = tensor.mutable_data();
    const bool has = tensor.has_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? static_cast<double>(tensor.grad()[j]) : 0.0;
      const double mj = beta1_ * static_cast<double>(m[j]) + (1 - beta1_) * g;
      const double vj = beta2_ * static_cast<double>(v[j]) + (1 - beta2_) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / bc1;
      double update;
      if (adaptive) {
        update = lr_ * r * m_hat / (std::sqrt(vj / bc2) + eps_);
      } else {
        update = lr_ * m_hat;
      }
      w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
    }
  }
}

template <typename T>
double clip_grad_norm(ParameterStore<T>& params, const std::function<bool(std::string_view)>& select,
                      double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0;
  for (const auto& e : params.entries()) {
    if (!select(e.name) || !e.tensor.has_grad()) continue;
    for (T g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& e : params.entries()) {
      if (!select(e.name) || !e.tensor.has_grad()) continue;
      for (T& g : e.tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

std::vector<TokenSequence> encode_labels(const std::vector<const Sample*>& samples, std::size_t length) {
  const auto& vocab = Vocabulary::standard();
  std::vector<TokenSequence> out;
  out.reserve(samples.size());
  for (const auto* s : samples) out.push_back(vocab.encode(s->label, length));
  return out;
}

template <typename T>
StepResult train_step(KissModel<T>& model, RAdam<T>& optimizer, const Tensor<T>& images,
                      const std::vector<TokenSequence>& targets, const TrainConfig& config, std::mt19937_64& rng) {
  auto& params = model.params();
  params.zero_grad();
  Tape<T> tape;
  StepResult result;
  {
    ActiveTape<T> active(tape);
    const auto fwd = model.forward(images, targets, true, rng);
    result.ce = static_cast<double>(fwd.ce.item());
    result.penalty = static_cast<double>(fwd.penalty.item());
    result.loss = static_cast<double>(fwd.loss.item());
    if (!std::isfinite(result.ce)) throw NumericError("train_step: cross-entropy is non-finite");
    if (!std::isfinite(result.penalty)) throw NumericError("train_step: out-of-image penalty is non-finite");
    if (!std::isfinite(result.loss)) throw NumericError("train_step: total loss is non-finite");
    tape.backward(fwd.loss);
  }
  tape.clear();
  clip_grad_norm<T>(params, &KissModel<T>::is_localizer_parameter, config.localizer_clip_norm);
  optimizer.step(params);
  result.step = optimizer.steps();
  result.lr = optimizer.lr();
  return result;
}

namespace {

const Image& model_sized(const Image& img, std::size_t w, std::size_t h, Image& storage) {
  if (img.width == w && img.height == h) return img;
  storage = resize_keep_aspect(img, w, h);
  return storage;
}

std::string fold_case(std::string s, bool insensitive) {
  if (insensitive) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return s;
}

}  // namespace

template <typename T>
std::vector<DecodedSequence> recognize(const KissModel<T>& model, const std::vector<Image>& images, bool use_tta,
                                       std::size_t batch_size) {
  const std::size_t W = model.config().image_width(), H = model.config().image_height();
  std::vector<Image> inputs;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (use_tta) {
      // Rotation rule follows the original image's proportions.
      for (auto& v : tta_variants(images[i])) {
        Image tmp;
        inputs.push_back(model_sized(v, W, H, tmp));
        owner.push_back(i);
      }
    } else {
      Image tmp;
      inputs.push_back(model_sized(images[i], W, H, tmp));
      owner.push_back(i);
    }
  }
  std::vector<DecodedSequence> decoded;
  decoded.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t end = std::min(inputs.size(), start + batch_size);
    std::vector<const Image*> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(&inputs[k]);
    auto out = model.predict(images_to_tensor<T>(batch));
    for (auto& d : out) decoded.push_back(std::move(d));
  }
  if (!use_tta) return decoded;
  std::vector<DecodedSequence> selected;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<DecodedSequence> candidates(decoded.begin() + static_cast<std::ptrdiff_t>(3 * i),
                                            decoded.begin() + static_cast<std::ptrdiff_t>(3 * i + 3));
    selected.push_back(candidates[select_tta_prediction(candidates)]);
  }
  return selected;
}

template <typename T>
EvalReport evaluate(const KissModel<T>& model, const std::vector<Sample>& samples, const EvalOptions& options) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t W = model.config().image_width(), H = model.config().image_height();
  const std::size_t N = model.config().localizer.n_rois;
  std::vector<Image> images;
  images.reserve(samples.size());
  for (const auto& s : samples) {
    Image tmp;
    images.push_back(model_sized(s.image, W, H, tmp));
  }
  const auto decoded = recognize(model, images, options.use_tta, options.batch_size);

  EvalReport report;
  report.count = samples.size();
  std::size_t exact = 0, char_hits = 0, char_total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto truth = fold_case(samples[i].label, options.case_insensitive);
    const auto pred = fold_case(decoded[i].text, options.case_insensitive);
    if (truth == pred) ++exact;
    const std::size_t span = std::max(truth.size(), pred.size());
    for (std::size_t k = 0; k < std::min(truth.size(), pred.size()); ++k) char_hits += truth[k] == pred[k];
    char_total += span;
  }
  report.sequence_accuracy = static_cast<double>(exact) / static_cast<double>(samples.size());
  report.char_accuracy = char_total ? static_cast<double>(char_hits) / static_cast<double>(char_total) : 1.0;

  NoGrad<T> no_grad;
  std::mt19937_64 unused(0);
  double ce_sum = 0, pen_sum = 0;
  for (std::size_t start = 0; start < samples.size(); start += options.batch_size) {
    const std::size_t end = std::min(samples.size(), start + options.batch_size);
    std::vector<const Image*> batch;
    std::vector<const Sample*> batch_samples;
    for (std::size_t k = start; k < end; ++k) {
      batch.push_back(&images[k]);
      batch_samples.push_back(&samples[k]);
    }
    const auto fwd = model.forward(images_to_tensor<T>(batch), encode_labels(batch_samples, N), false, unused);
    const double b = static_cast<double>(end - start);
    ce_sum += static_cast<double>(fwd.ce.item()) * b;
    pen_sum += static_cast<double>(fwd.penalty.item()) * b;
  }
  report.ce = ce_sum / static_cast<double>(samples.size());
  report.penalty = pen_sum / static_cast<double>(samples.size());
  return report;
}

template <typename T>
std::vector<StepResult> train(KissModel<T>& model, RAdam<T>& optimizer, const std::vector<Sample>& training,
                              const std::vector<Sample>* validation, const TrainConfig& config,
                              const AugmentPolicy& augment, const TrainHooks& hooks) {
  config.validate();
  augment.validate();
  if (training.empty()) throw std::invalid_argument("train: empty training set");
  const std::size_t W = model.config().image_width(), H = model.config().image_height();
  const std::size_t N = model.config().localizer.n_rois;
  std::vector<StepResult> history;
  std::mt19937_64 step_rng(sample_seed(config.seed, 0x5354455053ull));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    optimizer.set_lr(config.lr_at_epoch(epoch));
    std::vector<std::size_t> order(training.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(sample_seed(config.seed, 0x5348554600ull + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (hooks.max_steps && history.size() >= hooks.max_steps) break;
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Sample> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const Sample& src = training[order[k]];
        Image tmp;
        Sample s{model_sized(src.image, W, H, tmp), src.label};
        if (config.augment) {
          std::mt19937_64 aug_rng(sample_seed(config.seed ^ 0xA06u, epoch * training.size() + order[k]));
          s = augment_train(s, augment, aug_rng);
        }
        batch.push_back(std::move(s));
      }
      std::vector<const Image*> imgs;
      std::vector<const Sample*> ptrs;
      for (const auto& s : batch) {
        imgs.push_back(&s.image);
        ptrs.push_back(&s);
      }
      const auto r = train_step(model, optimizer, images_to_tensor<T>(imgs), encode_labels(ptrs, N), config, step_rng);
      history.push_back(r);
      loss_sum += r.loss;
      ++loss_count;
      if (hooks.log) {
        char line[160];
        std::snprintf(line, sizeof line, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\n", r.step, r.loss, r.ce, r.penalty, r.lr);
        *hooks.log << line << std::flush;
      }
    }
    EpochSummary summary;
    summary.epoch = epoch;
    summary.lr = optimizer.lr();
    summary.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    if (validation && !validation->empty()) {
      summary.has_eval = true;
      summary.eval = evaluate(model, *validation, EvalOptions{});
    }
    if (hooks.on_epoch) hooks.on_epoch(summary);
    if (hooks.max_steps && history.size() >= hooks.max_steps) break;
  }
  return history;
}

#define KISS_TRAINING(T)                                                                                         \
  template class RAdam<T>;                                                                                       \
  template double clip_grad_norm<T>(ParameterStore<T>&, const std::function<bool(std::string_view)>&, double);   \
  template StepResult train_step<T>(KissModel<T>&, RAdam<T>&, const Tensor<T>&, const std::vector<TokenSequence>&, \
                                    const TrainConfig&, std::mt19937_64&);                                        \
  template EvalReport evaluate<T>(const KissModel<T>&, const std::vector<Sample>&, const EvalOptions&);           \
  template std::vector<DecodedSequence> recognize<T>(const KissModel<T>&, const std::vector<Image>&, bool,       \
                                                     std::size_t);                                               \
  template std::vector<StepResult> train<T>(KissModel<T>&, RAdam<T>&, const std::vector<Sample>&,                \
                                            const std::vector<Sample>*, const TrainConfig&, const AugmentPolicy&, \
                                            const TrainHooks&);

KISS_TRAINING(float)
KISS_TRAINING(double)

}  // namespace kiss
