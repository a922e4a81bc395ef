#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string_view>
#include <vector>

#include "kiss/data.hpp"
#include "kiss/model.hpp"
#include "kiss/params.hpp"

namespace kiss {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  double lr = 1e-4;
  double lr_decay_per_epoch = 0.1;
  double localizer_clip_norm = 1.0;
  std::uint64_t seed = 1;
  bool augment = true;

  void validate() const;
  /// lr * decay^epoch, epoch counted from 0.
  double lr_at_epoch(std::size_t epoch) const;
};

/// RAdam with betas (0.9, 0.999) and eps 1e-8 by default. The adaptive
/// denominator is used only once the variance rectification term exceeds 4.
template <typename T>
class RAdam {
 public:
  RAdam() = default;
  RAdam(const ParameterStore<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update to every parameter from its accumulated gradient.
  /// Throws NumericError naming the parameter when a gradient is non-finite;
  /// nothing is modified in that case.
  void step(ParameterStore<T>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }

  /// Rectification term at step t; <= 4 selects the momentum-only update.
  static double rho(std::size_t t, double beta2);

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Scales the gradients of parameters selected by `select` so their joint L2
/// norm is at most max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, const std::function<bool(std::string_view)>& select,
                      double max_norm);

struct StepResult {
  std::size_t step = 0;
  double loss = 0, ce = 0, penalty = 0, lr = 0;
};

/// Forward, backward, localizer clipping and one optimizer update.
/// Throws NumericError naming the component when the loss is non-finite.
template <typename T>
StepResult train_step(KissModel<T>& model, RAdam<T>& optimizer, const Tensor<T>& images,
                      const std::vector<TokenSequence>& targets, const TrainConfig& config, std::mt19937_64& rng);

struct EvalReport {
  std::size_t count = 0;
  double sequence_accuracy = 0;
  /// Matches over max(|prediction|, |truth|) positions, pooled over samples.
  double char_accuracy = 0;
  double ce = 0;
  /// Out-of-image penalty per sample.
  double penalty = 0;
};

struct EvalOptions {
  bool use_tta = false;
  bool case_insensitive = false;
  std::size_t batch_size = 32;
};

template <typename T>
EvalReport evaluate(const KissModel<T>& model, const std::vector<Sample>& samples, const EvalOptions& options);

/// Decoded strings for each image (resized to the model input first), with optional TTA.
template <typename T>
std::vector<DecodedSequence> recognize(const KissModel<T>& model, const std::vector<Image>& images, bool use_tta,
                                       std::size_t batch_size = 32);

struct EpochSummary {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  bool has_eval = false;
  EvalReport eval;
};

struct TrainHooks {
  /// Receives one tab-separated `step L CE penalty lr` line per step.
  std::ostream* log = nullptr;
  std::function<void(const EpochSummary&)> on_epoch;
  /// Stops training after this many steps when non-zero.
  std::size_t max_steps = 0;
};

/// Epoch loop: shuffles per epoch, augments per the policy, decays the
/// learning rate at epoch boundaries and evaluates on `validation` if given.
template <typename T>
std::vector<StepResult> train(KissModel<T>& model, RAdam<T>& optimizer, const std::vector<Sample>& training,
                              const std::vector<Sample>* validation, const TrainConfig& config,
                              const AugmentPolicy& augment, const TrainHooks& hooks);

std::vector<TokenSequence> encode_labels(const std::vector<const Sample*>& samples, std::size_t length);

}  // namespace kiss
