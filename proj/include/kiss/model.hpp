#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "kiss/backbone.hpp"
#include "kiss/localizer.hpp"
#include "kiss/params.hpp"
#include "kiss/recognizer.hpp"

namespace kiss {

struct ModelConfig {
  /// Its input size is the word-image size.
  BackboneConfig loc_backbone;
  /// Its input size is overwritten with the ROI size.
  BackboneConfig rec_backbone;
  LocalizerConfig localizer;
  TransformerConfig transformer;
  /// Uniform vertical slices instead of predicted regions; no localizer parameters.
  bool recognition_only = false;
  /// N independent linear classifiers instead of the transformer.
  bool softmax_recognizer = false;

  std::size_t image_width() const { return loc_backbone.input_width; }
  std::size_t image_height() const { return loc_backbone.input_height; }
  void validate() const;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;   // (B, N, 95)
  Tensor<T> ce;       // scalar
  Tensor<T> penalty;  // scalar, out-of-image penalty summed over the batch divided by B
  Tensor<T> loss;     // ce + penalty
  RoiBatch<T> rois;
};

template <typename T>
class KissModel {
 public:
  KissModel(const ModelConfig& config, std::uint64_t seed);
  KissModel(const KissModel&) = delete;
  KissModel& operator=(const KissModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const Recognizer<T>& recognizer() const { return recognizer_; }
  /// Null for the recognition-only variant.
  const Localizer<T>* localizer() const { return localizer_ ? &*localizer_ : nullptr; }

  static bool is_localizer_parameter(std::string_view name);

  /// images (B, C, H, W) with values in [0, 1].
  RoiBatch<T> regions(const Tensor<T>& images, bool training, std::mt19937_64& rng) const;
  ForwardResult<T> forward(const Tensor<T>& images, const std::vector<TokenSequence>& targets, bool training,
                           std::mt19937_64& rng) const;
  std::vector<DecodedSequence> predict(const Tensor<T>& images, std::size_t max_len = Vocabulary::kMaxLength) const;

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  std::optional<Localizer<T>> localizer_;
  Recognizer<T> recognizer_;
};

}  // namespace kiss
