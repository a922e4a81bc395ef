#include "kiss/model.hpp"

#include <stdexcept>

#include "kiss/ops.hpp"

namespace kiss {

void ModelConfig::validate() const {
  loc_backbone.validate();
  rec_backbone.validate();
  localizer.validate();
  transformer.validate();
  if (rec_backbone.in_channels != loc_backbone.in_channels) {
    throw std::invalid_argument("model: localizer and recognizer backbones disagree on input channels");
  }
  if (localizer.n_rois > Vocabulary::kMaxLength) {
    throw std::invalid_argument("model: n_rois " + std::to_string(localizer.n_rois) + " exceeds maximum label length " +
                                std::to_string(Vocabulary::kMaxLength));
  }
}

template <typename T>
KissModel<T>::KissModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.rec_backbone.input_width = config_.localizer.roi_width;
  config_.rec_backbone.input_height = config_.localizer.roi_height;
  config_.validate();
  std::mt19937_64 rng(seed);
  if (!config_.recognition_only) {
    localizer_.emplace(config_.localizer, config_.loc_backbone, store_, rng);
  }
  recognizer_ = Recognizer<T>(config_.transformer, config_.rec_backbone, config_.localizer.n_rois,
                              config_.softmax_recognizer, store_, rng);
}

template <typename T>
bool KissModel<T>::is_localizer_parameter(std::string_view name) {
  return name.substr(0, 4) == "loc.";
}

template <typename T>
RoiBatch<T> KissModel<T>::regions(const Tensor<T>& images, bool training, std::mt19937_64& rng) const {
  if (images.rank() != 4 || images.dim(2) != config_.image_height() || images.dim(3) != config_.image_width()) {
    throw ShapeError("model: images " + to_string(images.shape()) + " are not (B, C, " +
                     std::to_string(config_.image_height()) + ", " + std::to_string(config_.image_width()) + ")");
  }
  if (localizer_) return localizer_->localize(images, training, rng);
  const auto& lc = config_.localizer;
  RoiBatch<T> rois;
  rois.affine = uniform_slices<T>(images.dim(0), lc.n_rois);
  rois.grid = generate_grid(rois.affine, lc.roi_width, lc.roi_height);
  rois.crops = bilinear_sample(images, rois.grid);
  rois.reg_penalty = Tensor<T>::scalar(T(0));
  return rois;
}

template <typename T>
ForwardResult<T> KissModel<T>::forward(const Tensor<T>& images, const std::vector<TokenSequence>& targets,
                                       bool training, std::mt19937_64& rng) const {
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  if (targets.size() != batch) {
    throw ShapeError("model: " + std::to_string(targets.size()) + " targets for batch of " + std::to_string(batch));
  }
  ForwardResult<T> r;
  r.rois = regions(images, training, rng);
  r.logits = recognizer_.forward(r.rois.crops, batch, targets, training, rng);
  r.ce = recognition_loss(r.logits, targets);
  r.penalty = ops::mul_scalar(r.rois.reg_penalty, T(1) / static_cast<T>(batch));
  r.loss = ops::add(r.ce, r.penalty);
  return r;
}

template <typename T>
std::vector<DecodedSequence> KissModel<T>::predict(const Tensor<T>& images, std::size_t max_len) const {
  NoGrad<T> no_grad;
  std::mt19937_64 unused(0);
  const auto rois = regions(images, false, unused);
  return recognizer_.predict(rois.crops, images.dim(0), max_len);
}

template class KissModel<float>;
template class KissModel<double>;

}  // namespace kiss
