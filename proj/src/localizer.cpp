#include "kiss/localizer.hpp"

#include <cmath>
#include <stdexcept>

#include "kiss/ops.hpp"

namespace kiss {

void LocalizerConfig::validate() const {
  if (n_rois == 0) throw std::invalid_argument("localizer: n_rois must be positive");
  if (roi_width < 2 || roi_height < 2) throw std::invalid_argument("localizer: ROI size must be at least 2x2");
  if (lstm_hidden == 0) throw std::invalid_argument("localizer: lstm_hidden must be positive");
  if (predictor == "transformer") throw std::invalid_argument("localizer: transformer predictor is not implemented");
  if (predictor != "lstm") throw std::invalid_argument("localizer: unknown predictor '" + predictor + "'");
  if (rotation_dropout < 0.0 || rotation_dropout > 1.0) {
    throw std::invalid_argument("localizer: rotation_dropout must lie in [0, 1]");
  }
}

template <typename T>
Lstm<T>::Lstm(std::size_t input, std::size_t hidden, const std::string& prefix, ParameterStore<T>& store,
              std::mt19937_64& rng)
    : hidden_(hidden) {
  const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden)));
  w_input_ = store.add_uniform(prefix + ".w_input", Shape{input, 4 * hidden}, bound, rng);
  w_hidden_ = store.add_uniform(prefix + ".w_hidden", Shape{hidden, 4 * hidden}, bound, rng);
  bias_ = store.add(prefix + ".bias", Shape{4 * hidden});
  auto b = bias_.mutable_data();
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = T(1);  // forget gate
}

template <typename T>
std::vector<Tensor<T>> Lstm<T>::run_constant_input(const Tensor<T>& x, std::size_t steps) const {
  const std::size_t batch = x.dim(0);
  const std::size_t H = hidden_;
  const Tensor<T> x_proj = ops::linear(x, w_input_, bias_);
  Tensor<T> h = Tensor<T>::zeros(Shape{batch, H});
  Tensor<T> c = Tensor<T>::zeros(Shape{batch, H});
  std::vector<Tensor<T>> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto gates = t == 0 ? x_proj : ops::add(x_proj, ops::matmul(h, w_hidden_));
    const auto i = ops::sigmoid(ops::slice(gates, 1, 0, H));
    const auto f = ops::sigmoid(ops::slice(gates, 1, H, 2 * H));
    const auto g = ops::tanh(ops::slice(gates, 1, 2 * H, 3 * H));
    const auto o = ops::sigmoid(ops::slice(gates, 1, 3 * H, 4 * H));
    c = t == 0 ? ops::mul(i, g) : ops::add(ops::mul(f, c), ops::mul(i, g));
    h = ops::mul(o, ops::tanh(c));
    outputs.push_back(h);
  }
  return outputs;
}

template <typename T>
Tensor<T> rotation_dropout(const Tensor<T>& theta, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate > 1.0) throw NumericError("rotation_dropout: rate outside [0, 1]");
  if (!training || rate == 0.0) return theta;
  if (theta.numel() % 6 != 0) throw ShapeError("rotation_dropout: theta " + to_string(theta.shape()) + " not 2x3");
  std::vector<T> mask(theta.numel(), T(1));
  std::bernoulli_distribution drop(rate);
  for (std::size_t m = 0; m < theta.numel() / 6; ++m) {
    if (drop(rng)) {
      mask[m * 6 + 1] = T(0);
      mask[m * 6 + 3] = T(0);
    }
  }
  return ops::mul(theta, Tensor<T>(theta.shape(), std::move(mask)));
}

template <typename T>
SamplingGrid<T> generate_grid(const AffineParams<T>& params, std::size_t out_w, std::size_t out_h) {
  return SamplingGrid<T>{ops::affine_grid(params.theta, out_w, out_h), out_w, out_h};
}

template <typename T>
Tensor<T> out_of_image_penalty(const SamplingGrid<T>& grid) {
  return ops::out_of_image_penalty(grid.coords);
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& image, const SamplingGrid<T>& grid) {
  return ops::grid_sample(image, grid.coords);
}

template <typename T>
AffineParams<T> uniform_slices(std::size_t batch, std::size_t n_rois) {
  std::vector<T> theta(batch * n_rois * 6, T(0));
  const T width = T(1) / static_cast<T>(n_rois);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < n_rois; ++n) {
      T* a = theta.data() + (b * n_rois + n) * 6;
      a[0] = width;
      a[2] = T(-1) + static_cast<T>(2 * n + 1) * width;
      a[4] = T(1);
    }
  }
  return AffineParams<T>{Tensor<T>(Shape{batch, n_rois, 2, 3}, std::move(theta)), n_rois};
}

template <typename T>
Localizer<T>::Localizer(const LocalizerConfig& config, const BackboneConfig& backbone, ParameterStore<T>& store,
                        std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  backbone_ = Backbone<T>(backbone, "loc.backbone", store, rng);
  lstm_ = Lstm<T>(backbone.output_channels(), config_.lstm_hidden, "loc.lstm", store, rng);
  const T s = static_cast<T>(config_.head_init_scale);
  head_weight_ = store.add_uniform("loc.head.weight", Shape{config_.lstm_hidden, 6}, s, rng);
  head_bias_ = store.add_uniform("loc.head.bias", Shape{6}, s, rng);
}

template <typename T>
AffineParams<T> Localizer<T>::predict_affine(const Tensor<T>& features, bool training, std::mt19937_64& rng) const {
  for (T v : features.data()) {
    if (!std::isfinite(v)) throw NumericError("predict_affine: non-finite feature value");
  }
  const std::size_t batch = features.dim(0);
  const auto hidden = lstm_.run_constant_input(features, config_.n_rois);
  std::vector<Tensor<T>> steps;
  steps.reserve(hidden.size());
  for (const auto& h : hidden) steps.push_back(ops::linear(h, head_weight_, head_bias_));
  auto theta = ops::concat(steps, 1);  // (B, N * 6), step-major per sample
  theta = rotation_dropout(theta, config_.rotation_dropout, rng, training);
  return AffineParams<T>{ops::reshape(theta, Shape{batch, config_.n_rois, 2, 3}), config_.n_rois};
}

template <typename T>
RoiBatch<T> Localizer<T>::localize(const Tensor<T>& image, bool training, std::mt19937_64& rng) const {
  const auto features = global_pool(backbone_.extract_features(image));
  auto affine = predict_affine(features, training, rng);
  auto grid = generate_grid(affine, config_.roi_width, config_.roi_height);
  RoiBatch<T> rois;
  rois.crops = bilinear_sample(image, grid);
  rois.reg_penalty = out_of_image_penalty(grid);
  rois.affine = std::move(affine);
  rois.grid = std::move(grid);
  return rois;
}

#define KISS_LOCALIZER(T)                                                                                   \
  template class Lstm<T>;                                                                                   \
  template class Localizer<T>;                                                                              \
  template Tensor<T> rotation_dropout<T>(const Tensor<T>&, double, std::mt19937_64&, bool);                 \
  template SamplingGrid<T> generate_grid<T>(const AffineParams<T>&, std::size_t, std::size_t);              \
  template Tensor<T> out_of_image_penalty<T>(const SamplingGrid<T>&);                                       \
  template Tensor<T> bilinear_sample<T>(const Tensor<T>&, const SamplingGrid<T>&);                          \
  template AffineParams<T> uniform_slices<T>(std::size_t, std::size_t);

KISS_LOCALIZER(float)
KISS_LOCALIZER(double)

}  // namespace kiss
