#include "kiss/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "kiss/ops.hpp"

namespace kiss {

void BackboneConfig::validate() const {
  if (stage_channels.empty()) throw std::invalid_argument("backbone: at least one stage required");
  if (stage_channels.size() != blocks_per_stage.size()) {
    throw std::invalid_argument("backbone: stage_channels and blocks_per_stage lengths differ");
  }
  if (norm_groups == 0) throw std::invalid_argument("backbone: norm_groups must be positive");
  for (std::size_t c : stage_channels) {
    if (c == 0 || c % norm_groups != 0) {
      throw std::invalid_argument("backbone: channel count " + std::to_string(c) + " not divisible by norm_groups " +
                                  std::to_string(norm_groups));
    }
  }
  for (std::size_t b : blocks_per_stage) {
    if (b == 0) throw std::invalid_argument("backbone: every stage needs at least one block");
  }
  if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("backbone: in_channels must be 1 or 3");
  if (stem_stride == 0) throw std::invalid_argument("backbone: stem_stride must be positive");
  if (input_width == 0 || input_height == 0) throw std::invalid_argument("backbone: empty input size");
}

namespace {

// 3x3 convolution with padding 1.
std::size_t down(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

}  // namespace

std::pair<std::size_t, std::size_t> BackboneConfig::output_size() const {
  std::size_t w = down(input_width, stem_stride);
  std::size_t h = down(input_height, stem_stride);
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    w = down(w, 2);
    h = down(h, 2);
  }
  return {w, h};
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, const std::string& prefix, ParameterStore<T>& store,
                      std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in * k * k)));
    return store.add_uniform(prefix + name, Shape{out, in, k, k}, bound, rng);
  };
  const std::size_t c0 = config_.stage_channels.front();
  stem_conv_ = conv(".stem.conv", c0, config_.in_channels, 3);
  stem_gamma_ = store.add_constant(prefix + ".stem.gn.gamma", Shape{c0}, T(1));
  stem_beta_ = store.add(prefix + ".stem.gn.beta", Shape{c0});

  std::size_t in = c0;
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::size_t out = config_.stage_channels[s];
    for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
      const std::string p = prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
      ResidualBlock<T> blk;
      blk.stride = b == 0 ? 2 : 1;
      blk.conv_a = conv(p + ".conv_a", out, in, 3);
      blk.gn_a_gamma = store.add_constant(p + ".gn_a.gamma", Shape{out}, T(1));
      blk.gn_a_beta = store.add(p + ".gn_a.beta", Shape{out});
      blk.conv_b = conv(p + ".conv_b", out, out, 3);
      blk.gn_b_gamma = store.add_constant(p + ".gn_b.gamma", Shape{out}, config_.zero_init_residual ? T(0) : T(1));
      blk.gn_b_beta = store.add(p + ".gn_b.beta", Shape{out});
      if (blk.stride != 1 || in != out) blk.projection = conv(p + ".projection", out, in, 1);
      blocks_.push_back(blk);
      in = out;
    }
  }
  head_gamma_ = store.add_constant(prefix + ".head.gn.gamma", Shape{in}, T(1));
  head_beta_ = store.add(prefix + ".head.gn.beta", Shape{in});
}

template <typename T>
Tensor<T> Backbone<T>::residual_branch(const Tensor<T>& x, const ResidualBlock<T>& block) const {
  const std::size_t groups = config_.norm_groups;
  auto h = ops::conv2d(x, block.conv_a, block.stride, 1);
  h = ops::relu(ops::group_norm(h, groups, block.gn_a_gamma, block.gn_a_beta));
  h = ops::conv2d(h, block.conv_b, 1, 1);
  return ops::group_norm(h, groups, block.gn_b_gamma, block.gn_b_beta);
}

template <typename T>
Tensor<T> Backbone<T>::shortcut(const Tensor<T>& x, const ResidualBlock<T>& block) const {
  if (!block.projection.defined()) return x;
  return ops::conv2d(x, block.projection, block.stride, 0);
}

template <typename T>
Tensor<T> Backbone<T>::block_forward(const Tensor<T>& x, const ResidualBlock<T>& block) const {
  return ops::add(residual_branch(x, block), shortcut(x, block));
}

template <typename T>
FeatureMap<T> Backbone<T>::extract_features(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != config_.in_channels || image.dim(2) != config_.input_height ||
      image.dim(3) != config_.input_width) {
    throw ShapeError("extract_features: image " + to_string(image.shape()) + " does not match configured input (N, " +
                     std::to_string(config_.in_channels) + ", " + std::to_string(config_.input_height) + ", " +
                     std::to_string(config_.input_width) + ")");
  }
  auto x = ops::conv2d(image, stem_conv_, config_.stem_stride, 1);
  x = ops::relu(ops::group_norm(x, config_.norm_groups, stem_gamma_, stem_beta_));
  for (const auto& blk : blocks_) x = block_forward(x, blk);
  x = ops::relu(ops::group_norm(x, config_.norm_groups, head_gamma_, head_beta_));
  return FeatureMap<T>{x, config_.input_width, config_.input_height};
}

template <typename T>
Tensor<T> global_pool(const FeatureMap<T>& fm) {
  return ops::global_avg_pool(fm.tensor);
}

template class Backbone<float>;
template class Backbone<double>;
template Tensor<float> global_pool<float>(const FeatureMap<float>&);
template Tensor<double> global_pool<double>(const FeatureMap<double>&);

}  // namespace kiss
