#pragma once

#include <random>
#include <string>
#include <vector>

#include "kiss/params.hpp"
#include "kiss/tensor.hpp"

namespace kiss {

struct BackboneConfig {
  std::vector<std::size_t> stage_channels{32, 64, 128};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2};
  std::size_t input_width = 200;
  std::size_t input_height = 64;
  std::size_t in_channels = 1;
  std::size_t norm_groups = 8;
  std::size_t stem_stride = 1;
  /// Start each block's last normalization scale at zero so blocks begin as
  /// their shortcut.
  bool zero_init_residual = false;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  /// Spatial size of the final feature map, as (width, height).
  std::pair<std::size_t, std::size_t> output_size() const;
  std::size_t output_channels() const { return stage_channels.back(); }
};

template <typename T>
struct FeatureMap {
  Tensor<T> tensor;  // (N, C, H', W')
  std::size_t source_width = 0;
  std::size_t source_height = 0;
};

/// Two 3x3 convolutions with group normalization on the residual branch; a
/// 1x1 projection shortcut whenever the block changes stride or width.
template <typename T>
struct ResidualBlock {
  std::size_t stride = 1;
  Tensor<T> conv_a, gn_a_gamma, gn_a_beta;
  Tensor<T> conv_b, gn_b_gamma, gn_b_beta;
  Tensor<T> projection;  // undefined for identity shortcuts
};

/// ResNet-style feature extractor with group normalization.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, const std::string& prefix, ParameterStore<T>& store, std::mt19937_64& rng);

  const BackboneConfig& config() const { return config_; }

  /// image (N, C, H, W) with H, W matching the config.
  FeatureMap<T> extract_features(const Tensor<T>& image) const;

  Tensor<T> residual_branch(const Tensor<T>& x, const ResidualBlock<T>& block) const;
  Tensor<T> shortcut(const Tensor<T>& x, const ResidualBlock<T>& block) const;
  Tensor<T> block_forward(const Tensor<T>& x, const ResidualBlock<T>& block) const;

  const std::vector<ResidualBlock<T>>& blocks() const { return blocks_; }

 private:
  BackboneConfig config_;
  Tensor<T> stem_conv_, stem_gamma_, stem_beta_;
  std::vector<ResidualBlock<T>> blocks_;
  Tensor<T> head_gamma_, head_beta_;
};

/// Spatial mean per channel: (N, C, H, W) -> (N, C).
template <typename T>
Tensor<T> global_pool(const FeatureMap<T>& fm);

}  // namespace kiss
