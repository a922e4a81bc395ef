#pragma once

#include <random>
#include <string>
#include <vector>

#include "kiss/backbone.hpp"
#include "kiss/params.hpp"
#include "kiss/tensor.hpp"

namespace kiss {

struct LocalizerConfig {
  std::size_t n_rois = 23;
  std::size_t roi_width = 50;
  std::size_t roi_height = 64;
  std::size_t lstm_hidden = 256;
  double rotation_dropout = 0.05;
  /// Affine head weights and bias are drawn from U(-scale, scale).
  double head_init_scale = 0.1;
  /// "lstm"; "transformer" is reserved and rejected as unimplemented.
  std::string predictor = "lstm";

  void validate() const;
};

/// Per-image stack of N 2x3 matrices [[t1 t2 t3], [t4 t5 t6]].
template <typename T>
struct AffineParams {
  Tensor<T> theta;  // (B, N, 2, 3)
  std::size_t n_rois = 0;
};

template <typename T>
struct SamplingGrid {
  Tensor<T> coords;  // (B, N, h_o, w_o, 2), normalized (u, v)
  std::size_t out_w = 0;
  std::size_t out_h = 0;
};

template <typename T>
struct RoiBatch {
  Tensor<T> crops;        // (B * N, C, h_o, w_o)
  Tensor<T> reg_penalty;  // scalar: summed out-of-image penalty over the batch
  AffineParams<T> affine;
  SamplingGrid<T> grid;
};

/// Single-layer LSTM with gate order (input, forget, cell, output).
template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(std::size_t input, std::size_t hidden, const std::string& prefix, ParameterStore<T>& store,
       std::mt19937_64& rng);

  /// Runs `steps` timesteps feeding the same input x (B, input) at every step;
  /// returns the hidden state of each step, each (B, hidden).
  std::vector<Tensor<T>> run_constant_input(const Tensor<T>& x, std::size_t steps) const;

  std::size_t hidden() const { return hidden_; }

 private:
  std::size_t hidden_ = 0;
  Tensor<T> w_input_, w_hidden_, bias_;
};

/// Zeroes theta2 and theta4 of each (sample, step) with probability `rate`,
/// without rescaling. Identity unless `training`.
template <typename T>
Tensor<T> rotation_dropout(const Tensor<T>& theta, double rate, std::mt19937_64& rng, bool training);

template <typename T>
SamplingGrid<T> generate_grid(const AffineParams<T>& params, std::size_t out_w, std::size_t out_h);

template <typename T>
Tensor<T> out_of_image_penalty(const SamplingGrid<T>& grid);

/// Crops (B * N, C, h_o, w_o) sampled from `image` at the grid coordinates.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& image, const SamplingGrid<T>& grid);

/// Fixed matrices cutting the image into N equal-width vertical slices.
template <typename T>
AffineParams<T> uniform_slices(std::size_t batch, std::size_t n_rois);

/// Localization network: backbone, global pooling, recurrent affine predictor
/// and spatial transformer.
template <typename T>
class Localizer {
 public:
  Localizer() = default;
  Localizer(const LocalizerConfig& config, const BackboneConfig& backbone, ParameterStore<T>& store,
            std::mt19937_64& rng);

  const LocalizerConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }

  AffineParams<T> predict_affine(const Tensor<T>& features, bool training, std::mt19937_64& rng) const;
  RoiBatch<T> localize(const Tensor<T>& image, bool training, std::mt19937_64& rng) const;

 private:
  LocalizerConfig config_;
  Backbone<T> backbone_;
  Lstm<T> lstm_;
  Tensor<T> head_weight_, head_bias_;
};

}  // namespace kiss
