#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "kiss/tensor.hpp"

// Differentiable operations. Every op computes its value eagerly and, when a
// tape is active and an input requires a gradient, records a backward rule.
namespace kiss::ops {

// Elementwise with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);

/// (M,K)x(K,N); (...,M,K)x(K,N) with leading dims flattened; or batched
/// (...,M,K)x(...,K,N) with identical leading dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x (..., in) times weight (in, out) plus optional bias (out).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order);
template <typename T> Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim = false);

/// Row gather: ids (shape `ids_shape`) index rows of table (V, D).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, const Shape& ids_shape);

/// Inverted dropout. Identity when !training or rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng, bool training);

/// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);

/// Normalization over the last axis with per-feature gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// input (N,C,H,W), weight (O,C,kH,kW), no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Spatial mean: (N,C,H,W) -> (N,C).
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& input);

/// Mean negative log-likelihood over positions whose target is not `ignore_index`.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_index = -1);

/// theta (B,N,2,3) -> grid (B,N,out_h,out_w,2) of (u, v) = A * (x, y, 1).
template <typename T> Tensor<T> affine_grid(const Tensor<T>& theta, std::size_t out_w, std::size_t out_h);

/// image (B,C,H,W), grid (B,N,h,w,2) -> crops (B*N,C,h,w); zero outside the image.
template <typename T> Tensor<T> grid_sample(const Tensor<T>& image, const Tensor<T>& grid);

/// Sum over every coordinate c of |min(c + 1, 0)| + max(c - 1, 0).
template <typename T> Tensor<T> out_of_image_penalty(const Tensor<T>& grid);

}  // namespace kiss::ops
