#pragma once

// Raw numeric kernels behind the autodiff ops. Every kernel exists twice:
// kiss::kernels holds the OpenMP-parallel version used by the ops, and
// kiss::kernels::reference holds a plain serial loop nest kept as the test
// oracle and the benchmark baseline.
//
// The parallel kernels are deterministic for a fixed thread count: every output
// element is produced by exactly one thread in a fixed summation order, and
// cross-thread reductions combine per-thread partials in thread order.

#include <cstddef>

namespace kiss::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
};

struct SamplerGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t rois = 1;  // grids per image
  std::size_t out_h = 1;
  std::size_t out_w = 1;
};

/// C (M x N) = op(A) * op(B), or += when `accumulate`. Row-major, contiguous.
/// op(A) is M x K; when `trans_a` A is stored K x M. Likewise for B.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, T* output);

/// Either gradient pointer may be null to skip it. Gradients are accumulated.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_output, T* grad_input,
                     T* grad_weight);

/// Normalizes each (sample, group) slab, then applies per-channel gamma/beta.
/// `mean` and `rstd` receive batch * groups statistics.
template <typename T>
void group_norm_forward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups, T eps,
                        const T* input, const T* gamma, const T* beta, T* output, T* mean, T* rstd);

template <typename T>
void group_norm_backward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups,
                         const T* input, const T* gamma, const T* mean, const T* rstd, const T* grad_output,
                         T* grad_input, T* grad_gamma, T* grad_beta);

/// Bilinear sampling with zero padding. `grid` is (batch, rois, out_h, out_w, 2)
/// holding normalized (u, v); output is (batch * rois, channels, out_h, out_w).
template <typename T>
void grid_sample_forward(const SamplerGeometry& g, const T* image, const T* grid, T* output);

/// Accumulates into grad_image (may be null) and grad_grid (may be null).
template <typename T>
void grid_sample_backward(const SamplerGeometry& g, const T* image, const T* grid, const T* grad_output,
                          T* grad_image, T* grad_grid);

int max_threads();

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, T* output);

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_output, T* grad_input,
                     T* grad_weight);

template <typename T>
void group_norm_forward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups, T eps,
                        const T* input, const T* gamma, const T* beta, T* output, T* mean, T* rstd);

template <typename T>
void group_norm_backward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups,
                         const T* input, const T* gamma, const T* mean, const T* rstd, const T* grad_output,
                         T* grad_input, T* grad_gamma, T* grad_beta);

template <typename T>
void grid_sample_forward(const SamplerGeometry& g, const T* image, const T* grid, T* output);

template <typename T>
void grid_sample_backward(const SamplerGeometry& g, const T* image, const T* grid, const T* grad_output,
                          T* grad_image, T* grad_grid);

}  // namespace reference

}  // namespace kiss::kernels
