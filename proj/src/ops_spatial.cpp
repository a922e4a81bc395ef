#include <cmath>

#include "kiss/kernels.hpp"
#include "kiss/ops.hpp"
#include "ops_internal.hpp"

namespace kiss::ops {

using internal::NodePtr;

namespace {

// Evenly spaced base coordinate in [-1, 1].
template <typename T>
T base_coord(std::size_t i, std::size_t count) {
  return T(-1) + T(2) * static_cast<T>(i) / static_cast<T>(count - 1);
}

}  // namespace

template <typename T>
Tensor<T> affine_grid(const Tensor<T>& theta, std::size_t out_w, std::size_t out_h) {
  constexpr std::string_view op = "affine_grid";
  internal::require_defined(op, theta);
  detail::check_finite(op, theta);
  if (theta.rank() != 4 || theta.dim(2) != 2 || theta.dim(3) != 3) {
    internal::shape_error(op, "theta must be (B, N, 2, 3), got " + to_string(theta.shape()));
  }
  if (out_w < 2 || out_h < 2) internal::shape_error(op, "output grid must be at least 2x2");
  const std::size_t batch = theta.dim(0);
  const std::size_t rois = theta.dim(1);
  const std::size_t plane = out_w * out_h;
  std::vector<T> out(batch * rois * plane * 2);
  const T* th = theta.data().data();
  for (std::size_t r = 0; r < batch * rois; ++r) {
    const T* a = th + r * 6;
    T* dst = out.data() + r * plane * 2;
    for (std::size_t j = 0; j < out_h; ++j) {
      const T y = base_coord<T>(j, out_h);
      for (std::size_t i = 0; i < out_w; ++i) {
        const T x = base_coord<T>(i, out_w);
        const std::size_t p = j * out_w + i;
        dst[2 * p] = a[0] * x + a[1] * y + a[2];
        dst[2 * p + 1] = a[3] * x + a[4] * y + a[5];
      }
    }
  }
  Tensor<T> result(Shape{batch, rois, out_h, out_w, 2}, std::move(out));
  NodePtr<T> tn = theta.node();
  detail::attach<T>(op, {&theta}, result, [=, on = result.node()] {
    for (std::size_t r = 0; r < batch * rois; ++r) {
      T* da = tn->grad.data() + r * 6;
      const T* g = on->grad.data() + r * plane * 2;
      for (std::size_t j = 0; j < out_h; ++j) {
        const T y = base_coord<T>(j, out_h);
        for (std::size_t i = 0; i < out_w; ++i) {
          const T x = base_coord<T>(i, out_w);
          const std::size_t p = j * out_w + i;
          const T gu = g[2 * p];
          const T gv = g[2 * p + 1];
          da[0] += gu * x;
          da[1] += gu * y;
          da[2] += gu;
          da[3] += gv * x;
          da[4] += gv * y;
          da[5] += gv;
        }
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> grid_sample(const Tensor<T>& image, const Tensor<T>& grid) {
  constexpr std::string_view op = "grid_sample";
  internal::require_defined(op, image);
  internal::require_defined(op, grid);
  detail::check_finite(op, image);
  detail::check_finite(op, grid);
  if (image.rank() != 4) internal::shape_error(op, "image must be (B, C, H, W), got " + to_string(image.shape()));
  if (grid.rank() != 5 || grid.dim(4) != 2) {
    internal::shape_error(op, "grid must be (B, N, h, w, 2), got " + to_string(grid.shape()));
  }
  if (grid.dim(0) != image.dim(0)) internal::shape_mismatch(op, image.shape(), grid.shape());
  kernels::SamplerGeometry g;
  g.batch = image.dim(0);
  g.channels = image.dim(1);
  g.height = image.dim(2);
  g.width = image.dim(3);
  g.rois = grid.dim(1);
  g.out_h = grid.dim(2);
  g.out_w = grid.dim(3);
  std::vector<T> out(g.batch * g.rois * g.channels * g.out_h * g.out_w);
  kernels::grid_sample_forward(g, image.data().data(), grid.data().data(), out.data());
  Tensor<T> result(Shape{g.batch * g.rois, g.channels, g.out_h, g.out_w}, std::move(out));
  NodePtr<T> in = image.node();
  NodePtr<T> gn = grid.node();
  detail::attach<T>(op, {&image, &grid}, result, [=, on = result.node()] {
    kernels::grid_sample_backward(g, in->value.data(), gn->value.data(), on->grad.data(),
                                  in->requires_grad ? in->grad.data() : nullptr,
                                  gn->requires_grad ? gn->grad.data() : nullptr);
  });
  return result;
}

template <typename T>
Tensor<T> out_of_image_penalty(const Tensor<T>& grid) {
  constexpr std::string_view op = "out_of_image_penalty";
  internal::require_defined(op, grid);
  detail::check_finite(op, grid);
  T total = 0;
  for (T c : grid.data()) total += std::abs(std::min(c + T(1), T(0))) + std::max(c - T(1), T(0));
  Tensor<T> result = Tensor<T>::scalar(total);
  NodePtr<T> gn = grid.node();
  detail::attach<T>(op, {&grid}, result, [gn, on = result.node()] {
    const T g = on->grad[0];
    for (std::size_t i = 0; i < gn->value.size(); ++i) {
      const T c = gn->value[i];
      if (c < T(-1)) {
        gn->grad[i] -= g;
      } else if (c > T(1)) {
        gn->grad[i] += g;
      }
    }
  });
  return result;
}

#define KISS_SPATIAL_OPS(T)                                                            \
  template Tensor<T> affine_grid<T>(const Tensor<T>&, std::size_t, std::size_t);       \
  template Tensor<T> grid_sample<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> out_of_image_penalty<T>(const Tensor<T>&);

KISS_INSTANTIATE_FLOATING(KISS_SPATIAL_OPS)

}  // namespace kiss::ops
