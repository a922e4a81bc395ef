#include <algorithm>
#include <cmath>

#include "kiss/kernels.hpp"
#include "kiss/ops.hpp"
#include "ops_internal.hpp"

namespace kiss::ops {

using internal::NodePtr;

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng, bool training) {
  constexpr std::string_view op = "dropout";
  internal::require_defined(op, a);
  if (rate < 0.0 || rate > 1.0) throw NumericError("dropout: rate " + std::to_string(rate) + " outside [0, 1]");
  if (!training || rate == 0.0) return a;
  auto mask = std::make_shared<std::vector<T>>(a.numel());
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = rate < 1.0 ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  for (auto& m : *mask) m = keep(rng) ? scale : T(0);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * (*mask)[i];
  Tensor<T> result(a.shape(), std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, mask, on = result.node()] {
    for (std::size_t i = 0; i < mask->size(); ++i) an->grad[i] += on->grad[i] * (*mask)[i];
  });
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  constexpr std::string_view op = "softmax";
  internal::require_defined(op, a);
  detail::check_finite(op, a);
  if (a.rank() == 0) internal::shape_error(op, "scalar input");
  const std::size_t width = a.dim(-1);
  const std::size_t rows = a.numel() / width;
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    T* yr = out.data() + r * width;
    const T mx = *std::max_element(xr, xr + width);
    T s = 0;
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < width; ++j) yr[j] *= inv;
  }
  Tensor<T> result(a.shape(), std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [=, on = result.node()] {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = on->value.data() + r * width;
      const T* g = on->grad.data() + r * width;
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
      T* dx = an->grad.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  constexpr std::string_view op = "layer_norm";
  internal::require_defined(op, x);
  detail::check_finite(op, x);
  const std::size_t width = x.dim(-1);
  if (gamma.numel() != width || beta.numel() != width) internal::shape_mismatch(op, x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / width;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(width);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  NodePtr<T> xn = x.node();
  NodePtr<T> gn = gamma.node();
  NodePtr<T> bn = beta.node();
  detail::attach<T>(op, {&x, &gamma, &beta}, result, [=, on = result.node()] {
    const T inv_w = T(1) / static_cast<T>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = on->grad.data() + r * width;
      const T* h = xhat->data() + r * width;
      T sum_d = 0;
      T sum_dh = 0;
      for (std::size_t j = 0; j < width; ++j) {
        const T d = g[j] * gn->value[j];
        sum_d += d;
        sum_dh += d * h[j];
        if (gn->requires_grad) gn->grad[j] += g[j] * h[j];
        if (bn->requires_grad) bn->grad[j] += g[j];
      }
      if (!xn->requires_grad) continue;
      T* dx = xn->grad.data() + r * width;
      const T rs = (*rstd)[r];
      for (std::size_t j = 0; j < width; ++j) {
        const T d = g[j] * gn->value[j];
        dx[j] += rs * (d - sum_d * inv_w - h[j] * sum_dh * inv_w);
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding) {
  constexpr std::string_view op = "conv2d";
  internal::require_defined(op, input);
  internal::require_defined(op, weight);
  detail::check_finite(op, input);
  if (input.rank() != 4 || weight.rank() != 4) internal::shape_mismatch(op, input.shape(), weight.shape());
  if (input.dim(1) != weight.dim(1)) {
    internal::shape_error(op, "incompatible channel count: input " + to_string(input.shape()) + " weight " +
                                  to_string(weight.shape()));
  }
  if (stride == 0) internal::shape_error(op, "stride must be positive");
  kernels::ConvGeometry g;
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding) {
    internal::shape_error(op, "zero-size output: kernel " + to_string(weight.shape()) + " does not fit input " +
                                  to_string(input.shape()) + " with padding " + std::to_string(padding));
  }
  Shape out_shape{g.batch, g.out_channels, g.out_h(), g.out_w()};
  std::vector<T> out(numel(out_shape));
  kernels::conv2d_forward(g, input.data().data(), weight.data().data(), out.data());
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> in = input.node();
  NodePtr<T> wn = weight.node();
  detail::attach<T>(op, {&input, &weight}, result, [=, on = result.node()] {
    kernels::conv2d_backward(g, in->value.data(), wn->value.data(), on->grad.data(),
                             in->requires_grad ? in->grad.data() : nullptr,
                             wn->requires_grad ? wn->grad.data() : nullptr);
  });
  return result;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  constexpr std::string_view op = "group_norm";
  internal::require_defined(op, input);
  detail::check_finite(op, input);
  if (input.rank() != 4) internal::shape_error(op, "expected NCHW input, got " + to_string(input.shape()));
  const std::size_t batch = input.dim(0);
  const std::size_t channels = input.dim(1);
  const std::size_t spatial = input.dim(2) * input.dim(3);
  if (groups == 0 || channels % groups != 0) {
    internal::shape_error(op, "channels " + std::to_string(channels) + " not divisible by groups " +
                                  std::to_string(groups));
  }
  if (!(eps > T(0))) throw NumericError("group_norm: eps must be positive");
  if (gamma.numel() != channels || beta.numel() != channels) {
    internal::shape_mismatch(op, input.shape(), gamma.shape());
  }
  auto mean = std::make_shared<std::vector<T>>(batch * groups);
  auto rstd = std::make_shared<std::vector<T>>(batch * groups);
  std::vector<T> out(input.numel());
  kernels::group_norm_forward(batch, channels, spatial, groups, eps, input.data().data(), gamma.data().data(),
                              beta.data().data(), out.data(), mean->data(), rstd->data());
  Tensor<T> result(input.shape(), std::move(out));
  NodePtr<T> xn = input.node();
  NodePtr<T> gn = gamma.node();
  NodePtr<T> bn = beta.node();
  detail::attach<T>(op, {&input, &gamma, &beta}, result, [=, on = result.node()] {
    kernels::group_norm_backward(batch, channels, spatial, groups, xn->value.data(), gn->value.data(), mean->data(),
                                 rstd->data(), on->grad.data(), xn->requires_grad ? xn->grad.data() : nullptr,
                                 gn->requires_grad ? gn->grad.data() : nullptr,
                                 bn->requires_grad ? bn->grad.data() : nullptr);
  });
  return result;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  constexpr std::string_view op = "global_avg_pool";
  internal::require_defined(op, input);
  if (input.rank() != 4) internal::shape_error(op, "expected NCHW input, got " + to_string(input.shape()));
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t spatial = input.dim(2) * input.dim(3);
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* x = input.data().data() + p * spatial;
    T acc = 0;
    for (std::size_t i = 0; i < spatial; ++i) acc += x[i];
    out[p] = acc / static_cast<T>(spatial);
  }
  Tensor<T> result(Shape{input.dim(0), input.dim(1)}, std::move(out));
  NodePtr<T> xn = input.node();
  detail::attach<T>(op, {&input}, result, [=, on = result.node()] {
    const T inv = T(1) / static_cast<T>(spatial);
    for (std::size_t p = 0; p < planes; ++p) {
      const T g = on->grad[p] * inv;
      T* dx = xn->grad.data() + p * spatial;
      for (std::size_t i = 0; i < spatial; ++i) dx[i] += g;
    }
  });
  return result;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_index) {
  constexpr std::string_view op = "softmax_cross_entropy";
  internal::require_defined(op, logits);
  detail::check_finite(op, logits);
  if (logits.rank() != 2) internal::shape_error(op, "expected (B, C) logits, got " + to_string(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (targets.size() != rows) {
    internal::shape_error(op, std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw NumericError("softmax_cross_entropy: target index " + std::to_string(t) + " outside [0, " +
                         std::to_string(classes) + ")");
    }
    ++count;
  }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data().data() + r * classes;
    T* p = probs->data() + r * classes;
    const T mx = *std::max_element(x, x + classes);
    T s = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(x[c] - mx);
      s += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= s;
    const int t = (*tgt)[r];
    if (t == ignore_index) continue;
    total += -(x[t] - mx - std::log(s));
  }
  const T denom = count > 0 ? static_cast<T>(count) : T(1);
  Tensor<T> result = Tensor<T>::scalar(total / denom);
  NodePtr<T> ln = logits.node();
  detail::attach<T>(op, {&logits}, result, [=, on = result.node()] {
    const T g = on->grad[0] / denom;
    for (std::size_t r = 0; r < rows; ++r) {
      const int t = (*tgt)[r];
      if (t == ignore_index) continue;
      const T* p = probs->data() + r * classes;
      T* dx = ln->grad.data() + r * classes;
      for (std::size_t c = 0; c < classes; ++c) dx[c] += g * p[c];
      dx[t] -= g;
    }
  });
  return result;
}

#define KISS_NN_OPS(T)                                                                                     \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, std::mt19937_64&, bool);                         \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> group_norm<T>(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                 \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>, int);

KISS_INSTANTIATE_FLOATING(KISS_NN_OPS)

}  // namespace kiss::ops
