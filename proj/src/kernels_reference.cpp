#include <algorithm>
#include <cmath>
#include <vector>

#include "kiss/kernels.hpp"

namespace kiss::kernels::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          T acc = 0;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width)) continue;
                acc += input[((b * g.in_channels + c) * g.height + iy) * g.width + ix] *
                       weight[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
              }
            }
          }
          output[((b * g.out_channels + o) * oh + y) * ow + x] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_output, T* grad_input,
                     T* grad_weight) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const T go = grad_output[((b * g.out_channels + o) * oh + y) * ow + x];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width)) continue;
                const std::size_t in_idx = ((b * g.in_channels + c) * g.height + iy) * g.width + ix;
                const std::size_t w_idx = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                if (grad_input) grad_input[in_idx] += go * weight[w_idx];
                if (grad_weight) grad_weight[w_idx] += go * input[in_idx];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void group_norm_forward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups, T eps,
                        const T* input, const T* gamma, const T* beta, T* output, T* mean, T* rstd) {
  const std::size_t cpg = channels / groups;
  const std::size_t count = cpg * spatial;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* x = input + (b * channels + g * cpg) * spatial;
      double sum = 0;
      for (std::size_t i = 0; i < count; ++i) sum += x[i];
      const double mu = sum / static_cast<double>(count);
      double sq = 0;
      for (std::size_t i = 0; i < count; ++i) sq += (x[i] - mu) * (x[i] - mu);
      const double var = sq / static_cast<double>(count);
      const T r = static_cast<T>(1.0 / std::sqrt(var + eps));
      mean[b * groups + g] = static_cast<T>(mu);
      rstd[b * groups + g] = r;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = g * cpg + c;
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t idx = (b * channels + ch) * spatial + s;
          output[idx] = (input[idx] - static_cast<T>(mu)) * r * gamma[ch] + beta[ch];
        }
      }
    }
  }
}

template <typename T>
void group_norm_backward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups,
                         const T* input, const T* gamma, const T* mean, const T* rstd, const T* grad_output,
                         T* grad_input, T* grad_gamma, T* grad_beta) {
  const std::size_t cpg = channels / groups;
  const T count = static_cast<T>(cpg * spatial);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T mu = mean[b * groups + g];
      const T r = rstd[b * groups + g];
      T sum_dxhat = 0;
      T sum_dxhat_xhat = 0;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = g * cpg + c;
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t idx = (b * channels + ch) * spatial + s;
          const T xhat = (input[idx] - mu) * r;
          const T dy = grad_output[idx];
          if (grad_gamma) grad_gamma[ch] += dy * xhat;
          if (grad_beta) grad_beta[ch] += dy;
          sum_dxhat += dy * gamma[ch];
          sum_dxhat_xhat += dy * gamma[ch] * xhat;
        }
      }
      if (!grad_input) continue;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = g * cpg + c;
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t idx = (b * channels + ch) * spatial + s;
          const T xhat = (input[idx] - mu) * r;
          const T dxhat = grad_output[idx] * gamma[ch];
          grad_input[idx] += r * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count);
        }
      }
    }
  }
}

namespace {

template <typename T>
T pixel(const T* plane, long h, long w, long y, long x) {
  if (y < 0 || x < 0 || y >= h || x >= w) return T(0);
  return plane[y * w + x];
}

}  // namespace

template <typename T>
void grid_sample_forward(const SamplerGeometry& g, const T* image, const T* grid, T* output) {
  const long H = static_cast<long>(g.height);
  const long W = static_cast<long>(g.width);
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t r = 0; r < g.rois; ++r) {
      const std::size_t roi = b * g.rois + r;
      for (std::size_t p = 0; p < plane; ++p) {
        const T u = grid[(roi * plane + p) * 2];
        const T v = grid[(roi * plane + p) * 2 + 1];
        const T px = (u + 1) / 2 * static_cast<T>(W - 1);
        const T py = (v + 1) / 2 * static_cast<T>(H - 1);
        const T flx = std::floor(px);
        const T fly = std::floor(py);
        const long x0 = static_cast<long>(std::clamp(flx, T(-4), static_cast<T>(W + 4)));
        const long y0 = static_cast<long>(std::clamp(fly, T(-4), static_cast<T>(H + 4)));
        const T fx = px - flx;
        const T fy = py - fly;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const T* img = image + (b * g.channels + c) * g.height * g.width;
          const T val = pixel(img, H, W, y0, x0) * (1 - fx) * (1 - fy) + pixel(img, H, W, y0, x0 + 1) * fx * (1 - fy) +
                        pixel(img, H, W, y0 + 1, x0) * (1 - fx) * fy + pixel(img, H, W, y0 + 1, x0 + 1) * fx * fy;
          output[(roi * g.channels + c) * plane + p] = val;
        }
      }
    }
  }
}

template <typename T>
void grid_sample_backward(const SamplerGeometry& g, const T* image, const T* grid, const T* grad_output,
                          T* grad_image, T* grad_grid) {
  const long H = static_cast<long>(g.height);
  const long W = static_cast<long>(g.width);
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t r = 0; r < g.rois; ++r) {
      const std::size_t roi = b * g.rois + r;
      for (std::size_t p = 0; p < plane; ++p) {
        const T u = grid[(roi * plane + p) * 2];
        const T v = grid[(roi * plane + p) * 2 + 1];
        const T px = (u + 1) / 2 * static_cast<T>(W - 1);
        const T py = (v + 1) / 2 * static_cast<T>(H - 1);
        const T flx = std::floor(px);
        const T fly = std::floor(py);
        const long x0 = static_cast<long>(std::clamp(flx, T(-4), static_cast<T>(W + 4)));
        const long y0 = static_cast<long>(std::clamp(fly, T(-4), static_cast<T>(H + 4)));
        const T fx = px - flx;
        const T fy = py - fly;
        T dpx = 0;
        T dpy = 0;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const T go = grad_output[(roi * g.channels + c) * plane + p];
          const T* img = image + (b * g.channels + c) * g.height * g.width;
          const T i00 = pixel(img, H, W, y0, x0);
          const T i01 = pixel(img, H, W, y0, x0 + 1);
          const T i10 = pixel(img, H, W, y0 + 1, x0);
          const T i11 = pixel(img, H, W, y0 + 1, x0 + 1);
          dpx += go * ((i01 - i00) * (1 - fy) + (i11 - i10) * fy);
          dpy += go * ((i10 - i00) * (1 - fx) + (i11 - i01) * fx);
          if (grad_image) {
            T* gi = grad_image + (b * g.channels + c) * g.height * g.width;
            auto scatter = [&](long y, long x, T w) {
              if (y >= 0 && x >= 0 && y < H && x < W) gi[y * W + x] += go * w;
            };
            scatter(y0, x0, (1 - fx) * (1 - fy));
            scatter(y0, x0 + 1, fx * (1 - fy));
            scatter(y0 + 1, x0, (1 - fx) * fy);
            scatter(y0 + 1, x0 + 1, fx * fy);
          }
        }
        if (grad_grid) {
          grad_grid[(roi * plane + p) * 2] += dpx * static_cast<T>(W - 1) / 2;
          grad_grid[(roi * plane + p) * 2 + 1] += dpy * static_cast<T>(H - 1) / 2;
        }
      }
    }
  }
}

#define KISS_INSTANTIATE(T)                                                                                          \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);             \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, T*);                                      \
  template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*);                       \
  template void group_norm_forward<T>(std::size_t, std::size_t, std::size_t, std::size_t, T, const T*, const T*,     \
                                      const T*, T*, T*, T*);                                                         \
  template void group_norm_backward<T>(std::size_t, std::size_t, std::size_t, std::size_t, const T*, const T*,       \
                                       const T*, const T*, const T*, T*, T*, T*);                                    \
  template void grid_sample_forward<T>(const SamplerGeometry&, const T*, const T*, T*);                              \
  template void grid_sample_backward<T>(const SamplerGeometry&, const T*, const T*, const T*, T*, T*);

KISS_INSTANTIATE(float)
KISS_INSTANTIATE(double)
#undef KISS_INSTANTIATE

}  // namespace kiss::kernels::reference
