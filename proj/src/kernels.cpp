#include "kiss/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace kiss::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace {

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile) {
    for (std::size_t j0 = 0; j0 < cols; j0 += tile) {
      const std::size_t i1 = std::min(rows, i0 + tile);
      const std::size_t j1 = std::min(cols, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

// Register tile: kRows rows of C by kCols columns, accumulated over the full K.
template <typename T>
struct Tile {
  static constexpr std::size_t kRows = 4;
  static constexpr std::size_t kCols = 256 / sizeof(T);
};

template <typename T>
inline void tile_full(std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::size_t i, std::size_t j,
                      bool accumulate) {
  constexpr std::size_t R = Tile<T>::kRows;
  constexpr std::size_t C = Tile<T>::kCols;
  T acc[R][C];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t q = 0; q < C; ++q) acc[r][q] = accumulate ? c[(i + r) * n + j + q] : T(0);
  }
  const T* a0 = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n + j;
    const T x0 = a0[p];
    const T x1 = a0[k + p];
    const T x2 = a0[2 * k + p];
    const T x3 = a0[3 * k + p];
#pragma omp simd
    for (std::size_t q = 0; q < C; ++q) {
      const T bv = brow[q];
      acc[0][q] += x0 * bv;
      acc[1][q] += x1 * bv;
      acc[2][q] += x2 * bv;
      acc[3][q] += x3 * bv;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t q = 0; q < C; ++q) c[(i + r) * n + j + q] = acc[r][q];
  }
}

template <typename T>
inline void tile_edge(std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::size_t i, std::size_t rows,
                      std::size_t j, std::size_t cols, bool accumulate) {
  constexpr std::size_t C = Tile<T>::kCols;
  T acc[C];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < cols; ++q) acc[q] = accumulate ? c[(i + r) * n + j + q] : T(0);
    const T* arow = a + (i + r) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T x = arow[p];
      const T* brow = b + p * n + j;
#pragma omp simd
      for (std::size_t q = 0; q < cols; ++q) acc[q] += x * brow[q];
    }
    for (std::size_t q = 0; q < cols; ++q) c[(i + r) * n + j + q] = acc[q];
  }
}

// C = A * B with A (m x k) and B (k x n), both row-major.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  constexpr std::size_t R = Tile<T>::kRows;
  constexpr std::size_t C = Tile<T>::kCols;
  const std::size_t row_tiles = (m + R - 1) / R;
  const std::size_t col_tiles = (n + C - 1) / C;
  const long total = static_cast<long>(row_tiles * col_tiles);
#pragma omp parallel for schedule(static) if (total > 1 && !omp_in_parallel())
  for (long t = 0; t < total; ++t) {
    const std::size_t i = (static_cast<std::size_t>(t) / col_tiles) * R;
    const std::size_t j = (static_cast<std::size_t>(t) % col_tiles) * C;
    const std::size_t rows = std::min(R, m - i);
    const std::size_t cols = std::min(C, n - j);
    if (rows == R && cols == C) {
      tile_full(n, k, a, b, c, i, j, accumulate);
    } else {
      tile_edge(n, k, a, b, c, i, rows, j, cols, accumulate);
    }
  }
}

// C = A * B^T with A (m x k) and B (n x k): each entry is a contiguous dot product.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const long total = static_cast<long>(m * n);
#pragma omp parallel for schedule(static) if (total > 64 && !omp_in_parallel())
  for (long t = 0; t < total; ++t) {
    const std::size_t i = static_cast<std::size_t>(t) / n;
    const std::size_t j = static_cast<std::size_t>(t) % n;
    const T* arow = a + i * k;
    const T* brow = b + j * k;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
    c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const long H = static_cast<long>(g.height);
  const long W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding);
  const long stride = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* dst = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride + static_cast<long>(ky) - pad;
          T* drow = dst + y * ow;
          if (iy < 0 || iy >= H) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = plane + iy * W;
          const long base = static_cast<long>(kx) - pad;
          if (stride == 1) {
            for (std::size_t x = 0; x < ow; ++x) {
              const long ix = static_cast<long>(x) + base;
              drow[x] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
            }
          } else {
            for (std::size_t x = 0; x < ow; ++x) {
              const long ix = static_cast<long>(x) * stride + base;
              drow[x] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const long H = static_cast<long>(g.height);
  const long W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding);
  const long stride = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* src = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride + static_cast<long>(ky) - pad;
          if (iy < 0 || iy >= H) continue;
          T* drow = plane + iy * W;
          const T* srow = src + y * ow;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x) * stride + static_cast<long>(kx) - pad;
            if (ix >= 0 && ix < W) drow[ix] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  std::vector<T> packed_a;
  if (trans_a) {
    packed_a.resize(m * k);
    transpose(a, k, m, packed_a.data());
    a = packed_a.data();
  }
  if (trans_b) {
    gemm_nt(m, n, k, a, b, c, accumulate);
  } else {
    gemm_nn(m, n, k, a, b, c, accumulate);
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, T* output) {
  const std::size_t plane_out = g.out_h() * g.out_w();
  const std::size_t plane_in = g.in_channels * g.height * g.width;
  const bool pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
#pragma omp parallel if (g.batch > 1)
  {
    std::vector<T> col(pointwise ? 0 : g.patch() * plane_out);
#pragma omp for schedule(static)
    for (long b = 0; b < static_cast<long>(g.batch); ++b) {
      const T* x = input + static_cast<std::size_t>(b) * plane_in;
      const T* src = x;
      if (!pointwise) {
        im2col(g, x, col.data());
        src = col.data();
      }
      gemm_nn(g.out_channels, plane_out, g.patch(), weight, src,
              output + static_cast<std::size_t>(b) * g.out_channels * plane_out, false);
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_output, T* grad_input,
                     T* grad_weight) {
  const std::size_t plane_out = g.out_h() * g.out_w();
  const std::size_t plane_in = g.in_channels * g.height * g.width;
  const std::size_t patch = g.patch();
  const std::size_t wsize = g.out_channels * patch;

  std::vector<T> weight_t;
  if (grad_input) {
    weight_t.resize(wsize);
    transpose(weight, g.out_channels, patch, weight_t.data());
  }

  const int threads = (g.batch > 1) ? omp_get_max_threads() : 1;
  std::vector<std::vector<T>> partial(static_cast<std::size_t>(threads));

#pragma omp parallel num_threads(threads)
  {
    const int tid = omp_get_thread_num();
    std::vector<T> col(patch * plane_out);
    std::vector<T> dcol(grad_input ? patch * plane_out : 0);
    std::vector<T>& dw = partial[static_cast<std::size_t>(tid)];
    if (grad_weight) dw.assign(wsize, T(0));
#pragma omp for schedule(static)
    for (long b = 0; b < static_cast<long>(g.batch); ++b) {
      const T* x = input + static_cast<std::size_t>(b) * plane_in;
      const T* dy = grad_output + static_cast<std::size_t>(b) * g.out_channels * plane_out;
      if (grad_weight) {
        im2col(g, x, col.data());
        gemm_nt(g.out_channels, patch, plane_out, dy, col.data(), dw.data(), true);
      }
      if (grad_input) {
        gemm_nn(patch, plane_out, g.out_channels, weight_t.data(), dy, dcol.data(), false);
        col2im(g, dcol.data(), grad_input + static_cast<std::size_t>(b) * plane_in);
      }
    }
  }
  if (grad_weight) {
    for (const auto& dw : partial) {
      if (dw.empty()) continue;
      for (std::size_t i = 0; i < wsize; ++i) grad_weight[i] += dw[i];
    }
  }
}

template <typename T>
void group_norm_forward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups, T eps,
                        const T* input, const T* gamma, const T* beta, T* output, T* mean, T* rstd) {
  const std::size_t cpg = channels / groups;
  const std::size_t count = cpg * spatial;
  const long slabs = static_cast<long>(batch * groups);
#pragma omp parallel for schedule(static) if (slabs > 1)
  for (long s = 0; s < slabs; ++s) {
    const std::size_t b = static_cast<std::size_t>(s) / groups;
    const std::size_t g = static_cast<std::size_t>(s) % groups;
    const T* x = input + (b * channels + g * cpg) * spatial;
    // Accumulate in double so single-precision statistics stay accurate on large slabs.
    double sum = 0;
#pragma omp simd reduction(+ : sum)
    for (std::size_t i = 0; i < count; ++i) sum += static_cast<double>(x[i]);
    const double mu = sum / static_cast<double>(count);
    double sq = 0;
#pragma omp simd reduction(+ : sq)
    for (std::size_t i = 0; i < count; ++i) {
      const double d = static_cast<double>(x[i]) - mu;
      sq += d * d;
    }
    const double var = sq / static_cast<double>(count);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    const T m = static_cast<T>(mu);
    mean[s] = m;
    rstd[s] = r;
    for (std::size_t c = 0; c < cpg; ++c) {
      const std::size_t ch = g * cpg + c;
      const T scale = r * gamma[ch];
      const T shift = beta[ch] - m * scale;
      const T* xc = x + c * spatial;
      T* yc = output + (b * channels + ch) * spatial;
#pragma omp simd
      for (std::size_t i = 0; i < spatial; ++i) yc[i] = xc[i] * scale + shift;
    }
  }
}

template <typename T>
void group_norm_backward(std::size_t batch, std::size_t channels, std::size_t spatial, std::size_t groups,
                         const T* input, const T* gamma, const T* mean, const T* rstd, const T* grad_output,
                         T* grad_input, T* grad_gamma, T* grad_beta) {
  const std::size_t cpg = channels / groups;
  const T count = static_cast<T>(cpg * spatial);

  // Per-(sample, channel) sums of dy and dy * xhat; each entry owned by one thread.
  std::vector<T> sum_dy(batch * channels);
  std::vector<T> sum_dy_xhat(batch * channels);
  const long planes = static_cast<long>(batch * channels);
#pragma omp parallel for schedule(static) if (planes > 1)
  for (long p = 0; p < planes; ++p) {
    const std::size_t b = static_cast<std::size_t>(p) / channels;
    const std::size_t ch = static_cast<std::size_t>(p) % channels;
    const std::size_t s = b * groups + ch / cpg;
    const T m = mean[s];
    const T r = rstd[s];
    const T* x = input + static_cast<std::size_t>(p) * spatial;
    const T* dy = grad_output + static_cast<std::size_t>(p) * spatial;
    T a = 0;
    T bsum = 0;
#pragma omp simd reduction(+ : a, bsum)
    for (std::size_t i = 0; i < spatial; ++i) {
      a += dy[i];
      bsum += dy[i] * (x[i] - m) * r;
    }
    sum_dy[static_cast<std::size_t>(p)] = a;
    sum_dy_xhat[static_cast<std::size_t>(p)] = bsum;
  }

  if (grad_gamma || grad_beta) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t b = 0; b < batch; ++b) {
        if (grad_beta) grad_beta[ch] += sum_dy[b * channels + ch];
        if (grad_gamma) grad_gamma[ch] += sum_dy_xhat[b * channels + ch];
      }
    }
  }
  if (!grad_input) return;

  const long slabs = static_cast<long>(batch * groups);
#pragma omp parallel for schedule(static) if (slabs > 1)
  for (long s = 0; s < slabs; ++s) {
    const std::size_t b = static_cast<std::size_t>(s) / groups;
    const std::size_t g = static_cast<std::size_t>(s) % groups;
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (std::size_t c = 0; c < cpg; ++c) {
      const std::size_t ch = g * cpg + c;
      mean_dxhat += gamma[ch] * sum_dy[b * channels + ch];
      mean_dxhat_xhat += gamma[ch] * sum_dy_xhat[b * channels + ch];
    }
    mean_dxhat /= count;
    mean_dxhat_xhat /= count;
    const T m = mean[s];
    const T r = rstd[s];
    for (std::size_t c = 0; c < cpg; ++c) {
      const std::size_t ch = g * cpg + c;
      const std::size_t off = (b * channels + ch) * spatial;
      const T* x = input + off;
      const T* dy = grad_output + off;
      T* dx = grad_input + off;
      const T gm = gamma[ch];
#pragma omp simd
      for (std::size_t i = 0; i < spatial; ++i) {
        const T xhat = (x[i] - m) * r;
        dx[i] += r * (dy[i] * gm - mean_dxhat - xhat * mean_dxhat_xhat);
      }
    }
  }
}

namespace {

template <typename T>
inline void locate(T u, T v, long H, long W, long& x0, long& y0, T& fx, T& fy) {
  const T px = (u + 1) / 2 * static_cast<T>(W - 1);
  const T py = (v + 1) / 2 * static_cast<T>(H - 1);
  const T flx = std::floor(px);
  const T fly = std::floor(py);
  // Clamp far-away coordinates so the integer conversion stays defined; they
  // sample zeros either way.
  const T lo = T(-4);
  const T hix = static_cast<T>(W + 4);
  const T hiy = static_cast<T>(H + 4);
  x0 = static_cast<long>(std::clamp(flx, lo, hix));
  y0 = static_cast<long>(std::clamp(fly, lo, hiy));
  fx = px - flx;
  fy = py - fly;
}

template <typename T>
inline T fetch(const T* plane, long H, long W, long y, long x) {
  return (y >= 0 && x >= 0 && y < H && x < W) ? plane[y * W + x] : T(0);
}

}  // namespace

template <typename T>
void grid_sample_forward(const SamplerGeometry& g, const T* image, const T* grid, T* output) {
  const long H = static_cast<long>(g.height);
  const long W = static_cast<long>(g.width);
  const std::size_t plane = g.out_h * g.out_w;
  const long total = static_cast<long>(g.batch * g.rois);
#pragma omp parallel for schedule(static) if (total > 1)
  for (long roi = 0; roi < total; ++roi) {
    const std::size_t b = static_cast<std::size_t>(roi) / g.rois;
    const T* gr = grid + static_cast<std::size_t>(roi) * plane * 2;
    for (std::size_t p = 0; p < plane; ++p) {
      long x0, y0;
      T fx, fy;
      locate(gr[2 * p], gr[2 * p + 1], H, W, x0, y0, fx, fy);
      const T w00 = (1 - fx) * (1 - fy);
      const T w01 = fx * (1 - fy);
      const T w10 = (1 - fx) * fy;
      const T w11 = fx * fy;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const T* img = image + (b * g.channels + c) * g.height * g.width;
        output[(static_cast<std::size_t>(roi) * g.channels + c) * plane + p] =
            fetch(img, H, W, y0, x0) * w00 + fetch(img, H, W, y0, x0 + 1) * w01 + fetch(img, H, W, y0 + 1, x0) * w10 +
            fetch(img, H, W, y0 + 1, x0 + 1) * w11;
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
  const T sx = static_cast<T>(W - 1) / 2;
  const T sy = static_cast<T>(H - 1) / 2;

  if (grad_grid) {
    const long total = static_cast<long>(g.batch * g.rois);
#pragma omp parallel for schedule(static) if (total > 1)
    for (long roi = 0; roi < total; ++roi) {
      const std::size_t b = static_cast<std::size_t>(roi) / g.rois;
      const T* gr = grid + static_cast<std::size_t>(roi) * plane * 2;
      T* dg = grad_grid + static_cast<std::size_t>(roi) * plane * 2;
      for (std::size_t p = 0; p < plane; ++p) {
        long x0, y0;
        T fx, fy;
        locate(gr[2 * p], gr[2 * p + 1], H, W, x0, y0, fx, fy);
        T dpx = 0;
        T dpy = 0;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const T go = grad_output[(static_cast<std::size_t>(roi) * g.channels + c) * plane + p];
          const T* img = image + (b * g.channels + c) * g.height * g.width;
          const T i00 = fetch(img, H, W, y0, x0);
          const T i01 = fetch(img, H, W, y0, x0 + 1);
          const T i10 = fetch(img, H, W, y0 + 1, x0);
          const T i11 = fetch(img, H, W, y0 + 1, x0 + 1);
          dpx += go * ((i01 - i00) * (1 - fy) + (i11 - i10) * fy);
          dpy += go * ((i10 - i00) * (1 - fx) + (i11 - i01) * fx);
        }
        dg[2 * p] += dpx * sx;
        dg[2 * p + 1] += dpy * sy;
      }
    }
  }

  if (grad_image) {
    // One thread per source image so the scatter never races.
    const long images = static_cast<long>(g.batch);
#pragma omp parallel for schedule(static) if (images > 1)
    for (long b = 0; b < images; ++b) {
      for (std::size_t r = 0; r < g.rois; ++r) {
        const std::size_t roi = static_cast<std::size_t>(b) * g.rois + r;
        const T* gr = grid + roi * plane * 2;
        for (std::size_t p = 0; p < plane; ++p) {
          long x0, y0;
          T fx, fy;
          locate(gr[2 * p], gr[2 * p + 1], H, W, x0, y0, fx, fy);
          if (x0 + 1 < 0 || y0 + 1 < 0 || x0 >= W || y0 >= H) continue;
          const T w00 = (1 - fx) * (1 - fy);
          const T w01 = fx * (1 - fy);
          const T w10 = (1 - fx) * fy;
          const T w11 = fx * fy;
          for (std::size_t c = 0; c < g.channels; ++c) {
            const T go = grad_output[(roi * g.channels + c) * plane + p];
            T* gi = grad_image + (static_cast<std::size_t>(b) * g.channels + c) * g.height * g.width;
            const bool top = y0 >= 0;
            const bool bottom = y0 + 1 < H;
            const bool left = x0 >= 0;
            const bool right = x0 + 1 < W;
            if (top && left) gi[y0 * W + x0] += go * w00;
            if (top && right) gi[y0 * W + x0 + 1] += go * w01;
            if (bottom && left) gi[(y0 + 1) * W + x0] += go * w10;
            if (bottom && right) gi[(y0 + 1) * W + x0 + 1] += go * w11;
          }
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

}  // namespace kiss::kernels
