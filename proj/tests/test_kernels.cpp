#include <doctest.h>

#include <random>
#include <vector>

#include "helpers.hpp"
#include "kiss/kernels.hpp"

using namespace kiss::kernels;

namespace {

std::vector<float> rand_vec(std::size_t n, std::mt19937_64& rng, float lo = -1, float hi = 1) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double num = 0, den = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, double(std::abs(a[i] - b[i])));
    den = std::max(den, double(std::abs(b[i])));
  }
  return num / den;
}

}  // namespace

TEST_CASE("parallel gemm matches the serial reference") {
  std::mt19937_64 rng(1);
  for (bool ta : {false, true})
    for (bool tb : {false, true})
      for (bool acc : {false, true}) {
        const std::size_t m = 37, n = 29, k = 53;
        auto a = rand_vec(m * k, rng), b = rand_vec(k * n, rng), c0 = rand_vec(m * n, rng);
        auto c1 = c0, c2 = c0;
        gemm(ta, tb, m, n, k, a.data(), b.data(), c1.data(), acc);
        reference::gemm(ta, tb, m, n, k, a.data(), b.data(), c2.data(), acc);
        CHECK(rel_diff(c1, c2) < 1e-5);
      }
}

TEST_CASE("serial gemm agrees with a triple loop") {
  std::mt19937_64 rng(2);
  const std::size_t m = 5, n = 4, k = 3;
  auto a = rand_vec(k * m, rng), b = rand_vec(n * k, rng);
  std::vector<float> c(m * n);
  reference::gemm(true, true, m, n, k, a.data(), b.data(), c.data(), false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
      CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-6));
    }
}

TEST_CASE("parallel conv2d matches the serial reference") {
  std::mt19937_64 rng(3);
  for (std::size_t stride : {1, 2}) {
    ConvGeometry g;
    g.batch = 3;
    g.in_channels = 4;
    g.height = 11;
    g.width = 14;
    g.out_channels = 6;
    g.kernel_h = g.kernel_w = 3;
    g.stride = stride;
    g.padding = 1;
    const std::size_t out = g.batch * g.out_channels * g.out_h() * g.out_w();
    auto x = rand_vec(g.batch * g.in_channels * g.height * g.width, rng);
    auto w = rand_vec(g.out_channels * g.patch(), rng);
    std::vector<float> y1(out), y2(out);
    conv2d_forward(g, x.data(), w.data(), y1.data());
    reference::conv2d_forward(g, x.data(), w.data(), y2.data());
    CHECK(rel_diff(y1, y2) < 1e-5);

    auto gy = rand_vec(out, rng);
    std::vector<float> gx1(x.size()), gx2(x.size()), gw1(w.size()), gw2(w.size());
    conv2d_backward(g, x.data(), w.data(), gy.data(), gx1.data(), gw1.data());
    reference::conv2d_backward(g, x.data(), w.data(), gy.data(), gx2.data(), gw2.data());
    CHECK(rel_diff(gx1, gx2) < 1e-5);
    CHECK(rel_diff(gw1, gw2) < 1e-5);
  }
}

TEST_CASE("parallel group norm matches the serial reference") {
  std::mt19937_64 rng(4);
  const std::size_t n = 3, c = 8, hw = 35, groups = 4;
  auto x = rand_vec(n * c * hw, rng, -3, 5), gamma = rand_vec(c, rng), beta = rand_vec(c, rng);
  std::vector<float> y1(x.size()), y2(x.size()), m1(n * groups), m2(n * groups), r1(n * groups), r2(n * groups);
  group_norm_forward<float>(n, c, hw, groups, 1e-5f, x.data(), gamma.data(), beta.data(), y1.data(), m1.data(),
                            r1.data());
  reference::group_norm_forward<float>(n, c, hw, groups, 1e-5f, x.data(), gamma.data(), beta.data(), y2.data(),
                                       m2.data(), r2.data());
  CHECK(rel_diff(y1, y2) < 1e-5);
  CHECK(rel_diff(m1, m2) < 1e-5);
  auto gy = rand_vec(x.size(), rng);
  std::vector<float> gx1(x.size()), gx2(x.size()), gg1(c), gg2(c), gb1(c), gb2(c);
  group_norm_backward<float>(n, c, hw, groups, x.data(), gamma.data(), m1.data(), r1.data(), gy.data(), gx1.data(),
                             gg1.data(), gb1.data());
  reference::group_norm_backward<float>(n, c, hw, groups, x.data(), gamma.data(), m2.data(), r2.data(), gy.data(),
                                        gx2.data(), gg2.data(), gb2.data());
  CHECK(rel_diff(gx1, gx2) < 1e-4);
  CHECK(rel_diff(gg1, gg2) < 1e-5);
  CHECK(rel_diff(gb1, gb2) < 1e-5);
}

TEST_CASE("parallel grid sampling matches the serial reference") {
  std::mt19937_64 rng(5);
  SamplerGeometry g;
  g.batch = 2;
  g.channels = 2;
  g.height = 9;
  g.width = 13;
  g.rois = 3;
  g.out_h = 5;
  g.out_w = 4;
  auto img = rand_vec(g.batch * g.channels * g.height * g.width, rng, 0, 1);
  auto grid = rand_vec(g.batch * g.rois * g.out_h * g.out_w * 2, rng, -1.3f, 1.3f);
  const std::size_t out = g.batch * g.rois * g.channels * g.out_h * g.out_w;
  std::vector<float> y1(out), y2(out);
  grid_sample_forward(g, img.data(), grid.data(), y1.data());
  reference::grid_sample_forward(g, img.data(), grid.data(), y2.data());
  CHECK(rel_diff(y1, y2) < 1e-6);
  auto gy = rand_vec(out, rng);
  std::vector<float> gi1(img.size()), gi2(img.size()), gg1(grid.size()), gg2(grid.size());
  grid_sample_backward(g, img.data(), grid.data(), gy.data(), gi1.data(), gg1.data());
  reference::grid_sample_backward(g, img.data(), grid.data(), gy.data(), gi2.data(), gg2.data());
  CHECK(rel_diff(gi1, gi2) < 1e-5);
  CHECK(rel_diff(gg1, gg2) < 1e-5);
}

TEST_CASE("parallel kernels are run-to-run deterministic") {
  std::mt19937_64 rng(6);
  ConvGeometry g;
  g.batch = 4;
  g.in_channels = 3;
  g.height = g.width = 16;
  g.out_channels = 8;
  g.kernel_h = g.kernel_w = 3;
  g.padding = 1;
  auto x = rand_vec(4 * 3 * 16 * 16, rng), w = rand_vec(8 * 27, rng);
  auto gy = rand_vec(4 * 8 * 16 * 16, rng);
  std::vector<float> a(w.size()), b(w.size());
  conv2d_backward<float>(g, x.data(), w.data(), gy.data(), nullptr, a.data());
  conv2d_backward<float>(g, x.data(), w.data(), gy.data(), nullptr, b.data());
  CHECK(a == b);
  CHECK(max_threads() >= 1);
}
