#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "kiss/gradcheck.hpp"
#include "kiss/localizer.hpp"
#include "kiss/ops.hpp"

using namespace kiss;
using kiss::test::max_abs_diff;
using kiss::test::random_tensor;
using TD = Tensor<double>;

namespace {

AffineParams<double> single(std::vector<double> a) { return {TD({1, 1, 2, 3}, std::move(a)), 1}; }

// Base grid coordinate of column i out of n, spanning [-1, 1].
double base(std::size_t i, std::size_t n) { return -1.0 + 2.0 * double(i) / double(n - 1); }

}  // namespace

TEST_CASE("generate_grid maps the base grid through the affine matrix") {
  const std::size_t w = 5, h = 4;
  SUBCASE("identity") {
    auto g = generate_grid(single({1, 0, 0, 0, 1, 0}), w, h);
    CHECK(g.coords.shape() == Shape{1, 1, h, w, 2});
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < w; ++i) {
        CHECK(g.coords.at({0, 0, j, i, 0}) == base(i, w));
        CHECK(g.coords.at({0, 0, j, i, 1}) == base(j, h));
      }
    CHECK(g.coords.at({0, 0, 0, 0, 0}) == -1.0);
    CHECK(g.coords.at({0, 0, h - 1, w - 1, 1}) == 1.0);
  }
  SUBCASE("translation") {
    auto g = generate_grid(single({1, 0, 0.5, 0, 1, 0}), w, h);
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < w; ++i) {
        CHECK(g.coords.at({0, 0, j, i, 0}) == doctest::Approx(base(i, w) + 0.5).epsilon(1e-15));
        CHECK(g.coords.at({0, 0, j, i, 1}) == base(j, h));
      }
  }
  SUBCASE("scale") {
    auto g = generate_grid(single({0.5, 0, 0, 0, 0.5, 0}), w, h);
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < w; ++i) {
        CHECK(g.coords.at({0, 0, j, i, 0}) == 0.5 * base(i, w));
        CHECK(g.coords.at({0, 0, j, i, 1}) == 0.5 * base(j, h));
      }
  }
  SUBCASE("composition of two affine maps equals the composed matrix") {
    const double a[6] = {0.8, 0.1, -0.2, -0.3, 1.1, 0.4};
    const double b[6] = {1.2, -0.4, 0.3, 0.2, 0.7, -0.1};
    // b after a, as 3x3 homogeneous matrices.
    std::vector<double> c(6);
    for (int r = 0; r < 2; ++r) {
      c[r * 3 + 0] = b[r * 3 + 0] * a[0] + b[r * 3 + 1] * a[3];
      c[r * 3 + 1] = b[r * 3 + 0] * a[1] + b[r * 3 + 1] * a[4];
      c[r * 3 + 2] = b[r * 3 + 0] * a[2] + b[r * 3 + 1] * a[5] + b[r * 3 + 2];
    }
    auto ga = generate_grid(single(std::vector<double>(a, a + 6)), w, h);
    auto gc = generate_grid(single(c), w, h);
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < w; ++i) {
        const double u = ga.coords.at({0, 0, j, i, 0}), v = ga.coords.at({0, 0, j, i, 1});
        CHECK(std::abs(b[0] * u + b[1] * v + b[2] - gc.coords.at({0, 0, j, i, 0})) < 1e-12);
        CHECK(std::abs(b[3] * u + b[4] * v + b[5] - gc.coords.at({0, 0, j, i, 1})) < 1e-12);
      }
  }
}

TEST_CASE("out-of-image penalty") {
  auto penalty_of = [](std::vector<double> coords) {
    const std::size_t n = coords.size() / 2;
    SamplingGrid<double> g{TD({1, 1, 1, n, 2}, std::move(coords)), n, 1};
    return out_of_image_penalty(g);
  };
  CHECK(penalty_of({-1, 1, 0.3, -0.99, 1, -1}).item() == 0.0);
  CHECK(penalty_of({1.5, 0.0}).item() == 0.5);
  CHECK(penalty_of({0.0, -1.25}).item() == 0.25);
  CHECK(penalty_of({1.5, -1.25, 3.0, 0.0}).item() == 2.75);

  SUBCASE("zero exactly when every coordinate is inside") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      auto c = random_tensor<double>({8}, rng, -1.2, 1.2);
      bool inside = true;
      for (double v : c.data()) inside &= v >= -1.0 && v <= 1.0;
      const double p = penalty_of(kiss::test::to_vector<double>(c.data())).item();
      CHECK((p == 0.0) == inside);
    }
  }
  SUBCASE("subgradient has magnitude one outside the bounds and zero inside") {
    Tape<double> tape;
    ActiveTape<double> scope(tape);
    SamplingGrid<double> g{TD({1, 1, 1, 3, 2}, {1.5, -1.25, 0.2, -0.7, 2.0, -3.0}, true), 3, 1};
    tape.backward(out_of_image_penalty(g));
    const std::vector<double> expect{1, -1, 0, 0, 1, -1};
    for (std::size_t i = 0; i < 6; ++i) CHECK(g.coords.grad()[i] == expect[i]);
  }
}

TEST_CASE("bilinear sampler") {
  std::mt19937_64 rng(5);
  SUBCASE("identity grid at the image size reproduces the image") {
    auto img = random_tensor<double>({2, 1, 7, 9}, rng, 0, 1);
    AffineParams<double> id{TD({2, 1, 2, 3}, {1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0}), 1};
    auto out = bilinear_sample(img, generate_grid(id, 9, 7));
    CHECK(out.shape() == img.shape());
    CHECK(max_abs_diff(out.data(), img.data()) < 1e-6);
  }
  SUBCASE("a point halfway between 0 and 1 reads 0.5") {
    TD img({1, 1, 1, 2}, {0.0, 1.0});
    // pixel x = 0.5 of a 2-wide image is u = 0; v is free for a single row.
    SamplingGrid<double> g{TD({1, 1, 1, 1, 2}, {0.0, -1.0}), 1, 1};
    CHECK(bilinear_sample(img, g).item() == 0.5);
  }
  SUBCASE("points a pixel or more outside read zero") {
    auto img = TD::full({1, 1, 4, 4}, 1.0);
    const double step = 2.0 / 3.0;
    SamplingGrid<double> g{TD({1, 1, 1, 4, 2}, {-1 - step, 0, 1 + step, 0, 0, 1 + 1.5 * step, 0, -1 - 4 * step}), 4, 1};
    const auto out = bilinear_sample(img, g);
    for (double v : out.data()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("outputs lie within the source range or are zero") {
    auto img = random_tensor<double>({1, 1, 6, 6}, rng, 0.2, 0.9);
    auto coords = random_tensor<double>({1, 2, 5, 5, 2}, rng, -1.6, 1.6);
    const auto any = bilinear_sample(img, SamplingGrid<double>{coords, 5, 5});
    for (double v : any.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 0.9);
    }
    auto inside = random_tensor<double>({1, 2, 5, 5, 2}, rng, -1, 1);
    const auto within = bilinear_sample(img, SamplingGrid<double>{inside, 5, 5});
    for (double v : within.data()) {
      CHECK(v >= 0.2 - 1e-12);
      CHECK(v <= 0.9 + 1e-12);
    }
  }
  SUBCASE("matches the hat-function sum over every pixel") {
    auto img = random_tensor<double>({1, 1, 5, 6}, rng);
    auto coords = random_tensor<double>({1, 1, 3, 4, 2}, rng, -1.3, 1.3);
    auto out = bilinear_sample(img, SamplingGrid<double>{coords, 4, 3});
    for (std::size_t k = 0; k < 12; ++k) {
      const double px = (coords.data()[2 * k] + 1) / 2 * 5, py = (coords.data()[2 * k + 1] + 1) / 2 * 4;
      double s = 0;
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 6; ++x)
          s += img.at({0, 0, y, x}) * std::max(0.0, 1 - std::abs(px - double(x))) *
               std::max(0.0, 1 - std::abs(py - double(y)));
      CHECK(std::abs(out.data()[k] - s) < 1e-12);
    }
  }
}

TEST_CASE("gradient through grid generation and sampling") {
  std::mt19937_64 rng(21);
  auto img = random_tensor<double>({1, 1, 5, 5}, rng, 0, 1);
  // A map that keeps sample points off integer pixel positions.
  TD theta({1, 1, 2, 3}, {0.61, 0.07, 0.033, -0.05, 0.57, 0.021});
  auto f = [](const std::vector<TD>& in) {
    auto grid = generate_grid(AffineParams<double>{in[1], 1}, 4, 4);
    return std::vector<TD>{bilinear_sample(in[0], grid)};
  };
  GradCheckOptions o;
  o.step = 1e-6;
  auto r = check_gradient("sampler", 1e-3, f, {img, theta}, o);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("only the LSTM predictor exists") {
  LocalizerConfig c;
  CHECK_NOTHROW(c.validate());
  c.predictor = "transformer";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("not implemented"), std::invalid_argument);
  c.predictor = "gru";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("rotation dropout") {
  std::mt19937_64 rng(1);
  auto theta = random_tensor<double>({3, 4, 2, 3}, rng);
  SUBCASE("rate 1 zeroes theta2 and theta4 only") {
    auto d = rotation_dropout(theta, 1.0, rng, true);
    for (std::size_t m = 0; m < 12; ++m)
      for (std::size_t k = 0; k < 6; ++k) {
        const double expect = (k == 1 || k == 3) ? 0.0 : theta.data()[m * 6 + k];
        CHECK(d.data()[m * 6 + k] == expect);
      }
  }
  SUBCASE("eval mode never alters theta") {
    auto d = rotation_dropout(theta, 0.5, rng, false);
    CHECK(max_abs_diff(d.data(), theta.data()) == 0.0);
  }
  SUBCASE("rate 0 does not depend on the rng") {
    std::mt19937_64 r1(1), r2(999);
    auto a = rotation_dropout(theta, 0.0, r1, true);
    auto b = rotation_dropout(theta, 0.0, r2, true);
    CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
  }
  SUBCASE("both rotation terms drop together") {
    auto d = rotation_dropout(theta, 0.5, rng, true);
    for (std::size_t m = 0; m < 12; ++m) CHECK((d.data()[m * 6 + 1] == 0.0) == (d.data()[m * 6 + 3] == 0.0));
  }
}

namespace {

LocalizerConfig small_localizer() {
  LocalizerConfig c;
  c.n_rois = 23;
  c.roi_width = 50;
  c.roi_height = 64;
  c.lstm_hidden = 16;
  return c;
}

BackboneConfig small_backbone() {
  BackboneConfig b;
  b.stage_channels = {4, 8};
  b.blocks_per_stage = {1, 1};
  b.norm_groups = 2;
  b.stem_stride = 2;
  return b;
}

}  // namespace

TEST_CASE("localizer") {
  std::mt19937_64 init(4);
  ParameterStore<double> store;
  Localizer<double> loc(small_localizer(), small_backbone(), store, init);
  std::mt19937_64 rng(8);
  auto image = random_tensor<double>({2, 1, 64, 200}, rng, 0, 1);

  SUBCASE("crops have shape (B*23, C, 64, 50)") {
    auto rois = loc.localize(image, false, rng);
    CHECK(rois.crops.shape() == Shape{46, 1, 64, 50});
    CHECK(rois.affine.theta.shape() == Shape{2, 23, 2, 3});
    CHECK(rois.grid.coords.shape() == Shape{2, 23, 64, 50, 2});
  }
  SUBCASE("is deterministic") {
    std::mt19937_64 r1(1), r2(1);
    auto a = loc.localize(image, true, r1);
    auto b = loc.localize(image, true, r2);
    CHECK(max_abs_diff(a.crops.data(), b.crops.data()) == 0.0);
    CHECK(a.reg_penalty.item() == b.reg_penalty.item());
  }
  SUBCASE("zero recurrent and head weights give the head bias at every step") {
    const std::vector<double> bias{0.3, -0.1, 0.2, 0.05, 0.6, -0.4};
    for (auto& e : store.entries()) {
      if (e.name.rfind("loc.lstm", 0) == 0 || e.name == "loc.head.weight") {
        for (auto& v : e.tensor.mutable_data()) v = 0;
      }
    }
    auto hb = store.get("loc.head.bias").mutable_data();
    std::copy(bias.begin(), bias.end(), hb.begin());
    auto features = random_tensor<double>({2, 8}, rng);
    auto affine = loc.predict_affine(features, false, rng);
    for (std::size_t m = 0; m < 46; ++m)
      for (std::size_t k = 0; k < 6; ++k) CHECK(affine.theta.data()[m * 6 + k] == bias[k]);
  }
  SUBCASE("a large translation bias forces a positive penalty") {
    store.get("loc.head.weight").mutable_data()[0] = 0;
    for (auto& v : store.get("loc.head.weight").mutable_data()) v = 0;
    auto hb = store.get("loc.head.bias").mutable_data();
    const std::vector<double> bias{1, 0, 5, 0, 1, 0};
    std::copy(bias.begin(), bias.end(), hb.begin());
    CHECK(loc.localize(image, false, rng).reg_penalty.item() > 0.0);
  }
}

TEST_CASE("uniform slices tile the image into equal vertical strips") {
  auto a = uniform_slices<double>(1, 4);
  auto g = generate_grid(a, 3, 2);
  for (std::size_t n = 0; n < 4; ++n) {
    CHECK(g.coords.at({0, n, 0, 0, 0}) == doctest::Approx(-1.0 + 0.5 * double(n)));
    CHECK(g.coords.at({0, n, 0, 2, 0}) == doctest::Approx(-0.5 + 0.5 * double(n)));
    CHECK(g.coords.at({0, n, 1, 0, 1}) == 1.0);
  }
  CHECK(out_of_image_penalty(g).item() == 0.0);
}
