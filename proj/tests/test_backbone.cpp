#include <doctest.h>

#include "helpers.hpp"
#include "kiss/backbone.hpp"
#include "kiss/gradcheck.hpp"
#include "kiss/ops.hpp"

using namespace kiss;
using kiss::test::max_abs_diff;
using kiss::test::random_tensor;
using TD = Tensor<double>;

namespace {

BackboneConfig three_stage() {
  BackboneConfig c;
  c.stage_channels = {4, 8, 8};
  c.blocks_per_stage = {1, 1, 1};
  c.norm_groups = 2;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  BackboneConfig c;
  CHECK_NOTHROW(c.validate());
  c.blocks_per_stage = {2, 2};
  CHECK_THROWS(c.validate());
  c = BackboneConfig{};
  c.stage_channels = {32, 60, 128};
  CHECK_THROWS(c.validate());
}

TEST_CASE("200x64 through three stride-2 stages gives 25x8") {
  auto cfg = three_stage();
  CHECK(cfg.output_size() == std::pair<std::size_t, std::size_t>{25, 8});
  std::mt19937_64 init(1), rng(2);
  ParameterStore<double> store;
  Backbone<double> bb(cfg, "bb", store, init);
  auto fm = bb.extract_features(random_tensor<double>({2, 1, 64, 200}, rng, 0, 1));
  CHECK(fm.tensor.shape() == Shape{2, 8, 8, 25});
  CHECK(fm.source_width == 200);
  CHECK(fm.source_height == 64);
  CHECK_THROWS_AS(bb.extract_features(TD::zeros({1, 1, 64, 100})), ShapeError);
}

TEST_CASE("blocks compute f(x) + shortcut(x)") {
  auto cfg = three_stage();
  std::mt19937_64 init(3), rng(4);
  ParameterStore<double> store;
  Backbone<double> bb(cfg, "bb", store, init);
  const auto& blk = bb.blocks()[1];
  CHECK(blk.projection.defined());
  CHECK(blk.stride == 2);
  auto x = random_tensor<double>({1, 4, 8, 12}, rng);
  auto out = bb.block_forward(x, blk);
  auto expect = ops::add(bb.residual_branch(x, blk), bb.shortcut(x, blk));
  CHECK(max_abs_diff(out.data(), expect.data()) == 0.0);
}

TEST_CASE("a zero-initialized residual scale leaves only the shortcut") {
  auto cfg = three_stage();
  cfg.zero_init_residual = true;
  std::mt19937_64 init(5), rng(6);
  ParameterStore<double> store;
  Backbone<double> bb(cfg, "bb", store, init);
  for (const auto& blk : bb.blocks()) {
    const std::size_t c = blk.conv_a.dim(1);
    auto x = random_tensor<double>({2, c, 8, 8}, rng);
    auto out = bb.block_forward(x, blk);
    auto sc = bb.shortcut(x, blk);
    CHECK(max_abs_diff(out.data(), sc.data()) == 0.0);
  }
  SUBCASE("and for a zero input that is the projected shortcut of zero") {
    const auto& blk = bb.blocks()[1];
    auto out = bb.block_forward(TD::zeros({1, 4, 8, 8}), blk);
    for (double v : out.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("global pool") {
  std::mt19937_64 rng(7);
  SUBCASE("constant map") {
    FeatureMap<double> fm{TD::full({2, 3, 4, 5}, 1.75), 5, 4};
    const auto p = global_pool(fm);
    for (double v : p.data()) CHECK(v == 1.75);
  }
  SUBCASE("1x1 map is the identity") {
    auto t = random_tensor<double>({2, 3, 1, 1}, rng);
    auto p = global_pool(FeatureMap<double>{t, 1, 1});
    CHECK(p.shape() == Shape{2, 3});
    CHECK(max_abs_diff(p.data(), t.data()) == 0.0);
  }
  SUBCASE("matches a loop") {
    auto t = random_tensor<double>({2, 3, 4, 5}, rng);
    auto p = global_pool(FeatureMap<double>{t, 5, 4});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < 20; ++i) s += t.data()[(n * 3 + c) * 20 + i];
        CHECK(p.at({n, c}) == doctest::Approx(s / 20).epsilon(1e-14));
      }
  }
}

TEST_CASE("features are deterministic and differentiable") {
  auto cfg = three_stage();
  cfg.input_width = 12;
  cfg.input_height = 8;
  cfg.stage_channels = {4, 4};
  cfg.blocks_per_stage = {1, 1};
  std::mt19937_64 init(8), rng(9);
  ParameterStore<double> store;
  Backbone<double> bb(cfg, "bb", store, init);
  auto img = random_tensor<double>({1, 1, 8, 12}, rng, 0, 1);
  CHECK(max_abs_diff(bb.extract_features(img).tensor.data(), bb.extract_features(img).tensor.data()) == 0.0);

  // Gradient through both blocks with respect to the image.
  auto f = [&](const std::vector<TD>& in) {
    auto x = in[0];
    for (const auto& blk : bb.blocks()) x = bb.block_forward(x, blk);
    return std::vector<TD>{x};
  };
  auto r = check_gradient("two_blocks", 1e-4, f, {random_tensor<double>({1, 4, 6, 6}, rng)}, GradCheckOptions{});
  INFO(r.max_rel_error);
  CHECK(r.passed);
}
