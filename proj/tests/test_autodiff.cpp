#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "kiss/gradcheck.hpp"
#include "kiss/ops.hpp"

using namespace kiss;
using kiss::test::max_abs_diff;
using kiss::test::random_tensor;
using TD = Tensor<double>;

TEST_CASE("matmul with the identity returns the left operand") {
  TD a({2, 2}, {1, 2, 3, 4});
  TD eye({2, 2}, {1, 0, 0, 1});
  auto c = ops::matmul(a, eye);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("sum backward gives ones") {
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  TD x({3}, {1, 2, 3}, true);
  auto s = ops::sum(x);
  CHECK(s.item() == 6.0);
  tape.backward(s);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("the tape is topologically ordered") {
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  std::mt19937_64 rng(3);
  auto a = random_tensor<double>({2, 3}, rng, -1, 1, true);
  auto b = random_tensor<double>({3, 2}, rng, -1, 1, true);
  auto y = ops::sum(ops::tanh(ops::matmul(a, b)));
  const auto& recs = tape.records();
  REQUIRE(recs.size() == 3);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    for (const auto& in : recs[i].inputs) {
      bool produced_later = false;
      for (std::size_t j = i; j < recs.size(); ++j) produced_later |= recs[j].output == in;
      CHECK_FALSE(produced_later);
    }
  }
  (void)y;
}

TEST_CASE("shape errors name the op and both shapes") {
  TD a({2, 3}, std::vector<double>(6, 1.0));
  TD b({4, 5}, std::vector<double>(20, 1.0));
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  TD c({3}, std::vector<double>(3, 1.0));
  CHECK_THROWS_AS(ops::add(a, TD({2}, {1, 2})), ShapeError);
  CHECK_NOTHROW(ops::add(a, c));
}

TEST_CASE("debug mode reports non-finite inputs") {
  TD a({2}, {1.0, std::nan("")});
  CHECK_NOTHROW(ops::relu(a));
  set_debug_checks(true);
  CHECK_THROWS_AS(ops::relu(a), NumericError);
  set_debug_checks(false);
}

TEST_CASE("backward is bit-deterministic") {
  std::mt19937_64 rng(11);
  auto x0 = random_tensor<float>({2, 3, 6, 6}, rng);
  auto w0 = random_tensor<float>({4, 3, 3, 3}, rng);
  auto run = [&] {
    Tape<float> tape;
    ActiveTape<float> scope(tape);
    auto x = x0.detach();
    auto w = w0.detach();
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    auto g = Tensor<float>::full({4}, 1.0f), b = Tensor<float>::zeros({4});
    auto y = ops::group_norm(ops::conv2d(x, w, 1, 1), 2, g, b);
    tape.backward(ops::sum(ops::mul(y, y)));
    auto gw = kiss::test::to_vector<float>(w.grad());
    auto gx = kiss::test::to_vector<float>(x.grad());
    gw.insert(gw.end(), gx.begin(), gx.end());
    return gw;
  };
  CHECK(run() == run());
}

TEST_CASE("broadcasting add and its gradient") {
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  TD a({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  TD b({3}, {10, 20, 30}, true);
  auto c = ops::add(a, b);
  CHECK(c.at({1, 2}) == 36.0);
  tape.backward(ops::sum(c));
  for (double g : b.grad()) CHECK(g == 2.0);
}

TEST_CASE("softmax rows are non-negative and sum to one") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({7, 13}, rng, -30, 30);
  auto p = ops::softmax(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 13; ++c) {
      CHECK(p.at({r, c}) >= 0.0);
      s += p.at({r, c});
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("cross-entropy of uniform logits over 95 classes is ln 95") {
  TD logits({3, 95}, std::vector<double>(3 * 95, 0.25));
  std::vector<int> t{0, 50, 94};
  CHECK(std::abs(ops::softmax_cross_entropy(logits, std::span<const int>(t)).item() - std::log(95.0)) < 1e-12);
}

TEST_CASE("cross-entropy vanishes for a dominant true logit") {
  std::vector<double> v(2 * 5, 0.0);
  v[1] = 100;
  v[5 + 3] = 100;
  std::vector<int> t{1, 3};
  CHECK(ops::softmax_cross_entropy(TD({2, 5}, v), std::span<const int>(t)).item() < 1e-6);
}

TEST_CASE("cross-entropy gradient is (softmax - one_hot) / count") {
  std::mt19937_64 rng(9);
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  auto logits = random_tensor<double>({4, 5}, rng, -2, 2, true);
  std::vector<int> t{0, 3, -1, 4};
  auto loss = ops::softmax_cross_entropy(logits, std::span<const int>(t), -1);
  tape.backward(loss);
  double expected_loss = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mx = -1e300, z = 0;
    for (std::size_t c = 0; c < 5; ++c) mx = std::max(mx, logits.at({r, c}));
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.at({r, c}) - mx);
    for (std::size_t c = 0; c < 5; ++c) {
      const double p = std::exp(logits.at({r, c}) - mx) / z;
      const double expect = t[r] < 0 ? 0.0 : (p - (static_cast<int>(c) == t[r] ? 1.0 : 0.0)) / 3.0;
      CHECK(std::abs(logits.grad()[r * 5 + c] - expect) < 1e-12);
    }
    if (t[r] >= 0) expected_loss -= (logits.at({r, std::size_t(t[r])}) - mx - std::log(z)) / 3.0;
  }
  CHECK(std::abs(loss.item() - expected_loss) < 1e-12);
}

TEST_CASE("cross-entropy rejects out-of-range targets") {
  TD logits({1, 5}, std::vector<double>(5, 0.0));
  std::vector<int> t{5};
  CHECK_THROWS(ops::softmax_cross_entropy(logits, std::span<const int>(t)));
}

TEST_CASE("conv2d basics") {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 1, 5, 4}, rng);
  SUBCASE("1x1 unit kernel is the identity") {
    auto y = ops::conv2d(x, TD({1, 1, 1, 1}, {1.0}), 1, 0);
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("zero input gives zero output") {
    auto y = ops::conv2d(TD::zeros({1, 2, 6, 6}), random_tensor<double>({3, 2, 3, 3}, rng), 2, 1);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("output size follows floor((H + 2p - k) / s) + 1") {
    auto y = ops::conv2d(TD::zeros({1, 2, 9, 12}), TD::zeros({3, 2, 3, 3}), 2, 1);
    CHECK(y.shape() == Shape{1, 3, 5, 6});
  }
  SUBCASE("incompatible channels and empty outputs are rejected") {
    CHECK_THROWS_AS(ops::conv2d(x, TD::zeros({1, 2, 1, 1}), 1, 0), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, TD::zeros({1, 1, 7, 7}), 1, 0), ShapeError);
  }
  SUBCASE("matches a direct loop") {
    auto in = random_tensor<double>({1, 2, 5, 5}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    auto y = ops::conv2d(in, w, 2, 1);
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 3; ++kj) {
                const long r = long(i * 2 + ki) - 1, q = long(j * 2 + kj) - 1;
                if (r < 0 || q < 0 || r >= 5 || q >= 5) continue;
                s += in.at({0, c, std::size_t(r), std::size_t(q)}) * w.at({o, c, ki, kj});
              }
          CHECK(std::abs(y.at({0, o, i, j}) - s) < 1e-12);
        }
  }
}

TEST_CASE("conv2d gradient agrees with finite differences") {
  std::mt19937_64 rng(4);
  auto f = [](const std::vector<TD>& in) { return std::vector<TD>{ops::conv2d(in[0], in[1], 1, 1)}; };
  auto r = check_gradient("conv2d", 1e-4, f,
                          {random_tensor<double>({1, 2, 5, 5}, rng), random_tensor<double>({2, 2, 3, 3}, rng)},
                          GradCheckOptions{});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("group_norm") {
  std::mt19937_64 rng(8);
  SUBCASE("constant input gives zero output") {
    auto y = ops::group_norm(TD::full({2, 4, 3, 3}, 7.0), 2, TD::full({4}, 1.0), TD::zeros({4}));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("gamma 0 gives beta") {
    TD beta({4}, {1, -2, 3, 0.5});
    auto y = ops::group_norm(random_tensor<double>({2, 4, 3, 3}, rng), 2, TD::zeros({4}), beta);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 9; ++i) CHECK(y.at({n, c, i / 3, i % 3}) == beta.at({c}));
  }
  SUBCASE("per-group statistics are zero mean and unit variance") {
    auto x = random_tensor<double>({3, 6, 5, 4}, rng, -4, 9);
    auto y = ops::group_norm(x, 3, TD::full({6}, 1.0), TD::zeros({6}), 1e-12);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t g = 0; g < 3; ++g) {
        double m = 0, v = 0;
        const std::size_t begin = (n * 6 + g * 2) * 20;
        for (std::size_t i = 0; i < 40; ++i) m += y.data()[begin + i];
        m /= 40;
        for (std::size_t i = 0; i < 40; ++i) v += (y.data()[begin + i] - m) * (y.data()[begin + i] - m);
        v /= 40;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-5);
      }
  }
  SUBCASE("statistics never mix samples") {
    auto x = random_tensor<double>({2, 4, 3, 3}, rng);
    auto y = ops::group_norm(x, 2, TD::full({4}, 1.0), TD::zeros({4}));
    auto first = ops::group_norm(ops::slice(x, 0, 0, 1), 2, TD::full({4}, 1.0), TD::zeros({4}));
    for (std::size_t i = 0; i < first.numel(); ++i) CHECK(first.data()[i] == y.data()[i]);
  }
  SUBCASE("channels must divide into groups") {
    CHECK_THROWS(ops::group_norm(TD::zeros({1, 6, 2, 2}), 4, TD::full({6}, 1.0), TD::zeros({6})));
  }
}

TEST_CASE("dropout is the identity outside training and scales survivors inside") {
  std::mt19937_64 rng(1);
  auto x = TD::full({1000}, 1.0);
  auto y = ops::dropout(x, 0.3, rng, false);
  CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
  auto z = ops::dropout(x, 0.3, rng, true);
  std::size_t kept = 0;
  for (double v : z.data()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12));
    kept += v != 0.0;
  }
  CHECK(kept > 600);
  CHECK(kept < 800);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  Tape<double> tape;
  ActiveTape<double> scope(tape);
  TD table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> ids{2, 0, 2};
  auto e = ops::embedding(table, std::span<const int>(ids), Shape{3});
  CHECK(e.at({0, 1}) == 6.0);
  CHECK(e.at({1, 0}) == 1.0);
  tape.backward(ops::sum(e));
  CHECK(table.grad()[0] == 1.0);
  CHECK(table.grad()[2] == 0.0);
  CHECK(table.grad()[4] == 2.0);
}
