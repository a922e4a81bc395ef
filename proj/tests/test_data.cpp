#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "kiss/data.hpp"
#include "kiss/font.hpp"

using namespace kiss;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("kiss_test_" + name);
  fs::remove_all(p);
  return p;
}

// Clean template of a single glyph, point-sampled at pixel centers with the
// renderer's reported placement.
std::vector<double> glyph_template(char ch, std::size_t w, std::size_t h, const RenderStyle& s) {
  const auto g = glyph(ch);
  const double a = s.angle_deg * M_PI / 180.0;
  std::vector<double> t(w * h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = double(x) + 0.5 - s.center_x, dy = double(y) + 0.5 - s.center_y;
      const double fx = (std::cos(a) * dx - std::sin(a) * dy) / s.scale + 2.5;
      const double fy = (std::sin(a) * dx + std::cos(a) * dy) / s.scale + 3.5;
      if (fx < 0 || fy < 0 || fx >= 5 || fy >= 7) continue;
      t[y * w + x] = g.bits[std::size_t(fy)][std::size_t(fx)] ? 1.0 : 0.0;
    }
  return t;
}

double ncc(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= double(a.size());
  mb /= double(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("font covers every printable symbol") {
  CHECK(glyph_count() == 94);
  CHECK_THROWS(glyph(' '));
}

TEST_CASE("render_word") {
  SUBCASE("is deterministic in (text, seed)") {
    CHECK(render_word("AB12", 200, 64, 5).image == render_word("AB12", 200, 64, 5).image);
    CHECK_FALSE(render_word("AB12", 200, 64, 5).image == render_word("AB12", 200, 64, 6).image);
  }
  SUBCASE("a rendered A correlates with the clean glyph template") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      RenderStyle style;
      auto s = render_word("A", 200, 64, seed, &style);
      std::vector<double> img(s.image.pixels.begin(), s.image.pixels.end());
      const double c = ncc(img, glyph_template('A', 200, 64, style));
      INFO("seed ", seed, " ncc ", c);
      CHECK(c > 0.8);
    }
  }
  SUBCASE("pixels away from the text are background plus noise") {
    RenderStyle style;
    auto s = render_word("XY", 200, 64, 3, &style);
    const double reach = style.scale * std::hypot(11.0, 7.0) / 2 + 2;
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 200; ++x) {
        if (std::hypot(double(x) + 0.5 - style.center_x, double(y) + 0.5 - style.center_y) < reach) continue;
        CHECK(std::abs(double(s.image.at(x, y)) - style.background) <= 6 * style.noise_sigma + 1);
      }
  }
  SUBCASE("the word stays on the canvas") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      RenderStyle st;
      render_word("ABCDE", 200, 64, seed, &st);
      CHECK(std::abs(st.angle_deg) <= 10.0);
      CHECK(st.center_x - st.scale * 29 / 2 >= -1e-9);
    }
  }
  SUBCASE("rejects bad input") {
    CHECK_THROWS(render_word("", 200, 64, 1));
    CHECK_THROWS(render_word("a b", 200, 64, 1));
    CHECK_THROWS(render_word(std::string(24, 'A'), 200, 64, 1));
  }
}

TEST_CASE("augment_train") {
  auto base = render_word("Hi", 200, 64, 9);
  SUBCASE("fraction 0 is the identity") {
    AugmentPolicy p;
    p.train_fraction = 0;
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
      bool applied = true;
      auto out = augment_train(base, p, rng, &applied);
      CHECK_FALSE(applied);
      CHECK(out.image == base.image);
    }
  }
  SUBCASE("keeps the label and the size") {
    AugmentPolicy p;
    p.train_fraction = 1;
    std::mt19937_64 rng(2);
    for (int i = 0; i < 10; ++i) {
      auto out = augment_train(base, p, rng);
      CHECK(out.label == "Hi");
      CHECK(out.image.width == 200);
      CHECK(out.image.height == 64);
    }
  }
  SUBCASE("the augmented fraction concentrates at 0.4") {
    // Binomial(10000, 0.4): standard deviation 0.0049, so +-0.02 is about 4 sigma.
    AugmentPolicy p;
    std::mt19937_64 rng(3);
    Sample tiny{Image(8, 4, 10), "a"};
    std::size_t hits = 0;
    for (int i = 0; i < 10000; ++i) {
      bool applied = false;
      augment_train(tiny, p, rng, &applied);
      hits += applied;
    }
    CHECK(std::abs(double(hits) / 10000.0 - 0.4) <= 0.02);
  }
  SUBCASE("policy validation") {
    AugmentPolicy p;
    p.train_fraction = 1.5;
    CHECK_THROWS(p.validate());
  }
}

TEST_CASE("image operators") {
  SUBCASE("blur preserves a constant image") {
    Image c(20, 10, 77);
    CHECK(gaussian_blur(c, 1.2) == c);
  }
  SUBCASE("identity perspective is the identity") {
    auto s = render_word("Q", 40, 20, 1);
    auto w = perspective_warp(s.image, {{{0, 0}, {39, 0}, {39, 19}, {0, 19}}});
    CHECK(w == s.image);
  }
  SUBCASE("rotating by 90 degrees moves pixels about the center") {
    Image img(5, 5, 0);
    img.at(4, 2) = 200;  // right of center
    auto r = rotate_about_center(img, 90.0);
    // Counter-clockwise on screen: right goes to top.
    CHECK(r.at(2, 0) == 200);
    CHECK(r.at(4, 2) == 0);
  }
}

TEST_CASE("resize_keep_aspect") {
  SUBCASE("200x64 input is unchanged") {
    auto s = render_word("ok", 200, 64, 2);
    CHECK(resize_keep_aspect(s.image) == s.image);
  }
  SUBCASE("100x32 scales by two without padding") {
    Image img(100, 32, 90);
    auto out = resize_keep_aspect(img);
    CHECK(out.width == 200);
    CHECK(out.height == 64);
    for (auto p : out.pixels) CHECK(p == 90);
  }
  SUBCASE("400x64 becomes 200x32 with 16 rows of padding on each side") {
    Image img(400, 64, 120);
    auto out = resize_keep_aspect(img, 200, 64, 0);
    for (std::size_t y = 0; y < 64; ++y) {
      const std::uint8_t expect = (y < 16 || y >= 48) ? 0 : 120;
      for (std::size_t x = 0; x < 200; ++x) CHECK(out.at(x, y) == expect);
    }
  }
}

TEST_CASE("test-time augmentation") {
  CHECK(tta_rotation_degrees(200, 64) == 5.0);
  CHECK(tta_rotation_degrees(64, 200) == 90.0);
  CHECK(tta_rotation_degrees(130, 100) == 90.0);
  CHECK(tta_rotation_degrees(131, 100) == 5.0);

  Image sq(32, 32, 0);
  sq.at(31, 16) = 255;
  auto v = tta_variants(sq);
  REQUIRE(v.size() == 3);
  CHECK(v[0] == sq);
  CHECK(v[1] == rotate_about_center(sq, 90.0));
  CHECK(v[2] == rotate_about_center(sq, -90.0));
  for (const auto& im : v) CHECK((im.width == 32 && im.height == 32));

  auto cand = [](std::vector<double> p) {
    DecodedSequence d;
    d.probabilities = p;
    d.text = std::string(p.size(), 'a');
    return d;
  };
  CHECK(select_tta_prediction({cand({0.7, 0.8})}) == 0);
  CHECK(select_tta_prediction({cand({0.9}), cand({0.6})}) == 0);
  CHECK(select_tta_prediction({cand({0.6}), cand({0.9, 0.9})}) == 1);
  CHECK(select_tta_prediction({cand({0.5}), cand({0.5}), cand({0.5})}) == 0);
  CHECK(select_tta_prediction({cand({}), cand({0.1})}) == 1);
  CHECK_THROWS(select_tta_prediction({}));
}

TEST_CASE("generator and dataset storage") {
  GeneratorConfig g;
  g.count = 1200;
  g.seed = 3;
  auto samples = generate_samples(g);
  REQUIRE(samples.size() == 1200);
  std::map<char, std::size_t> hist;
  for (const auto& s : samples) {
    CHECK(s.label.size() >= 1);
    CHECK(s.label.size() <= 5);
    for (char c : s.label) hist[c]++;
  }
  for (char c : g.charset) CHECK(hist[c] >= 1);
  CHECK(hist.size() == g.charset.size());

  SUBCASE("sample i depends only on (seed, i)") {
    GeneratorConfig small = g;
    small.count = 10;
    auto few = generate_samples(small);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(few[i].label == samples[i].label);
      CHECK(few[i].image == samples[i].image);
    }
  }
  SUBCASE("round trip through the directory format") {
    const auto dir = temp_dir("dataset");
    std::vector<Sample> some(samples.begin(), samples.begin() + 25);
    DatasetMeta meta{25, Vocabulary::standard().hash(), 3, 5, g.charset};
    save_dataset(dir, some, meta);
    CHECK(fs::exists(dir / "labels.tsv"));
    CHECK(fs::exists(dir / "000024.pgm"));
    auto back = load_dataset(dir);
    REQUIRE(back.samples.size() == 25);
    for (std::size_t i = 0; i < 25; ++i) {
      CHECK(back.samples[i].label == some[i].label);
      CHECK(back.samples[i].image == some[i].image);
    }
    CHECK(back.meta.seed == 3);
    CHECK(back.meta.charset == g.charset);

    std::ofstream(dir / "dataset.meta", std::ios::app) << "";
    fs::remove(dir / "000003.pgm");
    CHECK_THROWS(load_dataset(dir));
    fs::remove_all(dir);
  }
  SUBCASE("full charset labels are all decodable") {
    GeneratorConfig full;
    full.count = 300;
    full.charset = std::string(Vocabulary::standard().printable());
    full.max_len = 23;
    for (const auto& s : generate_samples(full)) {
      CHECK(s.label.size() <= 23);
      for (char c : s.label) CHECK(Vocabulary::standard().contains(c));
    }
  }
  SUBCASE("invalid configs are rejected") {
    GeneratorConfig bad;
    bad.min_len = 4;
    bad.max_len = 2;
    CHECK_THROWS(bad.validate());
    bad = GeneratorConfig{};
    bad.charset = "ab c";
    CHECK_THROWS(bad.validate());
  }
}

TEST_CASE("PGM round trip and tensor conversion") {
  const auto dir = temp_dir("pgm");
  fs::create_directories(dir);
  auto s = render_word("pgm", 37, 13, 4);
  write_pgm(dir / "a.pgm", s.image);
  CHECK(read_pgm(dir / "a.pgm") == s.image);
  CHECK_THROWS(read_pgm(dir / "missing.pgm"));
  auto t = images_to_tensor<float>({&s.image});
  CHECK(t.shape() == Shape{1, 1, 13, 37});
  CHECK(t.at({0, 0, 5, 7}) == float(s.image.at(7, 5)) / 255.0f);
  fs::remove_all(dir);
}
