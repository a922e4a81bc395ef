#include "kiss/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "kiss/font.hpp"
#include "kiss/vocabulary.hpp"

namespace kiss {

namespace {

constexpr std::size_t kCell = Glyph::kCols + 1;

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

std::uint8_t to_pixel(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

enum class Border { Zero, Clamp };

// Pixel centers sit at integer coordinates.
double sample_bilinear(const Image& img, double x, double y, Border border) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double ax = x - fx, ay = y - fy;
  const auto w = static_cast<long>(img.width), h = static_cast<long>(img.height);
  auto px = [&](long xi, long yi) -> double {
    if (border == Border::Clamp) {
      xi = std::clamp(xi, 0L, w - 1);
      yi = std::clamp(yi, 0L, h - 1);
    } else if (xi < 0 || yi < 0 || xi >= w || yi >= h) {
      return 0.0;
    }
    return img.pixels[static_cast<std::size_t>(yi * w + xi)];
  };
  if (border == Border::Zero && (x < -1.0 || y < -1.0 || x > static_cast<double>(w) || y > static_cast<double>(h))) {
    return 0.0;
  }
  return (1 - ax) * (1 - ay) * px(x0, y0) + ax * (1 - ay) * px(x0 + 1, y0) + (1 - ax) * ay * px(x0, y0 + 1) +
         ax * ay * px(x0 + 1, y0 + 1);
}

bool ink_at(std::string_view text, double u, double v) {
  if (u < 0 || v < 0 || v >= static_cast<double>(Glyph::kRows)) return false;
  const auto cell = static_cast<std::size_t>(u);
  const std::size_t idx = cell / kCell;
  const std::size_t col = cell % kCell;
  if (idx >= text.size() || col >= Glyph::kCols) return false;
  return glyph(text[idx]).bits[static_cast<std::size_t>(v)][col];
}

}  // namespace

RenderStyle sample_style(std::size_t text_length, std::size_t width, std::size_t height, std::mt19937_64& rng) {
  if (text_length == 0) throw std::invalid_argument("sample_style: empty text");
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  const double block_w = static_cast<double>(kCell * text_length - 1);
  const double block_h = static_cast<double>(Glyph::kRows);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RenderStyle s;
  const double s_max = std::min(0.92 * W / block_w, 0.75 * H / block_h);
  s.scale = s_max * (0.65 + 0.35 * unit(rng));
  s.angle_deg = -10.0 + 20.0 * unit(rng);
  const double c = std::abs(std::cos(radians(s.angle_deg))), sn = std::abs(std::sin(radians(s.angle_deg)));
  double ex = s.scale * (c * block_w + sn * block_h) / 2;
  double ey = s.scale * (sn * block_w + c * block_h) / 2;
  const double fit = std::min({1.0, 0.49 * W / ex, 0.49 * H / ey});
  s.scale *= fit;
  ex *= fit;
  ey *= fit;
  s.center_x = ex + (W - 2 * ex) * unit(rng);
  s.center_y = ey + (H - 2 * ey) * unit(rng);
  s.background = 60.0 * unit(rng);
  s.ink = 170.0 + 85.0 * unit(rng);
  s.noise_sigma = 6.0 * unit(rng);
  return s;
}

Image render_text(std::string_view text, std::size_t width, std::size_t height, const RenderStyle& style,
                  std::mt19937_64* noise_rng) {
  for (char ch : text) glyph(ch);
  const double block_w = static_cast<double>(kCell * text.size() - 1);
  const double half_h = static_cast<double>(Glyph::kRows) / 2;
  const double c = std::cos(radians(style.angle_deg)), s = std::sin(radians(style.angle_deg));
  Image img(width, height);
  std::normal_distribution<double> noise(0.0, 1.0);
  constexpr int kSuper = 3;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double dx = static_cast<double>(x) + (sx + 0.5) / kSuper - style.center_x;
          const double dy = static_cast<double>(y) + (sy + 0.5) / kSuper - style.center_y;
          // Inverse of a counter-clockwise rotation in y-down pixel space.
          const double fx = c * dx - s * dy;
          const double fy = s * dx + c * dy;
          if (ink_at(text, fx / style.scale + block_w / 2, fy / style.scale + half_h)) ++hits;
        }
      }
      const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
      double v = style.background + (style.ink - style.background) * coverage;
      if (noise_rng) v += style.noise_sigma * noise(*noise_rng);
      img.at(x, y) = to_pixel(v);
    }
  }
  return img;
}

Sample render_word(std::string_view text, std::size_t width, std::size_t height, std::uint64_t seed,
                   RenderStyle* style_out) {
  if (text.empty() || text.size() > Vocabulary::kMaxLength) {
    throw std::invalid_argument("render_word: text length " + std::to_string(text.size()) + " outside 1.." +
                                std::to_string(Vocabulary::kMaxLength));
  }
  const auto& vocab = Vocabulary::standard();
  for (char ch : text) vocab.id_of(ch);
  std::mt19937_64 rng(seed);
  const auto style = sample_style(text.size(), width, height, rng);
  if (style_out) *style_out = style;
  return Sample{render_text(text, width, height, style, &rng), std::string(text)};
}

void AugmentPolicy::validate() const {
  if (train_fraction < 0.0 || train_fraction > 1.0) throw std::invalid_argument("augment: train_fraction outside [0, 1]");
  if (resize_min <= 0.0 || resize_max > 1.0 || resize_min > resize_max) {
    throw std::invalid_argument("augment: resize range must satisfy 0 < min <= max <= 1");
  }
  if (blur_sigma_max < 0.0) throw std::invalid_argument("augment: blur_sigma_max must be non-negative");
  if (distortion < 0.0 || distortion >= 0.5) throw std::invalid_argument("augment: distortion outside [0, 0.5)");
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw std::invalid_argument("resize_bilinear: empty target");
  Image out(width, height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double v = (static_cast<double>(y) + 0.5) * sy - 0.5;
      out.at(x, y) = to_pixel(sample_bilinear(image, u, v, Border::Clamp));
    }
  }
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma < 0.05) return image;
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;
  const auto W = static_cast<long>(image.width), H = static_cast<long>(image.height);
  std::vector<double> tmp(image.pixels.size());
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) {
        const long xi = std::clamp(x + i, 0L, W - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * image.pixels[static_cast<std::size_t>(y * W + xi)];
      }
      tmp[static_cast<std::size_t>(y * W + x)] = acc;
    }
  }
  Image out(image.width, image.height);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) {
        const long yi = std::clamp(y + i, 0L, H - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(yi * W + x)];
      }
      out.pixels[static_cast<std::size_t>(y * W + x)] = to_pixel(acc);
    }
  }
  return out;
}

Image perspective_warp(const Image& image, const std::array<std::array<double, 2>, 4>& source_corners) {
  const double xs = static_cast<double>(image.width - 1), ys = static_cast<double>(image.height - 1);
  const std::array<std::array<double, 2>, 4> dst = {{{0, 0}, {xs, 0}, {xs, ys}, {0, ys}}};
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int k = 0; k < 4; ++k) {
    const double x = dst[k][0], y = dst[k][1];
    const double u = source_corners[k][0], v = source_corners[k][1];
    A.row(2 * k) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    A.row(2 * k + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * k) = u;
    b(2 * k + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(b);
  Image out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double den = h(6) * fx + h(7) * fy + 1.0;
      const double u = (h(0) * fx + h(1) * fy + h(2)) / den;
      const double v = (h(3) * fx + h(4) * fy + h(5)) / den;
      out.at(x, y) = to_pixel(sample_bilinear(image, u, v, Border::Clamp));
    }
  }
  return out;
}

Image rotate_about_center(const Image& image, double degrees) {
  const double c = std::cos(radians(degrees)), s = std::sin(radians(degrees));
  const double cx = (static_cast<double>(image.width) - 1) / 2, cy = (static_cast<double>(image.height) - 1) / 2;
  Image out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double u = cx + c * dx - s * dy;
      const double v = cy + s * dx + c * dy;
      out.at(x, y) = to_pixel(sample_bilinear(image, u, v, Border::Zero));
    }
  }
  return out;
}

Sample augment_train(const Sample& sample, const AugmentPolicy& policy, std::mt19937_64& rng, bool* applied) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool apply = unit(rng) < policy.train_fraction;
  if (applied) *applied = apply;
  if (!apply) return sample;
  const Image& src = sample.image;
  const double W = static_cast<double>(src.width), H = static_cast<double>(src.height);
  const double f = policy.resize_min + (policy.resize_max - policy.resize_min) * unit(rng);
  const auto sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * f)));
  const auto sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * f)));
  Image img = resize_bilinear(resize_bilinear(src, sw, sh), src.width, src.height);
  img = gaussian_blur(img, policy.blur_sigma_max * unit(rng));
  const double xs = W - 1, ys = H - 1;
  std::array<std::array<double, 2>, 4> corners = {{{0, 0}, {xs, 0}, {xs, ys}, {0, ys}}};
  for (auto& corner : corners) {
    corner[0] += policy.distortion * W * (2 * unit(rng) - 1);
    corner[1] += policy.distortion * H * (2 * unit(rng) - 1);
  }
  img = perspective_warp(img, corners);
  return Sample{std::move(img), sample.label};
}

Image resize_keep_aspect(const Image& image, std::size_t width, std::size_t height, std::uint8_t background) {
  if (image.width == 0 || image.height == 0) throw std::invalid_argument("resize_keep_aspect: empty image");
  const double s = std::min(static_cast<double>(width) / static_cast<double>(image.width),
                            static_cast<double>(height) / static_cast<double>(image.height));
  const auto w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(image.width * s)), 1, width);
  const auto h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(image.height * s)), 1, height);
  const Image scaled = (w == image.width && h == image.height) ? image : resize_bilinear(image, w, h);
  Image out(width, height, background);
  const std::size_t ox = (width - w) / 2, oy = (height - h) / 2;
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(scaled.pixels.begin() + static_cast<std::ptrdiff_t>(y * w), w,
                out.pixels.begin() + static_cast<std::ptrdiff_t>((y + oy) * width + ox));
  }
  return out;
}

double tta_rotation_degrees(std::size_t width, std::size_t height) {
  return static_cast<double>(width) > 1.3 * static_cast<double>(height) ? 5.0 : 90.0;
}

std::vector<Image> tta_variants(const Image& image) {
  const double r = tta_rotation_degrees(image.width, image.height);
  return {image, rotate_about_center(image, r), rotate_about_center(image, -r)};
}

std::size_t select_tta_prediction(const std::vector<DecodedSequence>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("select_tta_prediction: no candidates");
  auto score = [](const DecodedSequence& d) {
    if (d.probabilities.empty()) return 0.0;
    double s = 0;
    for (double p : d.probabilities) s += p;
    return s / static_cast<double>(d.probabilities.size());
  };
  std::size_t best = 0;
  double best_score = score(candidates[0]);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = score(candidates[i]);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path.string() + "'");
  auto token = [&]() {
    std::string t;
    while (in) {
      const int c = in.get();
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        if (!t.empty()) return t;
      } else if (c != EOF) {
        t.push_back(static_cast<char>(c));
      }
    }
    return t;
  };
  if (token() != "P5") throw std::runtime_error("'" + path.string() + "' is not a binary PGM (P5)");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw std::runtime_error("'" + path.string() + "' has a malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("'" + path.string() + "' has unsupported PGM dimensions or maxval");
  }
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) {
    throw std::runtime_error("'" + path.string() + "' is truncated");
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::min(255, p * 255 / maxval));
  }
  return img;
}

void GeneratorConfig::validate() const {
  if (min_len == 0 || min_len > max_len || max_len > Vocabulary::kMaxLength) {
    throw std::invalid_argument("generator: label lengths must satisfy 1 <= min_len <= max_len <= 23");
  }
  if (charset.empty()) throw std::invalid_argument("generator: empty charset");
  const auto& vocab = Vocabulary::standard();
  for (char c : charset) vocab.id_of(c);
  if (width == 0 || height == 0) throw std::invalid_argument("generator: empty canvas");
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(seed) ^ index);
}

std::vector<Sample> generate_samples(const GeneratorConfig& config) {
  config.validate();
  std::vector<Sample> samples(config.count);
  const auto n = static_cast<long>(config.count);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    std::mt19937_64 rng(sample_seed(config.seed, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<std::size_t> len(config.min_len, config.max_len);
    std::uniform_int_distribution<std::size_t> pick(0, config.charset.size() - 1);
    std::string label(len(rng), ' ');
    for (char& c : label) c = config.charset[pick(rng)];
    const auto style = sample_style(label.size(), config.width, config.height, rng);
    auto& s = samples[static_cast<std::size_t>(i)];
    s.image = render_text(label, config.width, config.height, style, &rng);
    s.label = std::move(label);
  }
  return samples;
}

namespace {

std::string image_name(std::size_t i) {
  std::ostringstream os;
  os.width(6);
  os.fill('0');
  os << i << ".pgm";
  return os.str();
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const DatasetMeta& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  std::ofstream labels(dir / "labels.tsv", std::ios::binary);
  if (!labels) throw std::runtime_error("cannot write '" + (dir / "labels.tsv").string() + "'");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto name = image_name(i);
    write_pgm(dir / name, samples[i].image);
    labels << name << '\t' << samples[i].label << '\n';
  }
  std::ofstream m(dir / "dataset.meta", std::ios::binary);
  if (!m) throw std::runtime_error("cannot write '" + (dir / "dataset.meta").string() + "'");
  m << "count=" << samples.size() << '\n'
    << "vocab_hash=" << meta.vocab_hash << '\n'
    << "seed=" << meta.seed << '\n'
    << "max_len=" << meta.max_len << '\n'
    << "charset=" << meta.charset << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream m(dir / "dataset.meta");
  if (!m) throw std::runtime_error("dataset '" + dir.string() + "' has no dataset.meta");
  std::string line;
  while (std::getline(m, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "count") ds.meta.count = std::stoul(value);
    else if (key == "vocab_hash") ds.meta.vocab_hash = std::stoull(value);
    else if (key == "seed") ds.meta.seed = std::stoull(value);
    else if (key == "max_len") ds.meta.max_len = std::stoul(value);
    else if (key == "charset") ds.meta.charset = value;
  }
  if (ds.meta.vocab_hash != Vocabulary::standard().hash()) {
    throw std::runtime_error("dataset '" + dir.string() + "' was written with a different vocabulary");
  }
  std::ifstream labels(dir / "labels.tsv", std::ios::binary);
  if (!labels) throw std::runtime_error("dataset '" + dir.string() + "' has no labels.tsv");
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("labels.tsv: malformed line '" + line + "'");
    Sample s;
    s.image = read_pgm(dir / line.substr(0, tab));
    s.label = line.substr(tab + 1);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != ds.meta.count) {
    throw std::runtime_error("dataset '" + dir.string() + "': meta lists " + std::to_string(ds.meta.count) +
                             " samples, labels.tsv has " + std::to_string(ds.samples.size()));
  }
  return ds;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const std::size_t w = images[0]->width, h = images[0]->height;
  std::vector<T> data;
  data.reserve(images.size() * w * h);
  for (const Image* img : images) {
    if (img->width != w || img->height != h) {
      throw ShapeError("images_to_tensor: image " + std::to_string(img->width) + "x" + std::to_string(img->height) +
                       " differs from " + std::to_string(w) + "x" + std::to_string(h));
    }
    for (auto p : img->pixels) data.push_back(static_cast<T>(p) / T(255));
  }
  return Tensor<T>(Shape{images.size(), 1, h, w}, std::move(data));
}

template Tensor<float> images_to_tensor<float>(const std::vector<const Image*>&);
template Tensor<double> images_to_tensor<double>(const std::vector<const Image*>&);

}  // namespace kiss
