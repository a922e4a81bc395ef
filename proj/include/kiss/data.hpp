#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "kiss/recognizer.hpp"
#include "kiss/tensor.hpp"

namespace kiss {

/// 8-bit grayscale raster, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Sample {
  Image image;
  std::string label;
};

/// Placement and appearance of a rendered word. The text block spans
/// (6 * len - 1) x 7 font units, is scaled by `scale`, rotated by `angle_deg`
/// about its center and centered at (center_x, center_y) in pixel units.
struct RenderStyle {
  double scale = 1.0;
  double center_x = 0.0;
  double center_y = 0.0;
  double angle_deg = 0.0;
  double background = 0.0;
  double ink = 255.0;
  double noise_sigma = 0.0;
};

RenderStyle sample_style(std::size_t text_length, std::size_t width, std::size_t height, std::mt19937_64& rng);
/// Noise is drawn from `noise_rng` when given; a null rng renders a clean image.
Image render_text(std::string_view text, std::size_t width, std::size_t height, const RenderStyle& style,
                  std::mt19937_64* noise_rng);
/// Deterministic in (text, canvas, seed). Throws on unsupported characters or lengths outside 1..23.
Sample render_word(std::string_view text, std::size_t width, std::size_t height, std::uint64_t seed,
                   RenderStyle* style_out = nullptr);

struct AugmentPolicy {
  double train_fraction = 0.40;
  double resize_min = 0.7;
  double resize_max = 1.0;
  double blur_sigma_max = 1.5;
  /// Corner displacement bound as a fraction of the image dimensions.
  double distortion = 0.05;

  void validate() const;
};

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);
Image gaussian_blur(const Image& image, double sigma);
/// Output corner k (TL, TR, BR, BL) samples the source at `source_corners[k]` (pixel units).
Image perspective_warp(const Image& image, const std::array<std::array<double, 2>, 4>& source_corners);
/// Counter-clockwise rotation about the image center; uncovered pixels are 0.
Image rotate_about_center(const Image& image, double degrees);

/// With probability train_fraction: downscale-upscale, blur and corner-jitter
/// perspective. `applied` reports whether the sample was changed.
Sample augment_train(const Sample& sample, const AugmentPolicy& policy, std::mt19937_64& rng,
                     bool* applied = nullptr);

/// Fits the image inside width x height keeping the aspect ratio, centered, padded with `background`.
Image resize_keep_aspect(const Image& image, std::size_t width = 200, std::size_t height = 64,
                         std::uint8_t background = 0);

/// 5 degrees when width > 1.3 * height, otherwise 90.
double tta_rotation_degrees(std::size_t width, std::size_t height);
/// [original, rotated +r, rotated -r].
std::vector<Image> tta_variants(const Image& image);
/// Index of the candidate with the highest mean per-character probability;
/// empty decodes score 0 and ties keep the earliest candidate.
std::size_t select_tta_prediction(const std::vector<DecodedSequence>& candidates);

void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

struct GeneratorConfig {
  std::size_t count = 2000;
  std::uint64_t seed = 7;
  std::size_t min_len = 1;
  std::size_t max_len = 5;
  std::string charset = "0123456789ABCDEF";
  std::size_t width = 200;
  std::size_t height = 64;

  void validate() const;
};

/// Sample i depends only on (seed, i).
std::vector<Sample> generate_samples(const GeneratorConfig& config);
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);

struct DatasetMeta {
  std::size_t count = 0;
  std::uint64_t vocab_hash = 0;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;
  std::string charset;
};

struct Dataset {
  std::vector<Sample> samples;
  DatasetMeta meta;
};

/// Writes NNNNNN.pgm files, labels.tsv and dataset.meta into `dir`.
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const DatasetMeta& meta);
Dataset load_dataset(const std::filesystem::path& dir);

/// (B, 1, H, W) tensor of pixel / 255. All images must share one size.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images);

}  // namespace kiss
