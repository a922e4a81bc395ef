#pragma once

#include <array>
#include <cstddef>

namespace kiss {

/// 5x7 bitmap glyph; bits[row][col], row 0 at the top.
struct Glyph {
  static constexpr std::size_t kCols = 5;
  static constexpr std::size_t kRows = 7;
  bool defined = false;
  std::array<std::array<bool, kCols>, kRows> bits{};
};

/// Throws std::invalid_argument for characters without a glyph.
const Glyph& glyph(char c);
std::size_t glyph_count();

}  // namespace kiss
