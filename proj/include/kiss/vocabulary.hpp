#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kiss {

/// Label encoded over the vocabulary: characters followed by blank padding.
struct TokenSequence {
  std::vector<int> ids;

  /// Number of ids before the first blank.
  std::size_t length(int blank_id) const;
};

/// The 95 output classes: digits 0-9, A-Z, a-z, the 32 printable ASCII
/// punctuation characters in code-point order, then blank (end of sequence and
/// padding). Index 95 is reserved for the decoder's begin-of-sequence input.
class Vocabulary {
 public:
  static constexpr std::size_t kClasses = 95;
  static constexpr int kBlank = 94;
  static constexpr int kBos = 95;
  static constexpr std::size_t kMaxLength = 23;

  static const Vocabulary& standard();

  std::size_t size() const { return kClasses; }
  int blank_id() const { return kBlank; }

  bool contains(char c) const;
  /// Throws std::invalid_argument for characters outside the vocabulary.
  int id_of(char c) const;
  /// Blank maps to '\0'.
  char symbol(int id) const;

  /// Pads with blank to `length`. Throws on unknown characters or overlong text.
  TokenSequence encode(std::string_view text, std::size_t length = kMaxLength) const;
  /// Text up to (excluding) the first blank.
  std::string decode(std::span<const int> ids) const;

  /// The 94 printable symbols in class order (blank excluded).
  std::string_view printable() const { return std::string_view(symbols_.data(), kClasses - 1); }
  std::uint64_t hash() const;

 private:
  Vocabulary();
  std::array<char, kClasses> symbols_{};
  std::array<int, 128> index_{};
};

/// Validates a TokenSequence: ids in range, everything after the first blank is blank.
bool is_well_formed(const TokenSequence& seq);

}  // namespace kiss
