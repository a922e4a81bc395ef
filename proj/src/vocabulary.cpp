#include "kiss/vocabulary.hpp"

#include <stdexcept>

namespace kiss {

std::size_t TokenSequence::length(int blank_id) const {
  std::size_t n = 0;
  while (n < ids.size() && ids[n] != blank_id) ++n;
  return n;
}

Vocabulary::Vocabulary() {
  index_.fill(-1);
  std::size_t k = 0;
  auto push = [&](char c) {
    index_[static_cast<unsigned char>(c)] = static_cast<int>(k);
    symbols_[k++] = c;
  };
  for (char c = '0'; c <= '9'; ++c) push(c);
  for (char c = 'A'; c <= 'Z'; ++c) push(c);
  for (char c = 'a'; c <= 'z'; ++c) push(c);
  for (int c = 33; c < 127; ++c) {
    const char ch = static_cast<char>(c);
    const bool alnum = (ch >= '0' && ch <= '9') || (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z');
    if (!alnum) push(ch);
  }
  symbols_[k++] = '\0';
  if (k != kClasses) throw std::logic_error("vocabulary construction produced wrong class count");
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

bool Vocabulary::contains(char c) const {
  const auto u = static_cast<unsigned char>(c);
  return u < 128 && index_[u] >= 0;
}

int Vocabulary::id_of(char c) const {
  if (!contains(c)) {
    throw std::invalid_argument("unsupported character (code " + std::to_string(static_cast<unsigned char>(c)) + ")");
  }
  return index_[static_cast<unsigned char>(c)];
}

char Vocabulary::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= kClasses) {
    throw std::out_of_range("class id " + std::to_string(id) + " outside vocabulary");
  }
  return symbols_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(std::string_view text, std::size_t length) const {
  if (text.size() > length) {
    throw std::invalid_argument("label '" + std::string(text) + "' longer than " + std::to_string(length));
  }
  TokenSequence seq;
  seq.ids.assign(length, kBlank);
  for (std::size_t i = 0; i < text.size(); ++i) seq.ids[i] = id_of(text[i]);
  return seq;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kBlank) break;
    out.push_back(symbol(id));
  }
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : symbols_) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

bool is_well_formed(const TokenSequence& seq) {
  bool seen_blank = false;
  for (int id : seq.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= Vocabulary::kClasses) return false;
    if (seen_blank && id != Vocabulary::kBlank) return false;
    if (id == Vocabulary::kBlank) seen_blank = true;
  }
  return true;
}

}  // namespace kiss
