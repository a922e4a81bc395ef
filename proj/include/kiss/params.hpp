#pragma once

#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "kiss/tensor.hpp"

namespace kiss {

/// Ordered collection of named learnable tensors. Insertion order is stable
/// so iteration (optimizer updates, checkpoint records) is deterministic.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  /// Registers a zero-filled parameter. Names must be unique.
  Tensor<T> add(const std::string& name, Shape shape);
  Tensor<T> add_uniform(const std::string& name, Shape shape, T bound, std::mt19937_64& rng);
  Tensor<T> add_constant(const std::string& name, Shape shape, T value);

  bool contains(std::string_view name) const;
  const Tensor<T>& get(std::string_view name) const;
  Tensor<T>& get(std::string_view name);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;

  void zero_grad();

  /// Copies values by name from another store (of any precision). Throws a
  /// ShapeError naming the tensor when a shape differs or a name is missing.
  template <typename U>
  void copy_from(const ParameterStore<U>& other);

  /// Order-sensitive FNV-1a hash over names and value bits.
  std::uint64_t hash() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

template <typename T>
template <typename U>
void ParameterStore<T>::copy_from(const ParameterStore<U>& other) {
  for (auto& e : entries_) {
    if (!other.contains(e.name)) throw ShapeError("parameter '" + e.name + "' missing from source");
    const auto& src = other.get(e.name);
    if (src.shape() != e.tensor.shape()) {
      throw ShapeError("parameter '" + e.name + "' shape mismatch: expected " + to_string(e.tensor.shape()) +
                       ", got " + to_string(src.shape()));
    }
    auto dst = e.tensor.mutable_data();
    auto s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s[i]);
  }
}

}  // namespace kiss
