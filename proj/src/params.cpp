#include "kiss/params.hpp"

#include <cstring>

namespace kiss {

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Shape shape) {
  return add_constant(name, std::move(shape), T(0));
}

template <typename T>
Tensor<T> ParameterStore<T>::add_constant(const std::string& name, Shape shape, T value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Tensor<T> t = Tensor<T>::full(std::move(shape), value, true);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, t});
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::add_uniform(const std::string& name, Shape shape, T bound, std::mt19937_64& rng) {
  Tensor<T> t = add_constant(name, std::move(shape), T(0));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
bool ParameterStore<T>::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

template <typename T>
Tensor<T>& ParameterStore<T>::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
std::uint64_t ParameterStore<T>::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& e : entries_) {
    mix(reinterpret_cast<const unsigned char*>(e.name.data()), e.name.size());
    auto d = e.tensor.data();
    mix(reinterpret_cast<const unsigned char*>(d.data()), d.size_bytes());
  }
  return h;
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace kiss
