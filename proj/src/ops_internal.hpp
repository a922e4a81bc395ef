#pragma once

// Shared plumbing for the op implementations.

#include <memory>
#include <string>
#include <string_view>

#include "kiss/tensor.hpp"

namespace kiss::ops::internal {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

[[noreturn]] inline void shape_error(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
void require_defined(std::string_view op, const Tensor<T>& t) {
  if (!t.defined()) shape_error(op, "undefined tensor argument");
}

template <typename T>
bool grad_of(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

#define KISS_INSTANTIATE_FLOATING(MACRO) \
  MACRO(float)                           \
  MACRO(double)

}  // namespace kiss::ops::internal
