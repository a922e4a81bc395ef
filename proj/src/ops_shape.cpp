#include <algorithm>
#include <numeric>

#include "kiss/kernels.hpp"
#include "kiss/ops.hpp"
#include "ops_internal.hpp"

namespace kiss::ops {

using internal::NodePtr;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "matmul";
  internal::require_defined(op, a);
  internal::require_defined(op, b);
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  if (a.rank() < 2 || b.rank() < 2) internal::shape_mismatch(op, a.shape(), b.shape());
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  if (b.dim(-2) != k) internal::shape_mismatch(op, a.shape(), b.shape());
  const std::size_t n = b.dim(-1);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  // Either b is a plain matrix shared by every leading index of a, or both carry
  // identical leading (batch) dims.
  const bool shared_b = b.rank() == 2;
  std::size_t batch = 1;
  std::size_t rows = m;
  if (shared_b) {
    rows = a.numel() / k;
  } else {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      internal::shape_mismatch(op, a.shape(), b.shape());
    }
    batch = a.numel() / (m * k);
  }

  std::vector<T> out(numel(out_shape));
  if (shared_b) {
    kernels::gemm(false, false, rows, n, k, a.data().data(), b.data().data(), out.data(), false);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      kernels::gemm(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                    out.data() + i * m * n, false);
    }
  }
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> an = a.node();
  NodePtr<T> bn = b.node();
  NodePtr<T> on = result.node();
  detail::attach<T>(op, {&a, &b}, result, [=] {
    const T* g = on->grad.data();
    if (shared_b) {
      if (an->requires_grad) kernels::gemm(false, true, rows, k, n, g, bn->value.data(), an->grad.data(), true);
      if (bn->requires_grad) kernels::gemm(true, false, k, n, rows, an->value.data(), g, bn->grad.data(), true);
      return;
    }
    for (std::size_t i = 0; i < batch; ++i) {
      const T* gi = g + i * m * n;
      if (an->requires_grad) {
        kernels::gemm(false, true, m, k, n, gi, bn->value.data() + i * k * n, an->grad.data() + i * m * k, true);
      }
      if (bn->requires_grad) {
        kernels::gemm(true, false, k, n, m, an->value.data() + i * m * k, gi, bn->grad.data() + i * k * n, true);
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  constexpr std::string_view op = "linear";
  internal::require_defined(op, x);
  internal::require_defined(op, weight);
  detail::check_finite(op, x);
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    internal::shape_mismatch(op, x.shape(), weight.shape());
  }
  const std::size_t in = weight.dim(0);
  const std::size_t outf = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    internal::shape_mismatch(op, weight.shape(), bias.shape());
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<T> out(rows * outf);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * outf);
  }
  kernels::gemm(false, false, rows, outf, in, x.data().data(), weight.data().data(), out.data(), bias.defined());
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> xn = x.node();
  NodePtr<T> wn = weight.node();
  NodePtr<T> bn = bias.defined() ? bias.node() : nullptr;
  detail::attach<T>(op, {&x, &weight, &bias}, result, [=, on = result.node()] {
    const T* g = on->grad.data();
    if (xn->requires_grad) kernels::gemm(false, true, rows, in, outf, g, wn->value.data(), xn->grad.data(), true);
    if (wn->requires_grad) kernels::gemm(true, false, in, outf, rows, xn->value.data(), g, wn->grad.data(), true);
    if (bn && bn->requires_grad) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < outf; ++j) bn->grad[j] += g[r * outf + j];
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  constexpr std::string_view op = "reshape";
  internal::require_defined(op, a);
  if (numel(shape) != a.numel()) internal::shape_mismatch(op, a.shape(), shape);
  Tensor<T> result(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, on = result.node()] {
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return result;
}

namespace {

// For each output flat index of the permuted tensor, the source flat index.
std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& order, Shape& out) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  out.resize(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out[d] = in[order[d]];
    src_strides[d] = in_strides[order[d]];
  }
  const std::size_t n = numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_strides[d];
      if (idx[d] < out[d]) break;
      src -= src_strides[d] * out[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order) {
  constexpr std::string_view op = "permute";
  internal::require_defined(op, a);
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(a.rank());
  std::iota(iota.begin(), iota.end(), 0);
  if (sorted != iota) internal::shape_error(op, "invalid axis order for shape " + to_string(a.shape()));
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(a.shape(), order, out_shape));
  std::vector<T> out(a.numel());
  const T* src = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[(*map)[i]];
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, map, on = result.node()] {
    for (std::size_t i = 0; i < map->size(); ++i) an->grad[(*map)[i]] += on->grad[i];
  });
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= a.rank() || axis1 >= a.rank()) internal::shape_error("transpose", "axis out of range");
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[axis0], order[axis1]);
  return permute(a, order);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) internal::shape_error(op, "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) internal::shape_error(op, "axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    internal::require_defined(op, p);
    if (p.rank() != first.size()) internal::shape_mismatch(op, first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) internal::shape_mismatch(op, first, p.shape());
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    offsets->push_back(offset);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  Tensor<T> result(out_shape, std::move(out));
  std::vector<const Tensor<T>*> inputs;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    nodes.push_back(p.node());
  }
  detail::attach<T>(op, inputs, result, [=, on = result.node()] {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (!n->requires_grad) continue;
      const std::size_t row = n->shape[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        const T* g = on->grad.data() + o * out_row + (*offsets)[i];
        T* dst = n->grad.data() + o * row;
        for (std::size_t j = 0; j < row; ++j) dst[j] += g[j];
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  constexpr std::string_view op = "slice";
  internal::require_defined(op, a);
  if (axis >= a.rank() || begin >= end || end > a.shape()[axis]) {
    internal::shape_error(op, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                  std::to_string(axis) + " invalid for " + to_string(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  const std::size_t in_row = a.shape()[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  std::vector<T> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * in_row + begin * inner, out_row, out.data() + o * out_row);
  }
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [=, on = result.node()] {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* g = on->grad.data() + o * out_row;
      T* dst = an->grad.data() + o * in_row + begin * inner;
      for (std::size_t j = 0; j < out_row; ++j) dst[j] += g[j];
    }
  });
  return result;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  constexpr std::string_view op = "broadcast_to";
  internal::require_defined(op, a);
  if (shape.size() < a.rank()) internal::shape_mismatch(op, a.shape(), shape);
  const std::size_t off = shape.size() - a.rank();
  std::vector<std::size_t> strides(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = a.rank(); d-- > 0;) {
    const std::size_t ad = a.shape()[d];
    if (ad != 1 && ad != shape[d + off]) internal::shape_mismatch(op, a.shape(), shape);
    strides[d + off] = ad == 1 ? 0 : s;
    s *= ad;
  }
  const std::size_t n = numel(shape);
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < shape[d]) break;
      src -= strides[d] * shape[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[(*map)[i]];
  Tensor<T> result(shape, std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, map, on = result.node()] {
    for (std::size_t i = 0; i < map->size(); ++i) an->grad[(*map)[i]] += on->grad[i];
  });
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  constexpr std::string_view op = "sum";
  internal::require_defined(op, a);
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> result = Tensor<T>::scalar(acc);
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, on = result.node()] {
    const T g = on->grad[0];
    for (auto& v : an->grad) v += g;
  });
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  constexpr std::string_view op = "mean";
  internal::require_defined(op, a);
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T count = static_cast<T>(a.numel());
  Tensor<T> result = Tensor<T>::scalar(acc / count);
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [an, count, on = result.node()] {
    const T g = on->grad[0] / count;
    for (auto& v : an->grad) v += g;
  });
  return result;
}

namespace {

template <typename T>
Tensor<T> reduce_axis(std::string_view op, const Tensor<T>& a, std::size_t axis, bool keepdim, bool average) {
  internal::require_defined(op, a);
  if (axis >= a.rank()) internal::shape_error(op, "axis out of range for " + to_string(a.shape()));
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  const std::size_t len = a.shape()[axis];
  const T scale = average ? T(1) / static_cast<T>(len) : T(1);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  }
  std::vector<T> out(outer * inner, T(0));
  const T* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const T* row = src + (o * len + l) * inner;
      T* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  }
  if (average) {
    for (auto& v : out) v *= scale;
  }
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> an = a.node();
  detail::attach<T>(op, {&a}, result, [=, on = result.node()] {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* g = on->grad.data() + o * inner;
      for (std::size_t l = 0; l < len; ++l) {
        T* dst = an->grad.data() + (o * len + l) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i] * scale;
      }
    }
  });
  return result;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  return reduce_axis("sum_axis", a, axis, keepdim, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  return reduce_axis("mean_axis", a, axis, keepdim, true);
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, const Shape& ids_shape) {
  constexpr std::string_view op = "embedding";
  internal::require_defined(op, table);
  if (table.rank() != 2) internal::shape_error(op, "table must be 2-D, got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) internal::shape_error(op, "ids do not match shape " + to_string(ids_shape));
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  for (int id : *idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw NumericError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(rows) +
                         " rows");
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  std::vector<T> out(ids.size() * width);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::copy_n(table.data().data() + static_cast<std::size_t>((*idx)[i]) * width, width, out.data() + i * width);
  }
  Tensor<T> result(out_shape, std::move(out));
  NodePtr<T> tn = table.node();
  detail::attach<T>(op, {&table}, result, [=, on = result.node()] {
    for (std::size_t i = 0; i < idx->size(); ++i) {
      T* dst = tn->grad.data() + static_cast<std::size_t>((*idx)[i]) * width;
      const T* g = on->grad.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
    }
  });
  return result;
}

#define KISS_SHAPE_OPS(T)                                                                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                              \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);                    \
  template Tensor<T> transpose<T>(const Tensor<T>&, std::size_t, std::size_t);                         \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                            \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                \
  template Tensor<T> broadcast_to<T>(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                         \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t, bool);                                      \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                        \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t, bool);                                     \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const int>, const Shape&);

KISS_INSTANTIATE_FLOATING(KISS_SHAPE_OPS)

}  // namespace kiss::ops
