#include <algorithm>
#include <cmath>

#include "kiss/ops.hpp"
#include "ops_internal.hpp"

namespace kiss::ops {

using internal::NodePtr;

namespace {

// Maps every output element to the flat offsets of its two broadcast operands.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t n = numel(out);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0;
    std::size_t ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, oa, ob);
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        oa += stride_a[d];
        ob += stride_b[d];
        if (idx[d] < out[d]) break;
        oa -= stride_a[d] * out[d];
        ob -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t d = in.size(); d-- > 0;) {
    strides[d + off] = in[d] == 1 ? 0 : s;
    s *= in[d];
  }
  return strides;
}

BroadcastPlan plan_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t da = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    const std::size_t db = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) internal::shape_mismatch(op, a, b);
    p.out[d] = std::max(da, db);
  }
  p.stride_a = broadcast_strides(a, p.out);
  p.stride_b = broadcast_strides(b, p.out);
  return p;
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(std::string_view op, Binary kind, const Tensor<T>& a, const Tensor<T>& b) {
  internal::require_defined(op, a);
  internal::require_defined(op, b);
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  std::vector<T> out(numel(plan->out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  switch (kind) {
    case Binary::kAdd:
      plan->for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] + pb[ib]; });
      break;
    case Binary::kSub:
      plan->for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] - pb[ib]; });
      break;
    case Binary::kMul:
      plan->for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] * pb[ib]; });
      break;
  }
  Tensor<T> result(plan->out, std::move(out));
  NodePtr<T> an = a.node();
  NodePtr<T> bn = b.node();
  NodePtr<T> on = result.node();
  detail::attach<T>(op, {&a, &b}, result, [an, bn, on, plan, kind] {
    const T* g = on->grad.data();
    const bool ga = an->requires_grad;
    const bool gb = bn->requires_grad;
    T* da = ga ? an->grad.data() : nullptr;
    T* db = gb ? bn->grad.data() : nullptr;
    const T* va = an->value.data();
    const T* vb = bn->value.data();
    plan->for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::kAdd:
          if (da) da[ia] += g[i];
          if (db) db[ib] += g[i];
          break;
        case Binary::kSub:
          if (da) da[ia] += g[i];
          if (db) db[ib] -= g[i];
          break;
        case Binary::kMul:
          if (da) da[ia] += g[i] * vb[ib];
          if (db) db[ib] += g[i] * va[ia];
          break;
      }
    });
  });
  return result;
}

// Unary op whose derivative is expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(std::string_view op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  internal::require_defined(op, a);
  detail::check_finite(op, a);
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  Tensor<T> result(a.shape(), std::move(out));
  NodePtr<T> an = a.node();
  NodePtr<T> on = result.node();
  detail::attach<T>(op, {&a}, result, [an, on, deriv] {
    const std::size_t n = an->value.size();
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * deriv(an->value[i], on->value[i]);
  });
  return result;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", Binary::kAdd, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", Binary::kSub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", Binary::kMul, a, b);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary("mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary("relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      "sigmoid", a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

#define KISS_ELEMENTWISE(T)                                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);             \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);             \
  template Tensor<T> relu<T>(const Tensor<T>&);                      \
  template Tensor<T> tanh<T>(const Tensor<T>&);                      \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                   \
  template Tensor<T> exp<T>(const Tensor<T>&);                       \
  template Tensor<T> log<T>(const Tensor<T>&);

KISS_INSTANTIATE_FLOATING(KISS_ELEMENTWISE)

}  // namespace kiss::ops
