#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kiss {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes do not conform. The message names the op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a non-finite value is detected (debug checks) or a value is out of
/// its legal range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Enables scanning op inputs for NaN/Inf. Off by default.
void set_debug_checks(bool enabled);
bool debug_checks();

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

std::uint64_t next_node_id();

/// Dense row-major array. Copies share storage; values are treated as immutable
/// once an op has produced them. Parameters are the exception and are updated in
/// place by the optimizer through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Size along `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  std::uint64_t id() const { return node_->id; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  /// Deep copy of the values with no gradient tracking.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return Tensor<U>(node_->shape, std::move(out), node_->requires_grad);
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// The computation record. Nodes are appended in execution order, which makes
/// the list topologically sorted; backward replays it in exact reverse.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  using BackwardFn = std::function<void()>;

  struct Record {
    std::string_view op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };

  void record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every backward rule in reverse order.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  static Tape* active();

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the recording target on the current thread for the lifetime of
/// the scope. Without an active tape ops compute values only.
template <typename T>
class ActiveTape {
 public:
  explicit ActiveTape(Tape<T>& tape);
  ~ActiveTape();
  ActiveTape(const ActiveTape&) = delete;
  ActiveTape& operator=(const ActiveTape&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on the current thread.
template <typename T>
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
Tape<T>*& active_tape_slot();

/// Registers `backward` on the active tape when any input requires a gradient.
/// Returns true when recorded; `output` is then marked requires_grad.
template <typename T>
bool attach(std::string_view op, const std::vector<const Tensor<T>*>& inputs, Tensor<T>& output,
            std::function<void()> backward);

template <typename T>
bool wants_grad(const std::vector<const Tensor<T>*>& inputs);

template <typename T>
void check_finite(std::string_view op, const Tensor<T>& t);

}  // namespace detail

}  // namespace kiss
