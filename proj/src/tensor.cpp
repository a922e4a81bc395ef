#include "kiss/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kiss {

namespace {
std::atomic<bool> g_debug_checks{false};
std::atomic<std::uint64_t> g_node_counter{0};
}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

std::uint64_t next_node_id() { return ++g_node_counter; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) : node_(std::make_shared<TensorNode<T>>()) {
  if (kiss::numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->id = next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> v(kiss::numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[k]) throw ShapeError("at: index out of range for " + to_string(shape()));
    flat = flat * node_->shape[k] + i;
    ++k;
  }
  return node_->value[flat];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output, BackwardFn backward) {
  records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
  for (auto& r : records_) {
    r.output->ensure_grad();
    for (auto& in : r.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
  }
  auto& seed = loss.node();
  seed->ensure_grad();
  seed->grad[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return detail::active_tape_slot<T>();
}

template <typename T>
ActiveTape<T>::ActiveTape(Tape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
  detail::active_tape_slot<T>() = &tape;
}

template <typename T>
ActiveTape<T>::~ActiveTape() {
  detail::active_tape_slot<T>() = previous_;
}

template <typename T>
NoGrad<T>::NoGrad() : previous_(detail::active_tape_slot<T>()) {
  detail::active_tape_slot<T>() = nullptr;
}

template <typename T>
NoGrad<T>::~NoGrad() {
  detail::active_tape_slot<T>() = previous_;
}

namespace detail {

template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
bool wants_grad(const std::vector<const Tensor<T>*>& inputs) {
  if (active_tape_slot<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool attach(std::string_view op, const std::vector<const Tensor<T>*>& inputs, Tensor<T>& output,
            std::function<void()> backward) {
  if (!wants_grad(inputs)) return false;
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  nodes.reserve(inputs.size());
  for (const auto* t : inputs) {
    if (t->defined()) nodes.push_back(t->node());
  }
  output.set_requires_grad(true);
  active_tape_slot<T>()->record(op, std::move(nodes), output.node(), std::move(backward));
  return true;
}

template <typename T>
void check_finite(std::string_view op, const Tensor<T>& t) {
  if (!debug_checks()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input value in tensor of shape " + to_string(t.shape()));
    }
  }
}

template Tape<float>*& active_tape_slot<float>();
template Tape<double>*& active_tape_slot<double>();
template bool wants_grad<float>(const std::vector<const Tensor<float>*>&);
template bool wants_grad<double>(const std::vector<const Tensor<double>*>&);
template bool attach<float>(std::string_view, const std::vector<const Tensor<float>*>&, Tensor<float>&,
                            std::function<void()>);
template bool attach<double>(std::string_view, const std::vector<const Tensor<double>*>&, Tensor<double>&,
                             std::function<void()>);
template void check_finite<float>(std::string_view, const Tensor<float>&);
template void check_finite<double>(std::string_view, const Tensor<double>&);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class ActiveTape<float>;
template class ActiveTape<double>;
template class NoGrad<float>;
template class NoGrad<double>;

}  // namespace kiss
