#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualstream/error.hpp"

namespace dualstream {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

/// Shared handle to a node of the recorded graph. Copies alias the same storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values) {
    if (values.size() != shape_numel(shape)) {
      fail(ErrorCode::ShapeMismatch, "buffer of " + std::to_string(values.size()) +
                                         " values does not fill shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T fill) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, fill));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor scalar(T v) { return from({}, {v}); }

  /// A trainable leaf with an allocated gradient buffer.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }

  T item() const {
    if (numel() != 1) fail(ErrorCode::ShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), T(0));
    if (!on) node_->grad.clear();
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Value copy without history.
  Tensor detach() const { return from(shape(), node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op output; history is recorded only when grad mode is on and
/// some input requires a gradient.
template <typename T, typename Backward>
Tensor<T> record(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                 Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T, typename Backward>
Tensor<T> record(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                 Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Reverse sweep from a scalar loss. Interior gradients are recomputed on each
/// call; leaf gradients accumulate until zeroed.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || !loss.requires_grad()) {
    fail(ErrorCode::NoGraph, "loss was not produced by recorded operations");
  }
  if (loss.numel() != 1) {
    fail(ErrorCode::ShapeMismatch, "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (!node->is_leaf()) {
      node->grad.assign(node->value.size(), T(0));
    } else if (node->grad.size() != node->value.size()) {
      node->grad.assign(node->value.size(), T(0));
    }
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace dualstream
