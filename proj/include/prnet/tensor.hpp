#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every differentiable operation returns a Tensor whose node keeps its inputs
// alive and a closure that pushes the node's gradient into those inputs.
// backward() orders the reachable nodes topologically and runs the closures
// once each. Nothing is recorded while a NoGradGuard is active, so inference
// keeps no intermediate activations alive.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "prnet/errors.hpp"

namespace prnet {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{});
    return grad.data();
  }
};

}  // namespace detail

/// True unless a NoGradGuard is alive on the calling thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values) {
    return Tensor(std::move(shape), std::move(values), false);
  }

  /// A leaf that collects gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    return Tensor(std::move(shape), std::move(values), true);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> values(element_count(shape), T{});
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T value) { return constant({1}, {value}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->value; }
  /// In-place access for optimizers and initializers; not tracked by autodiff.
  std::span<T> mutable_data() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + detail::shape_string(shape()));
    }
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Same values, no history.
  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an operation result. History is kept only when recording is on
  /// and some input needs a gradient.
  static Tensor from_op(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(values), false);
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  Tensor(Shape shape, std::vector<T> values, bool requires_grad)
      : node_(std::make_shared<Node>()) {
    if (element_count(shape) != values.size()) {
      throw DimensionError("shape " + detail::shape_string(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("zero extent in shape " + detail::shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node> node_;
};

/// Accumulates d(loss)/d(x) into every tensor with requires_grad reachable from loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? detail::shape_string(loss.shape()) : std::string("<none>")));
  }
  using Node = detail::Node<T>;
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    node->grad_buffer();
    if (node->backward) node->backward(*node);
  }
}

namespace detail {

template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? p->grad_buffer() : nullptr;
}

}  // namespace detail
}  // namespace prnet
