#pragma once

#include <algorithm>
#include <atomic>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lstsr/error.hpp"

namespace lstsr::ad {

/// NCHW extents.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t id = detail::next_node_id();
  std::size_t backward_visits = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle onto a graph node. Copies alias the same storage.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value.assign(shape.numel(), v);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape.numel())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw GraphError("item() on a non-scalar tensor");
    return node_->value[0];
  }

  Tensor detach_copy() const {
    return from(node_->shape, node_->value, false);
  }

  std::uint64_t id() const { return node_->id; }
  std::size_t backward_visits() const { return node_->backward_visits; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates the output node of an op. Records inputs and the backward closure
/// only when recording is enabled and some input needs a gradient.
template <std::floating_point T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const Tensor<T>* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  if (needs) {
    node->requires_grad = true;
    for (const Tensor<T>* in : inputs)
      if (in->defined()) node->inputs.push_back(in->node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Every reachable node is visited
/// exactly once, in reverse topological order, and gradients accumulate over
/// fan-out. The graph is released afterwards; leaf gradients remain.
/// Returns the number of nodes whose backward closure ran.
template <std::floating_point T>
std::size_t backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) throw GraphError("backward requires a scalar loss");
  Node<T>& root = loss.node();
  if (root.consumed) throw GraphError("graph already consumed by a previous backward");
  if (!root.requires_grad) throw GraphError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS -> topological order (inputs before consumers).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->consumed) throw GraphError("graph already consumed by a previous backward");
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.ensure_grad()[0] += T(1);
  std::size_t ran = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn) continue;
    if (node->grad.empty()) node->ensure_grad();
    node->backward_fn(*node);
    ++node->backward_visits;
    ++ran;
  }
  for (Node<T>* node : order) {
    if (!node->backward_fn) continue;  // leaves keep their gradients
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
  return ran;
}

}  // namespace lstsr::ad
