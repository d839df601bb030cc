#pragma once

#include <algorithm>
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

#include "bnft/errors.hpp"

namespace bnft {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "absent"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <class T>
class Tape;

// Dense row-major array that optionally participates in reverse-mode
// differentiation. Copies share the underlying node.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor(Shape{1}, {value}, requires_grad); }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access; meant for leaves (optimiser updates, checkpoint loads).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->parents.empty(); }

  // Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Reverse topological ordering of the subgraph that feeds a root tensor.
// Only nodes with requires_grad participate.
template <class T>
class Tape {
 public:
  using NodePtr = typename Tensor<T>::NodePtr;

  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    // Iterative post-order DFS: parents land before children.
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const auto& parent = node->parents[next++];
        if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    tape.root_ = root.node();
    return tape;
  }

  // Topological order: every node appears after all of its recorded parents.
  const std::vector<NodePtr>& order() const { return order_; }

  // Seeds d(root)/d(root) = 1 and visits every node once in reverse order.
  // `visit` is an observation hook for tests.
  void replay(const std::function<void(const detail::Node<T>&)>& visit = {}) const {
    if (!root_) return;
    root_->grad.assign(root_->data.size(), T(1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const auto& node = *it;
      if (visit) visit(*node);
      if (node->backward && !node->grad.empty()) node->backward(*node);
    }
  }

 private:
  NodePtr root_;
  std::vector<NodePtr> order_;
};

template <class T>
void Tensor<T>::backward() const {
  if (!requires_grad()) throw StateError("backward() on a tensor that does not require grad");
  if (size() != 1) throw ShapeError("backward() requires a scalar, got shape " + to_string(shape()));
  Tape<T>::record(*this).replay();
}

}  // namespace bnft
