#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sg2im/tensor.hpp"

namespace sg2im::ag {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    return grad;
  }
  bool has_grad() const { return grad.shape == value.shape && !grad.data.empty(); }
};

// Handle to a node in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t dim(std::size_t i) const { return node_->value.shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  // Gradient; zeros if backward never reached this node.
  Tensor<T> grad() const { return node_->has_grad() ? node_->grad : Tensor<T>(node_->value.shape); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

// Builds a result node; records parents and the backward closure only when needed.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = std::any_of(parents.begin(), parents.end(), [](const Var<T>& p) { return p.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward_fn = std::move(fn);
    }
  }
  return Var<T>(std::move(n));
}

// Parent gradient buffer, or nullptr if the parent does not take gradients.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

}  // namespace sg2im::ag
