#pragma once

// Tape-free dynamic reverse-mode differentiation. Every op result is a Node
// holding its value, the inputs it was computed from and a closure that pushes
// the node's gradient into those inputs. backward() walks the graph in reverse
// topological order, so a node's gradient is complete before it propagates.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fam/tensor.hpp"

namespace fam {

bool grad_enabled() noexcept;
void set_grad_enabled(bool enabled) noexcept;

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> value)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()) {}

  const std::string& name() const noexcept { return name_; }
  Tensor<T>& value() noexcept { return value_; }
  const Tensor<T>& value() const noexcept { return value_; }
  Tensor<T>& grad() noexcept { return grad_; }
  const Tensor<T>& grad() const noexcept { return grad_; }
  std::size_t size() const noexcept { return value_.size(); }

  void zero_grad() { grad_.fill(T{0}); }

 private:
  std::string name_;
  Tensor<T> value_;
  Tensor<T> grad_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  const Tensor<T>& input_value(std::size_t i) const { return inputs[i]->value; }
  bool input_wants_grad(std::size_t i) const { return inputs[i]->requires_grad; }
  Tensor<T>& input_grad(std::size_t i) { return inputs[i]->grad_buffer(); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  // Differentiable leaf; its gradient stays on the node.
  static Var leaf(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = grad_enabled();
    return Var(std::move(n));
  }

  // Leaf whose gradient is accumulated into the parameter after backward.
  static Var bind(Parameter<T>& p) {
    auto n = std::make_shared<Node<T>>();
    n->value = p.value();
    if (grad_enabled()) {
      n->requires_grad = true;
      n->op = "param";
      Parameter<T>* target = &p;
      n->backward_fn = [target](Node<T>& self) {
        Tensor<T>& g = target->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      };
    }
    return Var(std::move(n));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  // Gradient after backward(); zeros if nothing flowed into this node.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Records an op result. The closure runs during backward with the result node;
// it reads node.grad and accumulates into the inputs that want gradients.
template <class T, class Fn>
Var<T> record(const char* op, Tensor<T> value, std::vector<Var<T>> inputs, Fn&& backward_fn) {
  require_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  bool wants = false;
  if (grad_enabled()) {
    for (const Var<T>& v : inputs) wants = wants || v.requires_grad();
  }
  if (wants) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const Var<T>& v : inputs) n->inputs.push_back(v.shared());
    n->backward_fn = std::forward<Fn>(backward_fn);
  }
  return Var<T>(std::move(n));
}

template <class T>
Var<T> detach(const Var<T>& v) {
  return Var<T>::constant(v.value());
}

template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <class T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
  if (!root.requires_grad()) return;
  if (seed.shape() != root.shape()) {
    throw ShapeError("backward seed " + shape_string(seed.shape()) + " for root " +
                     shape_string(root.shape()));
  }
  const std::vector<Node<T>*> order = topological_order(root.node());
  Tensor<T>& g = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " +
                     shape_string(root.shape()));
  }
  backward(root, Tensor<T>(root.shape(), T{1}));
}

}  // namespace fam
