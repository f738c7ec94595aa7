#pragma once

#include "deepthal/nn/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

namespace deepthal::nn {

/// One value in a reverse-mode tape. Gradients are allocated lazily.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return grad.data.size() == value.data.size() && grad.data.size() > 0; }

  Tensor<Scalar>& ensure_grad() {
    if (!has_grad()) grad = Tensor<Scalar>::zeros(value.shape);
    return grad;
  }
  void zero_grad() { grad = Tensor<Scalar>(); }
};

template <typename Scalar>
using Var = std::shared_ptr<Node<Scalar>>;

inline thread_local bool grad_enabled = true;

/// Disables tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
  ~NoGradGuard() { grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  return n;
}

template <typename Scalar>
Var<Scalar> parameter(Tensor<Scalar> value) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

/// Creates an interior node; it requires grad iff any parent does.
template <typename Scalar>
Var<Scalar> make_node(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                      std::function<void(Node<Scalar>&)> backward_fn) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  if (!grad_enabled) return n;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

/// Back-propagates from a scalar root (seed gradient 1) or from a
/// caller-supplied seed gradient. Interior gradients are released after use.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  // Iterative post-order DFS; graphs can be deep.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  if (seed) {
    root->ensure_grad().data += seed->data;
  } else {
    root->ensure_grad().data.setOnes();
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward_fn && n->has_grad()) {
      n->backward_fn(*n);
      n->zero_grad();
    }
  }
}

}  // namespace deepthal::nn
