#ifndef PRENET_AUTOGRAD_HPP
#define PRENET_AUTOGRAD_HPP

#include "prenet/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <unordered_set>
#include <utility>
#include <vector>

namespace prenet {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

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

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  std::optional<Tensor<Scalar>> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  Tensor<Scalar>& grad_buffer() {
    if (!grad) grad.emplace(value.shape());
    return *grad;
  }
  /// Gradient sink of parent i, or nullptr when that parent is a constant.
  Tensor<Scalar>* parent_grad(std::size_t i) {
    Node& p = *parents[i];
    return p.requires_grad ? &p.grad_buffer() : nullptr;
  }
};

/// Shared handle to a node of the recorded computation graph.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->grad.has_value(); }
  const Tensor<Scalar>& grad() const {
    if (!node_->grad) throw std::logic_error("variable has no gradient");
    return *node_->grad;
  }
  void zero_grad() { node_->grad.reset(); }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }

  Var detach() const { return Var(node_->value, false); }

  /// Reverse-mode sweep seeded with ones (or with `seed` when given).
  void backward(std::optional<Tensor<Scalar>> seed = std::nullopt) const;

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Records an op result. The backward closure is dropped when no input
/// requires grad or recording is disabled.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || (v.defined() && v.requires_grad());
  if (!needs) return Var<Scalar>(std::move(value), false);
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->parents.reserve(inputs.size());
  for (auto& v : inputs) {
    if (!v.defined()) v = Var<Scalar>(Tensor<Scalar>(), false);
    node->parents.push_back(v.shared());
  }
  node->backward = std::move(backward);
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
void Var<Scalar>::backward(std::optional<Tensor<Scalar>> seed) const {
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<Scalar>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Tensor<Scalar>& g = node_->grad_buffer();
  if (seed) {
    if (!seed->same_shape(g)) throw std::invalid_argument("backward seed shape mismatch");
    g.array() += seed->array();
  } else {
    g.array() += Scalar(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward && n->grad) n->backward(*n);
  }
}

}  // namespace prenet

#endif  // PRENET_AUTOGRAD_HPP
