#include "rfc/autodiff.hpp"

#include <unordered_set>

#include "rfc/errors.hpp"

namespace rfc {

namespace detail {

void accumulate(Node& n, const Tensor& g) {
  if (!n.grad_set) {
    n.grad = Tensor(n.value.shape());
    n.grad_set = true;
  }
  check_dim(n.grad.same_shape(g), "gradient shape mismatch in accumulate");
  n.grad.array() += g.array();
}

}  // namespace detail

Var constant(Tensor t) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

Var leaf(Tensor t) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var param_var(Parameter& p) {
  auto n = std::make_shared<detail::Node>();
  n->value = p.value;
  n->requires_grad = true;
  n->bound = &p;
  return Var(std::move(n));
}

void backward(const Var& loss) {
  check_dim(loss.defined() && loss.value().size() == 1,
            "backward: loss must be a defined size-1 tensor");
  using detail::Node;

  // Iterative post-order DFS; reversing it yields a topological order with
  // the loss first, leaves last.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_set<Node*> visited;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing trainable feeds the loss
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      // Only requires_grad subgraphs matter; constants terminate the walk.
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Tensor::full({1}, 1.0);
  root->grad_set = true;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad_set) continue;  // no gradient reached this node
    if (n->backprop) n->backprop(*n);
    if (n->bound) n->bound->grad.array() += n->grad.array();
  }
}

}  // namespace rfc
