#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rfc/tensor.hpp"

namespace rfc {

// Trainable value: weights live in `value`, reverse-mode results accumulate
// into `grad` (same shape, zeroed between steps).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

namespace detail {

// One vertex of the dynamically built computation graph. `backprop` reads
// this node's grad and accumulates into the parents' grads; it is written by
// hand for every kernel and runs in reverse topological order, so a node's
// grad is complete before its backprop fires.
struct Node {
  Tensor value;
  Tensor grad;               // allocated lazily on first accumulation
  bool grad_set = false;
  bool requires_grad = false;
  Parameter* bound = nullptr;  // leaf tied to a model parameter
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
};

void accumulate(Node& n, const Tensor& g);

}  // namespace detail

// Cheap handle over a graph node. Copy freely; ops are free functions.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient of the last backward() through this node; zeros if none flowed.
  const Tensor& grad() const {
    if (!node_->grad_set) {
      node_->grad = Tensor(node_->value.shape());
      node_->grad_set = true;
    }
    return node_->grad;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Leaf constructors.
Var constant(Tensor t);             // no gradient tracking
Var leaf(Tensor t);                 // tracked; read grad() after backward
Var param_var(Parameter& p);        // tracked; backward adds into p.grad

// Reverse-mode sweep from a scalar (size-1) loss. Each call re-walks the
// graph reachable from `loss`; graphs are built fresh per step so gradients
// are never double-counted. Reductions inside kernels run in index order,
// which keeps repeated runs bit-identical.
void backward(const Var& loss);

}  // namespace rfc
