#include "ni/autodiff.hpp"

#include <string>

namespace ni::ad {

const Array& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Array value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf value is not finite");
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Array value) { return leaf(std::move(value), false); }

Var Tape::record(const char* op, Array value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
  bool any = false;
  for (std::size_t in : inputs) any = any || nodes_[in].requires_grad;
  Node node{std::move(value), std::move(inputs), any ? std::move(backward) : BackwardFn{}, any};
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Array& Tape::grad_buffer(std::size_t id) {
  Array& g = grads_[id];
  if (g.size() == 0) g = Array(nodes_[id].value.shape(), 0.0);
  return g;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("loss belongs to a different tape");
  if (value(loss).size() != 1) {
    throw ShapeError("backward needs a one-element loss, got " + shape_string(value(loss).shape()));
  }
  grads_.assign(nodes_.size(), Array{});
  grads_[loss.id] = Array(value(loss).shape(), 1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (grads_[id].size() == 0 || !nodes_[id].backward) continue;
    nodes_[id].backward(*this, id);
    // Interior gradients are consumed; only leaf gradients are reported.
    if (!nodes_[id].inputs.empty()) grads_[id] = Array{};
  }
}

Array Tape::grad(Var v) const {
  if (v.id < grads_.size() && grads_[v.id].size() != 0) return grads_[v.id];
  return Array(value(v).shape(), 0.0);
}

}  // namespace ni::ad
