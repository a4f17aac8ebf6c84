#pragma once

// Define-by-run reverse-mode differentiation.
//
// A Tape records every primitive as it executes. Values live on the tape and
// are addressed through Var handles; backward() replays the recorded ops in
// exact reverse order. One tape serves one forward/backward pass and is not
// thread-safe; independent tapes may run concurrently.
//
// Broadcasting follows the trailing-dimension rule: shapes are aligned on
// the right and dimensions of size 1 (or missing leading dimensions) stretch.
// Gradients of stretched operands are summed over the stretched axes.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "ni/tensor.hpp"

namespace ni::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input (parameter or input data).
  Var leaf(Array value, bool requires_grad = true);
  /// A value that never receives a gradient.
  Var constant(Array value);

  const Array& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a one-element loss. Clears previous gradients.
  void backward(Var loss);
  /// Gradient of the last backward() w.r.t. leaf v; zeros when v was not reached.
  Array grad(Var v) const;

  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // Primitive authoring interface used by the op implementations.
  Var record(const char* op, Array value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Array& grad_of(std::size_t id) const { return grads_[id]; }
  /// Gradient buffer for node id, zero-allocated on first use.
  Array& grad_buffer(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Array& value_of(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Array value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  // deque: values stay addressable while later ops are recorded.
  std::deque<Node> nodes_;
  std::vector<Array> grads_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Errors with NumericError if any divisor element is exactly zero.
Var div(Var a, Var b);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);
Var exp(Var a);
Var neg(Var a);

enum class BinaryKind { add, sub, mul, div };
enum class UnaryKind { exp, neg };
Var elementwise(Var a, Var b, BinaryKind kind);
Var elementwise(Var a, UnaryKind kind);

// ---- linear algebra ----
/// a[..., k] x b[k, n] -> [..., n]; leading axes of a are treated as rows.
Var matmul(Var a, Var b);
/// Batched product over identical leading axes: a[..., m, k] x b[..., k, n],
/// or b[..., n, k] when transpose_b is set.
Var batched_matmul(Var a, Var b, bool transpose_b = false);
/// x[..., k] x w[k, n] + bias[n].
Var linear(Var x, Var w, Var bias);
/// Modulated linear map: y[g, ...] = (x[g, ...] * m[g]) w + bias for every
/// group g along the leading axis. x[G, ..., k], m[G, k], w[k, n], bias[n].
Var mod_linear(Var x, Var m, Var w, Var bias);

// ---- reductions ----
enum class ReduceKind { sum, mean };
Var reduce(Var a, ReduceKind kind, std::size_t axis, bool keepdim = false);
Var sum(Var a, std::size_t axis, bool keepdim = false);
Var mean(Var a, std::size_t axis, bool keepdim = false);
/// Sum / mean of every element, shape [1].
Var sum_all(Var a);
Var mean_all(Var a);

// ---- normalization and activations ----
Var softmax(Var a, std::size_t axis);
constexpr double kLayerNormEps = 1e-5;
/// Normalizes the last axis; gamma and beta have that axis' length.
Var layer_norm(Var a, Var gamma, Var beta);
/// Tanh approximation 0.5 a (1 + tanh(sqrt(2/pi) (a + 0.044715 a^3))).
Var gelu(Var a);
/// Unit L2 norm along the last axis; a zero row is a NumericError.
Var l2_normalize(Var a);

// ---- structure ----
Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& perm);
Var broadcast_to(Var a, Shape shape);
/// Elements [begin, end) along axis.
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(std::span<const Var> parts, std::size_t axis);
/// out[g, j] = a[g, index[j]] for a[G, L]; index -1 produces 0. -> [G, index.size()]
Var gather_columns(Var a, std::vector<long> index);

/// Shape produced by broadcasting a against b (ShapeError when incompatible).
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace ni::ad
