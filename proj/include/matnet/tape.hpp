#pragma once

#include "matnet/tensor.hpp"

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace matnet {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<Scalar>& value() const { return tape->value(*this); }
  Shape shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode differentiation graph. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using Array = typename TensorT::Array;
  /// Receives the tape and the gradient of the node's output; must
  /// accumulate into the gradients of the node's inputs.
  using BackwardFn = std::function<void(Tape&, const TensorT&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(TensorT value, bool requires_grad = true);
  Var<Scalar> constant(TensorT value) { return leaf(std::move(value), false); }

  /// Records an op result. The backward closure is dropped when no input
  /// requires a gradient.
  Var<Scalar> record(const char* op, TensorT value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward);
  Var<Scalar> record(const char* op, TensorT value, const std::vector<Var<Scalar>>& inputs,
                     BackwardFn backward);

  const TensorT& value(Var<Scalar> v) const { return nodes_[check(v)].value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_[check(v)].requires_grad; }

  /// Gradient accumulator of a node, zero-initialised on first touch.
  Array& grad_buffer(Var<Scalar> v);
  void accumulate(Var<Scalar> v, const Array& g);

  /// Accumulates d(root)/d(node) for every node reachable from root.
  void backward(Var<Scalar> root);

  bool has_grad(Var<Scalar> v) const { return !nodes_[check(v)].grad.empty(); }
  /// Gradient of a node after backward(); zeros when unreachable.
  TensorT grad(Var<Scalar> v) const;

  /// Drops every node; outstanding handles become stale.
  void reset();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::size_t check(Var<Scalar> v) const;
  Var<Scalar> push(const char* op, TensorT value, bool requires_grad, BackwardFn backward);

  // A deque keeps value references valid while later ops are recorded.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace matnet
