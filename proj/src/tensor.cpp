#include "matnet/tensor.hpp"
#include "matnet/tape.hpp"

#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace matnet {

namespace {
std::atomic<bool> g_checked{false};
}

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

void retain_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

Shape::Shape(std::initializer_list<Index> dims) : dims_(dims) { validate(); }
Shape::Shape(std::vector<Index> dims) : dims_(std::move(dims)) { validate(); }

void Shape::validate() const {
  if (dims_.empty() || dims_.size() > 4) {
    throw ShapeError("tensor rank must be 1-4, got " + std::to_string(dims_.size()));
  }
  for (Index d : dims_) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive: " + str());
  }
}

Index Shape::numel() const {
  if (dims_.empty()) return 0;
  Index n = 1;
  for (Index d : dims_) n *= d;
  return n;
}

Index Shape::inner() const {
  Index n = 1;
  for (std::size_t i = 1; i < dims_.size(); ++i) n *= dims_[i];
  return n;
}

Shape Shape::with_dim(int axis, Index value) const {
  auto dims = dims_;
  dims.at(static_cast<std::size_t>(axis)) = value;
  return Shape(std::move(dims));
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ')';
  return os.str();
}

// Tape

template <typename Scalar>
std::size_t Tape<Scalar>::check(Var<Scalar> v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::logic_error("stale or foreign tape handle");
  }
  return static_cast<std::size_t>(v.id);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(const char* op, TensorT value, bool requires_grad,
                               BackwardFn backward) {
  if (checked_mode() && !value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::leaf(TensorT value, bool requires_grad) {
  return push("leaf", std::move(value), requires_grad, nullptr);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(const char* op, TensorT value,
                                 std::initializer_list<Var<Scalar>> inputs, BackwardFn backward) {
  bool any = false;
  for (const auto& in : inputs) any = any || nodes_[check(in)].requires_grad;
  return push(op, std::move(value), any, std::move(backward));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(const char* op, TensorT value,
                                 const std::vector<Var<Scalar>>& inputs, BackwardFn backward) {
  bool any = false;
  for (const auto& in : inputs) any = any || nodes_[check(in)].requires_grad;
  return push(op, std::move(value), any, std::move(backward));
}

template <typename Scalar>
typename Tape<Scalar>::Array& Tape<Scalar>::grad_buffer(Var<Scalar> v) {
  Node& node = nodes_[check(v)];
  if (node.grad.empty()) node.grad = TensorT::zeros(node.value.shape());
  return node.grad.array();
}

template <typename Scalar>
void Tape<Scalar>::accumulate(Var<Scalar> v, const Array& g) {
  if (!nodes_[check(v)].requires_grad) return;
  grad_buffer(v) += g;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> root) {
  const std::size_t r = check(root);
  if (nodes_[r].value.size() != 1) {
    throw ShapeError("backward root must be scalar, got " + nodes_[r].value.shape().str());
  }
  if (backward_done_) throw std::logic_error("backward already run on this tape; reset first");
  backward_done_ = true;
  if (!nodes_[r].requires_grad) return;
  grad_buffer(root).setOnes();
  for (std::size_t i = r + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    if (checked_mode() && !node.grad.all_finite()) {
      throw NumericError("non-finite gradient during backward");
    }
    node.backward(*this, node.grad);
  }
}

template <typename Scalar>
typename Tape<Scalar>::TensorT Tape<Scalar>::grad(Var<Scalar> v) const {
  const Node& node = nodes_[check(v)];
  if (node.grad.empty()) return TensorT::zeros(node.value.shape());
  return node.grad;
}

template <typename Scalar>
void Tape<Scalar>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace matnet
