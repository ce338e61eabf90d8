#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace matnet {

using Index = Eigen::Index;

/// Raised when a checked operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on any shape contract violation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Process-wide switch for finite-value and data-domain assertions.
bool checked_mode();
void set_checked_mode(bool on);

/// Keeps freed buffers in the process heap rather than returning them to
/// the OS. Training reallocates the same large tensors every step, and
/// without this each step pays for fresh page faults. No-op off glibc.
void retain_heap_memory();

/// Dimensions of a rank 1-4 tensor, outermost first.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims);
  explicit Shape(std::vector<Index> dims);

  int rank() const { return static_cast<int>(dims_.size()); }
  Index operator[](int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }
  Index numel() const;
  const std::vector<Index>& dims() const { return dims_; }

  /// Product of every dimension after the first.
  Index inner() const;
  Shape with_dim(int axis, Index value) const;

  std::string str() const;
  bool operator==(const Shape& other) const { return dims_ == other.dims_; }
  bool operator!=(const Shape& other) const { return dims_ != other.dims_; }

 private:
  void validate() const;
  std::vector<Index> dims_;
};

/// Dense row-major tensor. Layout is (batch, feature, height, width) for
/// rank 4 and (batch, feature) for rank 2.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_.numel())) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor constant(const Shape& shape, Scalar value) {
    return Tensor(shape, Array::Constant(shape.numel(), value));
  }
  static Tensor from(const Shape& shape, std::initializer_list<Scalar> values) {
    Array data(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data[i++] = v;
    return Tensor(shape, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index dim(int axis) const { return shape_[axis]; }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index c, Index y, Index x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar at(Index n, Index c, Index y, Index x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  Tensor reshaped(const Shape& shape) const { return Tensor(shape, data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_;
  Array data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace matnet
