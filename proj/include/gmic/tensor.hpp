// Dense N-dimensional array used for images, feature maps and parameters.
#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmic {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Thrown when tensor extents do not agree with what an operation expects.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for invalid hyperparameters or configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces NaN/Inf or otherwise fails numerically.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

template <typename Scalar>
class Tensor {
 public:
  using ScalarType = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(ArrayX<Scalar>::Zero(shape_numel(shape_))) {}
  Tensor(Shape shape, Scalar fill)
      : shape_(std::move(shape)), data_(ArrayX<Scalar>::Constant(shape_numel(shape_), fill)) {}
  Tensor(Shape shape, ArrayX<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor payload of " + std::to_string(data_.size()) + " values does not match shape " +
                           shape_string(shape_));
  }
  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Eigen::Map<const ArrayX<Scalar>>(values.begin(), static_cast<Index>(values.size()))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, Scalar value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  ArrayX<Scalar>& array() { return data_; }
  const ArrayX<Scalar>& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Row-major multi-index access.
  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// Reinterpret the payload as a row-major matrix (no copy).
  RowMatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return RowMatrixMap<Scalar>(data_.data(), rows, cols);
  }
  ConstRowMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstRowMatrixMap<Scalar>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " does not match tensor " +
                           shape_string(shape_));
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) off = off * shape_[axis++] + i;
    return off;
  }
  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      throw DimensionError("cannot view " + shape_string(shape_) + " as " + std::to_string(rows) + "x" +
                           std::to_string(cols) + " matrix");
  }

  Shape shape_;
  ArrayX<Scalar> data_;
};

}  // namespace gmic
