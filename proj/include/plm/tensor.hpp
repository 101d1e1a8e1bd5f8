#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace plm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense row-major array. An empty shape is a scalar holding one element.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : data_(Array::Zero(1)) {}
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(numel(shape_))) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }
  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    if (static_cast<Index>(values.size()) != numel(shape_)) {
      throw DimensionError("initializer length does not match shape " + to_string(shape_));
    }
    data_.resize(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  /// Storage left unset; only for outputs that are written in full before any read.
  static Tensor uninitialized(Shape shape) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array(n));
  }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }
  static Tensor scalar(Scalar value) { return filled({}, value); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const {
    const Index a = axis < 0 ? axis + rank() : axis;
    if (a < 0 || a >= rank()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
    }
    return shape_[static_cast<std::size_t>(a)];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  /// View as a row-major [rows, cols] matrix; cols defaults to the trailing extent.
  MatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap<Scalar>(data_.data(), rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap<Scalar>(data_.data(), rows, cols);
  }
  MatrixMap<Scalar> matrix() { return matrix(size() / trailing(), trailing()); }
  ConstMatrixMap<Scalar> matrix() const { return matrix(size() / trailing(), trailing()); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Index trailing() const { return shape_.empty() || shape_.back() == 0 ? 1 : shape_.back(); }
  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw DimensionError("cannot view " + to_string(shape_) + " as " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    }
  }

  Shape shape_;
  Array data_;
};

}  // namespace plm
