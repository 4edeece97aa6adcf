#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xstitch/errors.hpp"

namespace xstitch {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major N-d array. Feature maps are laid out as
/// (batch, channels, height, width); vectors as (batch, features).
///
/// A default-constructed tensor is the empty tensor: rank 0 and no storage.
/// Every other tensor has extents >= 1 and size() == product(shape()).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Zero(shape_product(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  bool empty() const { return shape_.empty(); }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  const Shape& shape() const { return shape_; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// View as (dim(0), size / dim(0)).
  MatrixMap matrix() { return MatrixMap(data_.data(), shape_.at(0), data_.size() / shape_.at(0)); }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), shape_.at(0), data_.size() / shape_.at(0));
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    if (empty()) return {};
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
           std::equal(a.data_.data(), a.data_.data() + a.data_.size(), b.data_.data());
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (Index e : shape) {
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
    }
  }

  Shape shape_;
  Vector data_;
};

template <typename Scalar>
Tensor<Scalar> zeros_like(const Tensor<Scalar>& t) {
  return t.empty() ? Tensor<Scalar>() : Tensor<Scalar>(t.shape());
}

/// Channel extent used by cross-stitch units: dim 1 of a feature map, or
/// the feature count of a (batch, features) activation.
template <typename Scalar>
Index channel_count(const Tensor<Scalar>& t) {
  if (t.rank() < 2) throw ShapeError("activation must have a batch and a channel axis");
  return t.dim(1);
}

/// Number of scalars per (example, channel) pair.
template <typename Scalar>
Index channel_stride(const Tensor<Scalar>& t) {
  return t.size() / (t.dim(0) * t.dim(1));
}

}  // namespace xstitch
