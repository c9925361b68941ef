#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "aesb/errors.hpp"

namespace aesb {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Extents in (batch, channels, height, width) order.
using Shape = std::array<Index, 4>;

inline Index element_count(const Shape& s) { return s[0] * s[1] * s[2] * s[3]; }

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s[0] << 'x' << s[1] << 'x' << s[2] << 'x' << s[3];
  return os.str();
}

/// Dense NCHW tensor with an optional gradient slot of identical shape.
///
/// Storage is contiguous row-major over (n, c, h, w); a single sample is a
/// channels x (height*width) row-major matrix, which is what the convolution
/// and fully-connected kernels consume.
template <typename Scalar>
class Tensor {
 public:
  using Vector = VectorX<Scalar>;
  using SampleMap = Eigen::Map<MatrixR<Scalar>>;
  using ConstSampleMap = Eigen::Map<const MatrixR<Scalar>>;

  Tensor() : shape_{0, 0, 0, 0} {}

  explicit Tensor(const Shape& shape) : shape_(shape) {
    check_extents(shape);
    values_ = Vector::Zero(element_count(shape));
  }

  Tensor(const Shape& shape, Vector values) : shape_(shape), values_(std::move(values)) {
    check_extents(shape);
    if (values_.size() != element_count(shape)) {
      throw ShapeError("tensor value count " + std::to_string(values_.size()) +
                       " does not match shape " + to_string(shape));
    }
  }

  static Tensor constant(const Shape& shape, Scalar value) {
    Tensor t(shape);
    t.values_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index batch() const { return shape_[0]; }
  Index channels() const { return shape_[1]; }
  Index height() const { return shape_[2]; }
  Index width() const { return shape_[3]; }
  Index plane_size() const { return shape_[2] * shape_[3]; }
  Index sample_size() const { return shape_[1] * shape_[2] * shape_[3]; }
  Index size() const { return values_.size(); }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Sample n viewed as a channels x (height*width) matrix.
  SampleMap sample(Index n) {
    return SampleMap(values_.data() + n * sample_size(), shape_[1], plane_size());
  }
  ConstSampleMap sample(Index n) const {
    return ConstSampleMap(values_.data() + n * sample_size(), shape_[1], plane_size());
  }

  /// Channel c of sample n viewed as a height x width matrix.
  SampleMap plane(Index n, Index c) {
    return SampleMap(values_.data() + (n * shape_[1] + c) * plane_size(), shape_[2], shape_[3]);
  }
  ConstSampleMap plane(Index n, Index c) const {
    return ConstSampleMap(values_.data() + (n * shape_[1] + c) * plane_size(), shape_[2],
                          shape_[3]);
  }

  bool all_finite() const { return values_.allFinite(); }

  /// Throws NumericError naming `what` when any value is NaN or infinite.
  void require_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value in tensor");
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(values_.size());
    return *grad_;
  }
  const std::optional<Vector>& grad_slot() const { return grad_; }
  void clear_grad() { grad_.reset(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

 private:
  static void check_extents(const Shape& s) {
    for (Index e : s) {
      if (e < 0) throw ShapeError("negative tensor extent in " + to_string(s));
    }
  }

  Shape shape_;
  Vector values_;
  std::optional<Vector> grad_;
};

}  // namespace aesb
