#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace muie {

/// NCHW extents. Every tensor in the library is rank 4; vectors and matrices
/// use trailing singleton extents ([C,1,1,1], [Dout,Din,1,1]).
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t plane() const { return h * w; }
  constexpr std::int64_t operator[](int axis) const {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major NCHW array with W fastest. Value semantics.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw ShapeError("negative extent in " + shape.str());
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> values) : shape_(shape), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape.numel())
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match " +
                       shape.str());
  }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  const Scalar& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  /// Batch item `n` viewed as a (C x H*W) row-major matrix.
  MatrixMap matrix(std::int64_t n) {
    return MatrixMap(data() + n * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }
  ConstMatrixMap matrix(std::int64_t n) const {
    return ConstMatrixMap(data() + n * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }
  /// Leading extent against the flattened rest: [n, c*h*w].
  ConstMatrixMap as_matrix() const {
    return ConstMatrixMap(data(), shape_.n, shape_.c * shape_.plane());
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (Scalar v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_{};
  std::vector<Scalar> data_;
};

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                    [](Scalar x, Scalar y) { return std::memcmp(&x, &y, sizeof(Scalar)) == 0; });
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  Scalar m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace muie
