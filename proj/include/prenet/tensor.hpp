#ifndef PRENET_TENSOR_HPP
#define PRENET_TENSOR_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major n-d array. The last axis is contiguous, so an NCHW tensor
/// viewed as (N*C, H*W) is a plain row-major matrix.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : data_(Array::Zero(1)) {}
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor data size does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_(0) = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    return shape_.at(static_cast<std::size_t>(axis));
  }
  Index size() const { return data_.size(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Index i) { return data_(i); }
  Scalar operator[](Index i) const { return data_(i); }

  template <typename... I>
  Scalar& at(I... idx) {
    return data_(offset({static_cast<Index>(idx)...}));
  }
  template <typename... I>
  Scalar at(I... idx) const {
    return data_(offset({static_cast<Index>(idx)...}));
  }

  Scalar item() const {
    if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_string(shape_));
    return data_(0);
  }

  /// Row-major (rows, cols) view of the whole buffer.
  MatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap<Scalar>(data(), rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap<Scalar>(data(), rows, cols);
  }
  /// View with the last axis as columns.
  MatrixMap<Scalar> matrix() { return matrix(rows_for_last(), cols_for_last()); }
  ConstMatrixMap<Scalar> matrix() const { return matrix(rows_for_last(), cols_for_last()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void fill(Scalar v) { data_.setConstant(v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) off = off * shape_[axis++] + i;
    return off;
  }
  Index cols_for_last() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows_for_last() const {
    const Index c = cols_for_last();
    return c == 0 ? 0 : size() / c;
  }
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                  " does not fit tensor " + shape_string(shape_));
  }

  Shape shape_;
  Array data_;
};

}  // namespace prenet

#endif  // PRENET_TENSOR_HPP
