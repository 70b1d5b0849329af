#pragma once

// Dense tensors with curried-composition semantics.
//
// A tensor of shape (n, s) is a linear map R^n -> T(s). Storage is row-major
// (first axis slowest). `compose(g, f)` contracts the LAST axis of f with the
// FIRST axis of g; `compose_k(g, f, k)` contracts f's last axis with g's k-th
// axis and splices f's leading axes in at position k.
//
// Gradients follow the same convention: for f: R^d -> R^c, the Jacobian tensor
// has shape (d, c) with entry [i, j] = d f_j / d theta_i.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "equichk/errors.hpp"

namespace equichk {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> axes) : axes_(axes) { validate(); }
  explicit Shape(std::vector<Index> axes) : axes_(std::move(axes)) { validate(); }

  Index rank() const { return static_cast<Index>(axes_.size()); }
  Index size() const {
    return std::accumulate(axes_.begin(), axes_.end(), Index{1}, std::multiplies<>());
  }
  Index operator[](Index i) const { return axes_[static_cast<std::size_t>(i)]; }
  const std::vector<Index>& axes() const { return axes_; }
  bool is_scalar() const { return axes_.empty(); }

  /// Axes [first, last) as a new shape.
  Shape slice(Index first, Index last) const {
    return Shape(std::vector<Index>(axes_.begin() + first, axes_.begin() + last));
  }

  friend Shape concat(const Shape& a, const Shape& b) {
    std::vector<Index> axes = a.axes_;
    axes.insert(axes.end(), b.axes_.begin(), b.axes_.end());
    return Shape(std::move(axes));
  }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string to_string() const {
    std::string out = "(";
    for (std::size_t i = 0; i < axes_.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(axes_[i]);
    }
    return out + ")";
  }

 private:
  void validate() const {
    for (Index a : axes_) {
      if (a < 1) throw Error(ErrorCode::SizeMismatch, "axis lengths must be >= 1");
    }
  }

  std::vector<Index> axes_;
};

template <typename Scalar>
class Tensor {
 public:
  using Storage = VectorX<Scalar>;

  /// Scalar zero.
  Tensor() : data_(Storage::Zero(1)) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw Error(ErrorCode::LengthMismatch, "tensor of shape " + shape_.to_string() +
                                                 " needs " + std::to_string(shape_.size()) +
                                                 " entries, got " + std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) {
    const Index n = shape.size();
    return Tensor(std::move(shape), Storage::Zero(n));
  }

  static Tensor scalar(Scalar value) {
    Storage s(1);
    s[0] = value;
    return Tensor(Shape{}, std::move(s));
  }

  /// The (n, n) identity map.
  static Tensor identity(Index n) {
    Tensor t = zeros(Shape{n, n});
    for (Index i = 0; i < n; ++i) t.data_[i * n + i] = Scalar(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return shape_.rank(); }
  Index size() const { return data_.size(); }
  const Storage& data() const { return data_; }
  Storage& data() { return data_; }

  Scalar operator()(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }
  Scalar& operator()(std::initializer_list<Index> idx) { return data_[offset(idx)]; }

  std::vector<Scalar> flatten() const { return {data_.data(), data_.data() + data_.size()}; }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o);
    data_ += o.data_;
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o);
    data_ -= o.data_;
    return *this;
  }
  Tensor& operator*=(Scalar s) {
    data_ *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator-(Tensor a) { return a *= Scalar(-1); }
  friend Tensor operator*(Tensor a, Scalar s) { return a *= s; }
  friend Tensor operator*(Scalar s, Tensor a) { return a *= s; }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != shape_.rank()) {
      throw Error(ErrorCode::IndexOutOfRange, "index rank does not match tensor rank");
    }
    Index off = 0;
    Index axis = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[axis]) throw Error(ErrorCode::IndexOutOfRange, "index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  void require_same_shape(const Tensor& o) const {
    if (!(shape_ == o.shape_)) {
      throw Error(ErrorCode::AxisMismatch,
                  "shape " + shape_.to_string() + " vs " + o.shape_.to_string());
    }
  }

  Shape shape_;
  Storage data_;
};

using Tensord = Tensor<double>;

/// Copies `data` into a new tensor; rejects wrong lengths and non-finite entries.
Tensord make_tensor(const Shape& shape, std::span<const double> data);

template <typename Scalar>
Tensor<Scalar> from_vector(const VectorX<Scalar>& v) {
  return Tensor<Scalar>(Shape{v.size()}, v);
}

/// Rank-2 tensor whose [i, j] entry is m(i, j).
template <typename Derived>
Tensor<typename Derived::Scalar> from_matrix(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  RowMatrixX<Scalar> rm = m;
  VectorX<Scalar> flat = Eigen::Map<const VectorX<Scalar>>(rm.data(), rm.size());
  return Tensor<Scalar>(Shape{m.rows(), m.cols()}, std::move(flat));
}

template <typename Scalar>
MatrixX<Scalar> to_matrix(const Tensor<Scalar>& t) {
  if (t.rank() != 2) throw Error(ErrorCode::AxisMismatch, "to_matrix needs a rank-2 tensor");
  return Eigen::Map<const RowMatrixX<Scalar>>(t.data().data(), t.shape()[0], t.shape()[1]);
}

template <typename Scalar>
VectorX<Scalar> to_vector(const Tensor<Scalar>& t) {
  return t.data();
}

/// g ∘_k f: contracts f's last axis with g's k-th axis (1-based).
template <typename Scalar>
Tensor<Scalar> compose_k(const Tensor<Scalar>& g, const Tensor<Scalar>& f, Index k) {
  if (g.rank() == 0) {
    if (k != 1) throw Error(ErrorCode::IndexOutOfRange, "scalar left operand has no axis " + std::to_string(k));
    return f * g.data()[0];
  }
  if (k < 1 || k > g.rank()) {
    throw Error(ErrorCode::IndexOutOfRange, "axis " + std::to_string(k) + " of rank-" +
                                                std::to_string(g.rank()) + " tensor");
  }
  if (f.rank() == 0) throw Error(ErrorCode::AxisMismatch, "right operand is a scalar");

  const Shape& gs = g.shape();
  const Shape& fs = f.shape();
  const Index contracted = gs[k - 1];
  if (fs[fs.rank() - 1] != contracted) {
    throw Error(ErrorCode::AxisMismatch, "cannot compose " + gs.to_string() + " with " +
                                             fs.to_string() + " at axis " + std::to_string(k));
  }
  const Shape before = gs.slice(0, k - 1);
  const Shape after = gs.slice(k, gs.rank());
  const Shape lead = fs.slice(0, fs.rank() - 1);
  const Index n_before = before.size();
  const Index n_after = after.size();
  const Index n_lead = lead.size();

  Tensor<Scalar> out = Tensor<Scalar>::zeros(concat(concat(before, lead), after));
  using ConstMap = Eigen::Map<const RowMatrixX<Scalar>>;
  using Map = Eigen::Map<RowMatrixX<Scalar>>;
  const ConstMap fm(f.data().data(), n_lead, contracted);
  for (Index a = 0; a < n_before; ++a) {
    const ConstMap ga(g.data().data() + a * contracted * n_after, contracted, n_after);
    Map oa(out.data().data() + a * n_lead * n_after, n_lead, n_after);
    oa.noalias() = fm * ga;
  }
  return out;
}

/// g ∘ f: contracts f's last axis with g's first axis.
template <typename Scalar>
Tensor<Scalar> compose(const Tensor<Scalar>& g, const Tensor<Scalar>& f) {
  return compose_k(g, f, 1);
}

/// Reciprocal 1-norm condition estimate of a square rank-2 tensor (0 when singular).
double reciprocal_condition(const Tensord& a);

/// Inverse of an (n, n) tensor viewed as a linear map; throws Singular when the
/// reciprocal condition estimate is below `rcond_threshold`.
Tensord invert_square(const Tensord& a, double rcond_threshold = 1e-12);

double norm(const Tensord& t);

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
double relative_difference(const Tensord& a, const Tensord& b, double floor = 1e-12);

}  // namespace equichk
