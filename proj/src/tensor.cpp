#include "equichk/tensor.hpp"

#include <Eigen/LU>

#include <algorithm>

namespace equichk {

Tensord make_tensor(const Shape& shape, std::span<const double> data) {
  if (static_cast<Index>(data.size()) != shape.size()) {
    throw Error(ErrorCode::LengthMismatch, "shape " + shape.to_string() + " needs " +
                                               std::to_string(shape.size()) + " entries, got " +
                                               std::to_string(data.size()));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteEntry, "tensor data must be finite");
  }
  VectorX<double> copy = Eigen::Map<const VectorX<double>>(data.data(), static_cast<Index>(data.size()));
  return Tensord(shape, std::move(copy));
}

namespace {

void require_square(const Tensord& a) {
  if (a.rank() != 2 || a.shape()[0] != a.shape()[1]) {
    throw Error(ErrorCode::AxisMismatch, "expected a square rank-2 tensor, got " + a.shape().to_string());
  }
}

}  // namespace

double reciprocal_condition(const Tensord& a) {
  require_square(a);
  const MatrixX<double> m = to_matrix(a);
  if (m.lpNorm<Eigen::Infinity>() == 0.0) return 0.0;
  const Eigen::PartialPivLU<MatrixX<double>> lu(m);
  const double rc = lu.rcond();
  return std::isfinite(rc) ? rc : 0.0;
}

Tensord invert_square(const Tensord& a, double rcond_threshold) {
  require_square(a);
  const MatrixX<double> m = to_matrix(a);
  if (m.lpNorm<Eigen::Infinity>() == 0.0) throw Error(ErrorCode::Singular, "zero matrix");
  const Eigen::PartialPivLU<MatrixX<double>> lu(m);
  const double rc = lu.rcond();
  if (!(rc >= rcond_threshold)) {
    throw Error(ErrorCode::Singular, "reciprocal condition " + std::to_string(rc));
  }
  return from_matrix(lu.inverse());
}

double norm(const Tensord& t) { return t.data().norm(); }

double relative_difference(const Tensord& a, const Tensord& b, double floor) {
  const double denom = std::max({norm(a), norm(b), floor});
  return norm(a - b) / denom;
}

}  // namespace equichk
