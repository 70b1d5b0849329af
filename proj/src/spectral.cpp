#include "equichk/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace equichk {

Index SpectralSummary::null_count(double tol) const {
  return static_cast<Index>((eigenvalues.array().abs() <= tol).count());
}

double SpectralSummary::reconstruction_error(const Eigen::MatrixXd& a) const {
  const Eigen::MatrixXd r = eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  return (a - r).norm() / std::max(a.norm(), 1e-300);
}

double SpectralSummary::orthonormality_error() const {
  const Index n = eigenvectors.cols();
  if (n == 0) return 0.0;
  return (eigenvectors.transpose() * eigenvectors - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff();
}

SpectralSummary symmetric_eigen(const Eigen::MatrixXd& input, int max_sweeps) {
  if (input.rows() != input.cols()) throw Error(ErrorCode::InvalidParams, "eigendecomposition needs a square matrix");
  if (!input.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "matrix has non-finite entries");
  const Index n = input.rows();
  const double scale = input.norm();
  if ((input - input.transpose()).norm() > 1e-8 * std::max(scale, 1e-300)) {
    throw Error(ErrorCode::InvalidParams, "matrix is not symmetric");
  }
  Eigen::MatrixXd a = 0.5 * (input + input.transpose());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);

  auto off_norm = [&] {
    double s = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  SpectralSummary out;
  const double target = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max<Index>(n, 1)) * scale;
  int sweep = 0;
  while (off_norm() > target) {
    if (sweep == max_sweeps) {
      throw Error(ErrorCode::NotConverged, "Jacobi iteration did not converge in " + std::to_string(max_sweeps) +
                                               " sweeps");
    }
    ++sweep;
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- JᵀAJ with J the (p, q) plane rotation.
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) > a(j, j); });
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    out.eigenvalues[k] = a(src, src);
    out.eigenvectors.col(k) = v.col(src);
  }
  out.lambda_max = n > 0 ? out.eigenvalues[0] : 0.0;
  out.sweeps = sweep;
  return out;
}

SpectralSummary symmetric_eigen(const Tensord& a, int max_sweeps) { return symmetric_eigen(to_matrix(a), max_sweeps); }

Eigen::VectorXd power_top_eigenvalues(const Eigen::MatrixXd& a, Index k, std::uint64_t seed, int max_iterations,
                                      double tol) {
  if (a.rows() != a.cols()) throw Error(ErrorCode::InvalidParams, "power iteration needs a square matrix");
  const Index n = a.rows();
  if (k < 0 || k > n) throw Error(ErrorCode::IndexOutOfRange, "requested more eigenvalues than the dimension");
  // The shift makes B positive semidefinite so the dominant eigenvalue is the algebraic maximum.
  const double shift = a.norm();
  Eigen::MatrixXd b = a + shift * Eigen::MatrixXd::Identity(n, n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::VectorXd out(k);
  for (Index j = 0; j < k; ++j) {
    Eigen::VectorXd x(n);
    for (Index i = 0; i < n; ++i) x[i] = normal(rng);
    x.normalize();
    double mu = x.dot(b * x);
    bool converged = false;
    for (int it = 0; it < max_iterations; ++it) {
      Eigen::VectorXd y = b * x;
      const double ny = y.norm();
      if (ny == 0.0) {
        mu = 0.0;
        converged = true;
        break;
      }
      x = y / ny;
      const double next = x.dot(b * x);
      if (std::abs(next - mu) <= tol * std::max(1.0, std::abs(next))) {
        mu = next;
        converged = true;
        break;
      }
      mu = next;
    }
    if (!converged) throw Error(ErrorCode::NotConverged, "power iteration did not converge");
    out[j] = mu - shift;
    b -= mu * x * x.transpose();
  }
  return out;
}

}  // namespace equichk
