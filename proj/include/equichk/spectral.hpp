#pragma once

// Symmetric eigendecomposition by cyclic Jacobi rotations, plus a shifted
// power iteration used to cross-check the top eigenvalue.

#include <Eigen/Core>

#include <cstdint>

#include "equichk/tensor.hpp"

namespace equichk {

struct SpectralSummary {
  Eigen::VectorXd eigenvalues;   // descending
  Eigen::MatrixXd eigenvectors;  // column k pairs with eigenvalues[k]
  double lambda_max = 0.0;
  int sweeps = 0;

  /// Number of eigenvalues with |λ_k| ≤ tol.
  Index null_count(double tol) const;

  /// ‖A − Σ λ_k u_k u_kᵀ‖_F / max(‖A‖_F, 1e-300).
  double reconstruction_error(const Eigen::MatrixXd& a) const;

  /// max |UᵀU − I|.
  double orthonormality_error() const;
};

/// Throws InvalidParams for non-square or visibly asymmetric input and
/// NotConverged when `max_sweeps` is exhausted.
SpectralSummary symmetric_eigen(const Eigen::MatrixXd& a, int max_sweeps = 60);

SpectralSummary symmetric_eigen(const Tensord& a, int max_sweeps = 60);

/// Top `k` eigenvalues (algebraic, descending) by power iteration on A + sI
/// with Hotelling deflation.
Eigen::VectorXd power_top_eigenvalues(const Eigen::MatrixXd& a, Index k, std::uint64_t seed = 7,
                                      int max_iterations = 20000, double tol = 1e-13);

}  // namespace equichk
