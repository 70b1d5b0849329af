#pragma once

// Training dynamics with charge tracking: RK4 gradient flow, gradient
// descent, Euler–Maruyama stochastic gradient flow over a finite dataset.

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "equichk/models.hpp"
#include "equichk/objective.hpp"
#include "equichk/transforms.hpp"

namespace equichk {

using Series = std::vector<std::pair<std::string, std::vector<double>>>;

struct Trajectory {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;
  std::vector<double> losses;
  Series charges;
  /// grad_norm and theta_sq always; output and sharpness_bound for scalar
  /// single-datum objectives; orthogonality.<name> for gradient descent.
  Series diagnostics;
  Index steps = 0;
  Index halvings = 0;

  const std::vector<double>& charge(const std::string& name) const;
  const std::vector<double>& diagnostic(const std::string& name) const;
  bool has_diagnostic(const std::string& name) const;
  /// max_t |C(t) − C(0)| / (1 + |C(0)|).
  double charge_drift(const std::string& name) const;
};

/// Record every ⌈(T/dt)/1000⌉ steps; the final state is always recorded.
Index record_stride(double T, double dt);

/// Classical RK4 on θ̇ = −∇L. A step that raises the loss is split in two
/// halves, recursively up to 20 times, before StepFailure. With
/// stop_grad_norm > 0 the run ends early once ‖∇L‖ drops to that level.
Trajectory gradient_flow(const Objective& objective, const Eigen::VectorXd& theta0, double T, double dt,
                         const std::vector<Charge>& charges = {}, double stop_grad_norm = 0.0);

struct GdResult {
  Trajectory trajectory;
  /// max over steps and symmetries of ‖X Δθ‖ / (‖Δθ‖ ‖X‖).
  double max_orthogonality = 0.0;
  /// Consecutive updates reverse direction with non-shrinking length.
  bool oscillation = false;
};

GdResult gradient_descent(const Objective& objective, const Eigen::VectorXd& theta0, double eta, Index steps,
                          const std::vector<Charge>& charges = {}, const std::vector<TransformPtr>& symmetries = {});

struct NormGrowthReport {
  bool classified = false;  // false: NeverCorrectlyClassified
  double t0 = 0.0;
  bool monotone = false;
  double max_rel_gap = 0.0;  // −⟨θ, ∇L⟩ against −m ℓ'(y) y at every record
  /// ½ Δ‖θ‖² between records against Simpson's rule on −m ℓ'(y) y.
  double integrated_rel_gap = 0.0;
  bool pass = false;
  std::string note;
};

/// Trajectory must come from gradient_flow on `model` and `loss`.
NormGrowthReport norm_growth_check(const Model& model, const Loss& loss, const Trajectory& trajectory,
                                   double tolerance = 1e-7);

struct CovarianceReport {
  Eigen::MatrixXd Sigma;
  double trace = 0.0;
  Eigen::VectorXd grad_trace;     // 2(E[∇²L_x ∇L_x] − ∇²L ∇L)
  Eigen::VectorXd grad_trace_fd;  // central differences of Tr Σ
  double fd_rel_gap = 0.0;
};

CovarianceReport noise_covariance(const DatasetObjective& objective, const Eigen::VectorXd& theta,
                                  bool with_fd = true);

struct NoiseModel {
  enum class Mode { exact_sde, minibatch };
  Mode mode = Mode::exact_sde;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

NoiseModel::Mode parse_noise_mode(const std::string& s);
std::string to_string(NoiseModel::Mode m);

struct Ensemble {
  std::vector<Trajectory> trajectories;
  NoiseModel noise;
  double T = 0.0;
  double dt = 0.0;
  /// σ for exact_sde; √(dt/2) for minibatch.
  double effective_sigma = 0.0;
  std::vector<std::string> warnings;
};

/// Worker count from EQUICHK_THREADS, else hardware concurrency.
unsigned worker_count();

/// exact_sde: θ ← θ − ∇L dt + σ B ξ √(2 dt) with BBᵀ = Σ(θ).
/// minibatch: θ ← θ − ∇L_x dt with x ~ μ.
Ensemble sgf(const DatasetObjective& objective, const Eigen::VectorXd& theta0, const NoiseModel& noise, double T,
             double dt, Index ensemble, const std::vector<Charge>& charges = {});

struct DriftTheory {
  double inner_product = 0.0;  // −(σ²/2)⟨∇C, ∂Tr Σ/∂θ⟩
  double trace = 0.0;          // σ² Tr(Σ ∇²C)
  double euler_bias = 0.0;     // (dt/2)⟨∇L, ∇²C ∇L⟩ for a quadratic charge
  double scale = 0.0;
};

DriftTheory drift_theory(const DatasetObjective& objective, const Charge& charge, const Eigen::VectorXd& theta,
                         double sigma, double dt = 0.0);

struct DriftReport {
  Index trajectories = 0;
  double empirical = 0.0;
  double standard_error = 0.0;
  double theory = 0.0;           // trace form averaged over the ensemble-mean path
  double theory_pathwise = 0.0;  // trace form averaged along every trajectory
  double euler_correction = 0.0; // (dt/2)<∇L, C''∇L> averaged along every trajectory
  double compensated_residual = 0.0;        // mean of ΔC/T minus the per-path prediction
  double compensated_standard_error = 0.0;
  double max_identity_gap = 0.0;
  double bias_budget = 0.0;      // zero when every step is recorded
  double band = 0.0;             // 3 standard errors + bias budget + roundoff floor
  bool identity_pass = false;
  bool empirical_pass = false;
  bool pass = false;
};

/// Throws InsufficientEnsemble below 100 trajectories.
DriftReport noether_drift_check(const Ensemble& ensemble, const Charge& charge, const DatasetObjective& objective);

}  // namespace equichk
