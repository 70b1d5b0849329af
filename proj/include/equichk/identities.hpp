#pragma once

// Left-side / right-side residual checks for the equivariance identities.
//
// Every check evaluates both sides through separate code paths: the left side
// differentiates L directly, the right side is assembled from loss, model and
// transform derivative callbacks.

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "equichk/diff.hpp"
#include "equichk/models.hpp"
#include "equichk/objective.hpp"
#include "equichk/spectral.hpp"
#include "equichk/transforms.hpp"

namespace equichk {

inline constexpr double kExactTolerance = 1e-7;
inline constexpr double kFdTolerance = 1e-4;
inline constexpr double kDenominatorFloor = 1e-12;
/// Dropped (green/blue) terms must vanish to this fraction of the term scale.
inline constexpr double kTermDropTolerance = 1e-12;

struct ReportContext {
  std::string model;
  std::string transform;
  std::string loss;
  std::string mode = "exact";
  std::uint64_t seed = 0;
  std::vector<double> lambda;
  std::string label;
};

struct IdentityReport {
  std::string check_name;
  std::string paper_anchor;
  double lhs_norm = 0.0;
  double rhs_norm = 0.0;
  double abs_residual = 0.0;
  /// abs_residual / max(lhs_norm, rhs_norm, scale, 1e-12).
  double rel_residual = 0.0;
  /// Magnitude of the ingredients; guards against cancellation to zero.
  double scale = 0.0;
  double tolerance = kExactTolerance;
  bool pass = false;
  bool skipped = false;
  std::string note;
  ReportContext context;
  std::vector<std::pair<std::string, double>> extras;

  double extra(const std::string& key) const;
};

IdentityReport make_report(const std::string& check, const Tensord& lhs, const Tensord& rhs, double scale,
                           double tolerance);

/// Worst part decides the residual fields; passes only if every part passes.
/// Part residuals are kept as extras.
IdentityReport combine_reports(const std::string& check, const std::vector<IdentityReport>& parts, double tolerance);

struct CheckOptions {
  DiffConfig diff;
  double tolerance = kExactTolerance;
  ReportContext context;
};

IdentityReport check_first_order(const Model& model, const Loss& loss, const Transformation& t,
                                 const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                 const CheckOptions& opts = {});

/// Five right-hand terms of the second-order identities, in order:
/// ∇²ℓ/Y, −∇_λ∇_θH (or −∇²_λH), ∇²_θH, ∇_λ∇_yG (or ∇²_λG), ∇²_yG.
struct SecondOrderTerms {
  Tensord lhs;
  std::vector<Tensord> terms;
  Tensord rhs() const;
  Tensord reduced_rhs(bool symmetry, bool linear) const;
};

SecondOrderTerms second_action_terms(const Model& model, const Loss& loss, const Transformation& t,
                                     const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                     const DiffConfig& cfg = {});
SecondOrderTerms second_quadratic_terms(const Model& model, const Loss& loss, const Transformation& t,
                                        const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                        const DiffConfig& cfg = {});

IdentityReport check_second_action(const Model& model, const Loss& loss, const Transformation& t,
                                   const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                   const CheckOptions& opts = {});
IdentityReport check_second_quadratic(const Model& model, const Loss& loss, const Transformation& t,
                                      const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                      const CheckOptions& opts = {});

struct HomogeneityReports {
  IdentityReport action;     // ∇²Lθ against a multiple of ∇L
  IdentityReport quadratic;  // ⟨θ, ∇²Lθ⟩ against the closed form
};

/// Needs c = 1 and a declared degree. Throws DegenerateLoss when ℓ'(y) = 0.
HomogeneityReports check_homogeneity_specialization(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                                    const CheckOptions& opts = {});

/// At ℓ'(y) = 0: tests ‖∇²Lθ‖ ≤ 1e-9·‖∇²L‖·‖θ‖ and records the closed form
/// ∇²Lθ = m y ℓ''(y) ∇f as extras.
IdentityReport check_degenerate_branch(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                       const CheckOptions& opts = {});

/// α(θ) = (m y ℓ''/ℓ' + m − 1)⁻¹; throws DegenerateLoss when undefined.
double alignment_alpha(const Model& model, const Loss& loss, const Eigen::VectorXd& theta);

IdentityReport check_eigen_alignment(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                     const CheckOptions& opts = {});

struct SharpnessResult {
  double bound = 0.0;
  double lambda_max = 0.0;
  double rayleigh = 0.0;
  double power_lambda_max = 0.0;
  IdentityReport report;
};

SharpnessResult sharpness_bound(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                const CheckOptions& opts = {});

/// Throws NotFixedPoint unless ‖H(θ, λ₀) − θ‖ ≤ 1e-12·max(1, ‖θ‖).
IdentityReport check_discrete_first(const Model& model, const Loss& loss, const Transformation& t,
                                    const Eigen::VectorXd& theta, const CheckOptions& opts = {});
IdentityReport check_discrete_second(const Model& model, const Loss& loss, const Transformation& t,
                                     const Eigen::VectorXd& theta, const CheckOptions& opts = {});

/// Gradient and block conditions for P = I − 2OOᵀ; extras carry both the
/// conjugation residual ‖P∇²LP − ∇²L‖ and the block-form equivalent.
IdentityReport check_mirror(const Model& model, const Loss& loss, const Eigen::MatrixXd& O,
                            const Eigen::VectorXd& theta, const CheckOptions& opts = {});

/// Random V = UW per trial; softmax losses also compare with Var_p(Vh).
IdentityReport check_last_layer_alignment(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                          Index trials = 20, std::uint64_t seed = 0, const CheckOptions& opts = {});

struct StationaryReport {
  double grad_norm = 0.0;
  std::vector<std::pair<std::string, double>> kappa;  // ‖∇²L∘X‖ / ‖∇L‖ per transform
  Index direction_rank = 0;
  Index null_count = 0;
  double null_tolerance = 1e-7;
  SpectralSummary spectrum;
  IdentityReport report;
};

/// Throws NotConverged if ‖∇L(θ*)‖ > eps_stat.
StationaryReport stationary_null_count(const Objective& objective, const std::vector<TransformPtr>& symmetries,
                                       const Eigen::VectorXd& theta_star, double eps_stat = 1e-10,
                                       double null_tolerance = 1e-7, double rank_tolerance = 1e-8,
                                       const CheckOptions& opts = {});

// ---------------------------------------------------------------------------
// Suites

struct Mutation {
  std::string derivative;
  double rel = 0.01;
  std::uint64_t seed = 1;
};

struct SuiteCase {
  std::string label;
  ModelSpec model;
  LossSpec loss;
  std::vector<TransformSpec> transforms;
  /// Check names to run; empty selects every applicable check.
  std::vector<std::string> checks;
};

struct SuiteSpec {
  std::vector<SuiteCase> cases;
  Index positions = 20;
  std::uint64_t seed = 0;
  DiffMode mode = DiffMode::exact;
  double lambda_range = 0.3;
  Index last_layer_trials = 5;
  std::map<std::string, double> tolerances;
  std::optional<Mutation> mutation;
};

double default_tolerance(DiffMode mode);

/// Reports in plan order: case, then position, then check.
std::vector<IdentityReport> run_suite(const SuiteSpec& plan);

/// Every compatible (model, transform, loss) triple of the catalog.
SuiteSpec full_catalog_suite(Index positions = 20, std::uint64_t seed = 2024);

bool all_pass(const std::vector<IdentityReport>& reports);

}  // namespace equichk
