#include "equichk/identities.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>

#include "equichk/catalog.hpp"
#include "equichk/rng.hpp"

namespace equichk {

double IdentityReport::extra(const std::string& key) const {
  for (const auto& [k, v] : extras) {
    if (k == key) return v;
  }
  throw Error(ErrorCode::UnknownSpec, "report " + check_name + " has no extra '" + key + "'");
}

IdentityReport make_report(const std::string& check, const Tensord& lhs, const Tensord& rhs, double scale,
                           double tolerance) {
  if (lhs.shape() != rhs.shape()) {
    throw Error(ErrorCode::AxisMismatch, check + ": left and right sides have different shapes");
  }
  IdentityReport r;
  r.check_name = check;
  r.paper_anchor = paper_anchor(check);
  r.lhs_norm = norm(lhs);
  r.rhs_norm = norm(rhs);
  r.abs_residual = norm(lhs - rhs);
  r.scale = scale;
  r.rel_residual = r.abs_residual / std::max({r.lhs_norm, r.rhs_norm, scale, kDenominatorFloor});
  r.tolerance = tolerance;
  r.pass = std::isfinite(r.rel_residual) && r.rel_residual <= tolerance;
  return r;
}

IdentityReport combine_reports(const std::string& check, const std::vector<IdentityReport>& parts, double tolerance) {
  IdentityReport r;
  r.check_name = check;
  r.paper_anchor = paper_anchor(check);
  r.tolerance = tolerance;
  r.pass = true;
  const IdentityReport* worst = nullptr;
  for (const auto& p : parts) {
    r.pass = r.pass && p.pass;
    r.extras.emplace_back(p.check_name + ".rel_residual", p.rel_residual);
    for (const auto& e : p.extras) r.extras.emplace_back(p.check_name + "." + e.first, e.second);
    if (worst == nullptr || p.rel_residual / p.tolerance > worst->rel_residual / worst->tolerance) worst = &p;
  }
  if (worst != nullptr) {
    r.lhs_norm = worst->lhs_norm;
    r.rhs_norm = worst->rhs_norm;
    r.abs_residual = worst->abs_residual;
    r.rel_residual = worst->rel_residual;
    r.scale = worst->scale;
  }
  return r;
}

namespace {

Tensord scalar(double v) { return Tensord::scalar(v); }

void fill_context(IdentityReport& r, const CheckOptions& opts, const Model& model, const Loss& loss,
                  const Transformation* t, const Eigen::VectorXd* lambda) {
  r.context = opts.context;
  if (r.context.model.empty()) r.context.model = model.name();
  if (r.context.loss.empty()) r.context.loss = loss.name();
  if (t != nullptr && r.context.transform.empty()) r.context.transform = t->name();
  if (lambda != nullptr && r.context.lambda.empty()) r.context.lambda.assign(lambda->data(), lambda->data() + lambda->size());
  r.context.mode = opts.diff.mode == DiffMode::exact ? "exact" : "finite_difference";
}

void require_good_position(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                           const Eigen::VectorXd& lambda) {
  const GoodPositionReport gp = good_position(t, model, theta, lambda);
  if (!gp.ok) throw Error(ErrorCode::NotGoodPosition, t.name() + ": " + gp.reason);
}

/// Shared right-hand ingredients at a good position.
struct Ingredients {
  LossDerivatives ld;
  Tensord X;     // (p, d)
  Tensord Y;     // (p, c)
  Tensord w;     // ∇ℓ∘∇f∘∇_θH⁻¹, (d)
  Tensord v;     // ∇ℓ∘∇_yG⁻¹, (c)
};

Ingredients ingredients(const Model& model, const Loss& loss, const Transformation& t, const Eigen::VectorXd& theta,
                        const Eigen::VectorXd& lambda, const DiffConfig& cfg) {
  require_good_position(t, model, theta, lambda);
  Ingredients in;
  in.ld = grad_and_hessian_of_loss(model, loss, theta, cfg);
  const Tensord jinv = invert_square(t.dH_dtheta(theta, lambda), kGoodPositionThreshold);
  const Tensord kinv = invert_square(t.dG_dy(in.ld.y, lambda), kGoodPositionThreshold);
  in.X = compose(jinv, t.dH_dlambda(theta, lambda));
  in.Y = compose(kinv, t.dG_dlambda(in.ld.y, lambda));
  in.w = compose(compose(in.ld.loss_grad, in.ld.model_jacobian), jinv);
  in.v = compose(in.ld.loss_grad, kinv);
  return in;
}

double terms_scale(const std::vector<Tensord>& terms) {
  double s = 0.0;
  for (const auto& t : terms) s += norm(t);
  return s;
}

/// Adds term-dropping diagnostics and folds them into `pass`.
void apply_term_dropping(IdentityReport& r, const SecondOrderTerms& st, const Transformation& t) {
  const double green = norm(st.terms[0]) + norm(st.terms[3]) + norm(st.terms[4]);
  const double blue = norm(st.terms[2]);
  const double gap = norm(st.rhs() - st.reduced_rhs(t.is_symmetry(), t.linear_in_theta()));
  const double denom = std::max(r.scale, kDenominatorFloor);
  r.extras.emplace_back("green_norm", green);
  r.extras.emplace_back("blue_norm", blue);
  r.extras.emplace_back("reduced_gap", gap / denom);
  for (std::size_t k = 0; k < st.terms.size(); ++k) r.extras.emplace_back("term" + std::to_string(k + 1), norm(st.terms[k]));
  const bool consistent = gap / denom <= kTermDropTolerance;
  if (!consistent) {
    r.pass = false;
    r.note = "terms expected to vanish are nonzero";
  }
}

Eigen::VectorXd vec_of(const Tensord& t) { return t.data(); }

struct ScalarLoss {
  double y, d1, d2;
};

ScalarLoss scalar_loss(const Model& model, const Loss& loss, const Eigen::VectorXd& theta) {
  if (model.c() != 1) throw Error(ErrorCode::InvalidParams, "homogeneity specializations need a scalar output");
  const Eigen::VectorXd y = forward(model, theta);
  return {y[0], loss.gradient(y)[0], loss.hessian(y)(0, 0)};
}

int degree_of(const Model& model) {
  const auto m = model.homogeneity_degree();
  if (!m) throw Error(ErrorCode::InvalidParams, model.name() + " declares no homogeneity degree");
  return *m;
}

bool vanishes(double lp, const ScalarLoss& s) { return std::abs(lp) <= 1e-14 * (1.0 + std::abs(s.y * s.d2)); }

}  // namespace

// ---------------------------------------------------------------------------
// Continuous identities

IdentityReport check_first_order(const Model& model, const Loss& loss, const Transformation& t,
                                 const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                 const CheckOptions& opts) {
  const Ingredients in = ingredients(model, loss, t, theta, lambda, opts.diff);
  const Tensord lhs = compose(in.ld.grad, in.X);
  const Tensord rhs = compose(in.ld.loss_grad, in.Y);
  const double scale = norm(in.ld.grad) * norm(in.X) + norm(in.ld.loss_grad) * norm(in.Y);
  IdentityReport r = make_report("first_order", lhs, rhs, scale, opts.tolerance);
  if (lhs.size() == 1) {
    r.extras.emplace_back("lhs_value", lhs.data()[0]);
    r.extras.emplace_back("rhs_value", rhs.data()[0]);
  }
  fill_context(r, opts, model, loss, &t, &lambda);
  return r;
}

Tensord SecondOrderTerms::rhs() const {
  Tensord sum = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) sum += terms[k];
  return sum;
}

Tensord SecondOrderTerms::reduced_rhs(bool symmetry, bool linear) const {
  Tensord sum = terms[1];
  if (!linear) sum += terms[2];
  if (!symmetry) {
    sum += terms[0];
    sum += terms[3];
    sum += terms[4];
  }
  return sum;
}

SecondOrderTerms second_action_terms(const Model& model, const Loss& loss, const Transformation& t,
                                     const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                     const DiffConfig& cfg) {
  const Ingredients in = ingredients(model, loss, t, theta, lambda, cfg);
  const Tensord& jf = in.ld.model_jacobian;
  const Eigen::VectorXd& y = in.ld.y;
  SecondOrderTerms st;
  st.lhs = compose(in.ld.hessian, in.X);
  st.terms.push_back(compose_k(compose(in.ld.loss_hess, in.Y), jf, 2));
  st.terms.push_back(compose(in.w, t.d2H_dlambda_dtheta(theta, lambda)) * -1.0);
  st.terms.push_back(compose(compose(in.w, t.d2H_dtheta2(theta, lambda)), in.X));
  st.terms.push_back(compose_k(compose(in.v, t.d2G_dlambda_dy(y, lambda)), jf, 2));
  st.terms.push_back(compose_k(compose(compose(in.v, t.d2G_dy2(y, lambda)), in.Y), jf, 2) * -1.0);
  return st;
}

SecondOrderTerms second_quadratic_terms(const Model& model, const Loss& loss, const Transformation& t,
                                        const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                        const DiffConfig& cfg) {
  const Ingredients in = ingredients(model, loss, t, theta, lambda, cfg);
  const Eigen::VectorXd& y = in.ld.y;
  SecondOrderTerms st;
  st.lhs = compose_k(compose(in.ld.hessian, in.X), in.X, 2);
  st.terms.push_back(compose_k(compose(in.ld.loss_hess, in.Y), in.Y, 2));
  st.terms.push_back(compose(in.w, t.d2H_dlambda2(theta, lambda)) * -1.0);
  st.terms.push_back(compose_k(compose(compose(in.w, t.d2H_dtheta2(theta, lambda)), in.X), in.X, 2));
  st.terms.push_back(compose(in.v, t.d2G_dlambda2(y, lambda)));
  st.terms.push_back(compose_k(compose(compose(in.v, t.d2G_dy2(y, lambda)), in.Y), in.Y, 2) * -1.0);
  return st;
}

namespace {

IdentityReport second_order_report(const std::string& name, const SecondOrderTerms& st, double lhs_scale,
                                   const Model& model, const Loss& loss, const Transformation& t,
                                   const Eigen::VectorXd& lambda, const CheckOptions& opts) {
  IdentityReport r = make_report(name, st.lhs, st.rhs(), lhs_scale + terms_scale(st.terms), opts.tolerance);
  apply_term_dropping(r, st, t);
  fill_context(r, opts, model, loss, &t, &lambda);
  return r;
}

}  // namespace

IdentityReport check_second_action(const Model& model, const Loss& loss, const Transformation& t,
                                   const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                   const CheckOptions& opts) {
  const SecondOrderTerms st = second_action_terms(model, loss, t, theta, lambda, opts.diff);
  const Tensord X = characteristic_direction(t, theta, lambda);
  const Tensord hess = grad_and_hessian_of_loss(model, loss, theta, opts.diff).hessian;
  return second_order_report("second_action", st, norm(hess) * norm(X), model, loss, t, lambda, opts);
}

IdentityReport check_second_quadratic(const Model& model, const Loss& loss, const Transformation& t,
                                      const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda,
                                      const CheckOptions& opts) {
  const SecondOrderTerms st = second_quadratic_terms(model, loss, t, theta, lambda, opts.diff);
  const Tensord X = characteristic_direction(t, theta, lambda);
  const Tensord hess = grad_and_hessian_of_loss(model, loss, theta, opts.diff).hessian;
  return second_order_report("second_quadratic", st, norm(hess) * norm(X) * norm(X), model, loss, t, lambda, opts);
}

// ---------------------------------------------------------------------------
// Homogeneous specializations

HomogeneityReports check_homogeneity_specialization(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                                    const CheckOptions& opts) {
  const int m = degree_of(model);
  const ScalarLoss s = scalar_loss(model, loss, theta);
  if (vanishes(s.d1, s)) {
    throw Error(ErrorCode::DegenerateLoss, "ℓ'(f(θ)) = 0; the action identity is undefined");
  }
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const Eigen::VectorXd g = vec_of(ld.grad);

  const double coef = m * s.y * s.d2 / s.d1 + m - 1;
  HomogeneityReports out;
  const Eigen::VectorXd action = hess * theta;
  out.action = make_report("homogeneity_action", from_vector(action), from_vector(Eigen::VectorXd(coef * g)),
                           hess.norm() * theta.norm(), opts.tolerance);
  out.action.extras.emplace_back("coefficient", coef);
  fill_context(out.action, opts, model, loss, nullptr, nullptr);

  const double quad = theta.dot(action);
  const double closed = s.d2 * m * m * s.y * s.y + s.d1 * m * (m - 1) * s.y;
  out.quadratic = make_report("homogeneity_quadratic", scalar(quad), scalar(closed),
                              hess.norm() * theta.squaredNorm() + std::abs(s.d2 * m * m * s.y * s.y) +
                                  std::abs(s.d1 * m * (m - 1) * s.y),
                              opts.tolerance);
  out.quadratic.extras.emplace_back("lhs_value", quad);
  out.quadratic.extras.emplace_back("rhs_value", closed);
  fill_context(out.quadratic, opts, model, loss, nullptr, nullptr);
  return out;
}

IdentityReport check_degenerate_branch(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                       const CheckOptions& opts) {
  const int m = degree_of(model);
  const ScalarLoss s = scalar_loss(model, loss, theta);
  if (!vanishes(s.d1, s)) throw Error(ErrorCode::InvalidParams, "ℓ'(f(θ)) ≠ 0; not on the degenerate branch");
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const Eigen::VectorXd action = hess * theta;
  const Eigen::VectorXd jf = to_matrix(ld.model_jacobian).col(0);
  const Eigen::VectorXd closed = m * s.y * s.d2 * jf;

  IdentityReport r = make_report("degenerate_branch", from_vector(action), Tensord::zeros(Shape{theta.size()}),
                                 hess.norm() * theta.norm(), 1e-9);
  // The branch claim is ‖∇²Lθ‖ ≤ 1e-9·‖∇²L‖·‖θ‖.
  r.rel_residual = action.norm() / std::max(hess.norm() * theta.norm(), kDenominatorFloor);
  r.pass = r.rel_residual <= 1e-9;
  r.extras.emplace_back("gradient_norm", vec_of(ld.grad).norm());
  r.extras.emplace_back("closed_form_gap", (action - closed).norm() / std::max(closed.norm(), 1.0));
  r.extras.emplace_back("m_y_l2", m * s.y * s.d2);
  fill_context(r, opts, model, loss, nullptr, nullptr);
  return r;
}

double alignment_alpha(const Model& model, const Loss& loss, const Eigen::VectorXd& theta) {
  const int m = degree_of(model);
  const ScalarLoss s = scalar_loss(model, loss, theta);
  if (vanishes(s.d1, s)) throw Error(ErrorCode::DegenerateLoss, "ℓ'(f(θ)) = 0; α is undefined");
  const double denom = m * s.y * s.d2 + (m - 1) * s.d1;
  if (std::abs(denom) <= 1e-14 * (std::abs(m * s.y * s.d2) + std::abs((m - 1) * s.d1) + 1e-300)) {
    throw Error(ErrorCode::DegenerateLoss, "m y ℓ'' + (m − 1) ℓ' = 0; α is undefined");
  }
  return s.d1 / denom;
}

IdentityReport check_eigen_alignment(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                     const CheckOptions& opts) {
  const double alpha = alignment_alpha(model, loss, theta);
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const Eigen::VectorXd g = vec_of(ld.grad);
  const SpectralSummary spec = symmetric_eigen(hess);
  const Eigen::MatrixXd& U = spec.eigenvectors;

  const Eigen::VectorXd lhs = U.transpose() * g;
  const Eigen::VectorXd rhs = alpha * spec.eigenvalues.cwiseProduct(U.transpose() * theta);
  const double gscale = g.norm();
  IdentityReport coeff = make_report("eigen_coefficients", from_vector(lhs), from_vector(rhs),
                                     std::abs(alpha) * hess.norm() * theta.norm(), opts.tolerance);
  coeff.extras.emplace_back("max_abs_gap", (lhs - rhs).cwiseAbs().maxCoeff());

  // Column-space condition: g has no component along near-null eigenvectors.
  const double null_tol = 1e-9 * std::max(1.0, spec.eigenvalues.cwiseAbs().maxCoeff());
  Eigen::VectorXd outside = g;
  for (Index k = 0; k < U.cols(); ++k) {
    if (std::abs(spec.eigenvalues[k]) > null_tol) outside -= U.col(k).dot(g) * U.col(k);
  }
  IdentityReport span = make_report("column_space", from_vector(outside), Tensord::zeros(Shape{g.size()}), gscale,
                                    opts.tolerance);

  IdentityReport r = combine_reports("eigen_alignment", {coeff, span}, opts.tolerance);
  r.extras.emplace_back("alpha", alpha);
  r.extras.emplace_back("lambda_max", spec.lambda_max);
  r.extras.emplace_back("reconstruction", spec.reconstruction_error(hess));
  r.extras.emplace_back("orthonormality", spec.orthonormality_error());
  // Concentration diagnostic: share of ‖g‖² on the top-|λ| eigenvector; reported, never asserted.
  if (gscale > 0) {
    Index top = 0;
    spec.eigenvalues.cwiseAbs().maxCoeff(&top);
    r.extras.emplace_back("top_direction_share", std::pow(lhs[top] / gscale, 2));
  }
  fill_context(r, opts, model, loss, nullptr, nullptr);
  return r;
}

SharpnessResult sharpness_bound(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                const CheckOptions& opts) {
  const int m = degree_of(model);
  const ScalarLoss s = scalar_loss(model, loss, theta);
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const double tt = theta.squaredNorm();
  if (!(tt > 0)) throw Error(ErrorCode::InvalidParams, "sharpness bound needs θ ≠ 0");

  SharpnessResult out;
  out.bound = (m / tt) * (s.d2 * m * s.y * s.y + s.d1 * (m - 1) * s.y);
  out.rayleigh = theta.dot(hess * theta) / tt;
  const SpectralSummary spec = symmetric_eigen(hess);
  out.lambda_max = spec.lambda_max;
  out.power_lambda_max = power_top_eigenvalues(hess, 1)[0];

  out.report = make_report("sharpness_bound", scalar(out.rayleigh), scalar(out.bound), hess.norm(), opts.tolerance);
  const double slack = 1e-9 * std::max(1.0, std::abs(out.bound));
  const bool bounded = out.lambda_max >= out.bound - slack;
  out.report.pass = out.report.pass && bounded;
  if (!bounded) out.report.note = "largest eigenvalue below the lower bound";
  out.report.extras.emplace_back("bound", out.bound);
  out.report.extras.emplace_back("lambda_max", out.lambda_max);
  out.report.extras.emplace_back("power_lambda_max", out.power_lambda_max);
  out.report.extras.emplace_back("margin", out.lambda_max - out.bound);
  fill_context(out.report, opts, model, loss, nullptr, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Discrete identities

namespace {

void require_fixed(const Transformation& t, const Eigen::VectorXd& theta) {
  if (t.kind() != TransformKind::discrete || !t.is_symmetry()) {
    throw Error(ErrorCode::InvalidParams, t.name() + " is not a discrete symmetry");
  }
  const double gap = (t.H(theta, t.identity_lambda()) - theta).norm();
  if (gap > 1e-12 * std::max(1.0, theta.norm())) {
    throw Error(ErrorCode::NotFixedPoint, "‖H(θ, λ₀) − θ‖ = " + std::to_string(gap) + "; project onto Fix(H) first");
  }
}

}  // namespace

IdentityReport check_discrete_first(const Model& model, const Loss& loss, const Transformation& t,
                                    const Eigen::VectorXd& theta, const CheckOptions& opts) {
  require_fixed(t, theta);
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Tensord xhat = t.dH_dtheta(theta, t.identity_lambda());
  const Tensord lhs = compose(ld.grad, xhat);
  IdentityReport r = make_report("discrete_first", lhs, ld.grad, norm(ld.grad) * norm(xhat), opts.tolerance);
  const Eigen::VectorXd lam = t.identity_lambda();
  fill_context(r, opts, model, loss, &t, &lam);
  return r;
}

IdentityReport check_discrete_second(const Model& model, const Loss& loss, const Transformation& t,
                                     const Eigen::VectorXd& theta, const CheckOptions& opts) {
  require_fixed(t, theta);
  const Eigen::VectorXd lam = t.identity_lambda();
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Tensord xhat = t.dH_dtheta(theta, lam);
  const Tensord lhs = compose_k(compose(ld.hessian, xhat), xhat, 2);
  const Tensord correction = compose(ld.grad, t.d2H_dtheta2(theta, lam));
  const Tensord rhs = ld.hessian - correction;
  const double scale = norm(ld.hessian) * norm(xhat) * norm(xhat) + norm(ld.hessian) + norm(correction);
  IdentityReport r = make_report("discrete_second", lhs, rhs, scale, opts.tolerance);
  r.extras.emplace_back("blue_norm", norm(correction));
  if (t.linear_in_theta() && norm(correction) > kTermDropTolerance * std::max(scale, kDenominatorFloor)) {
    r.pass = false;
    r.note = "∇²_θH correction nonzero for a linear action";
  }
  fill_context(r, opts, model, loss, &t, &lam);
  return r;
}

IdentityReport check_mirror(const Model& model, const Loss& loss, const Eigen::MatrixXd& O,
                            const Eigen::VectorXd& theta, const CheckOptions& opts) {
  const Index d = model.d();
  if (O.rows() != d || O.cols() < 1) throw Error(ErrorCode::InvalidParams, "mirror frame must have d rows");
  if ((O.transpose() * O - Eigen::MatrixXd::Identity(O.cols(), O.cols())).cwiseAbs().maxCoeff() > 1e-10) {
    throw Error(ErrorCode::InvalidParams, "mirror frame must have orthonormal columns");
  }
  const double off = (O.transpose() * theta).norm();
  if (off > 1e-12 * std::max(1.0, theta.norm())) {
    throw Error(ErrorCode::NotFixedPoint, "θ has a component " + std::to_string(off) + " in col(O)");
  }
  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const Eigen::VectorXd g = vec_of(ld.grad);
  const Eigen::MatrixXd Q = O * O.transpose();
  const Eigen::MatrixXd R = Eigen::MatrixXd::Identity(d, d) - Q;

  const Eigen::VectorXd og = O.transpose() * g;
  const Eigen::MatrixXd rho = R * hess * O;
  const Eigen::MatrixXd qhr = Q * hess * R;
  IdentityReport pg = make_report("gradient_in_col_O", from_vector(og), Tensord::zeros(Shape{og.size()}), g.norm(),
                                  opts.tolerance);
  IdentityReport p1 = make_report("block_RHO", from_matrix(rho), Tensord::zeros(Shape{d, O.cols()}), hess.norm(),
                                  opts.tolerance);
  IdentityReport p2 = make_report("block_QHR", from_matrix(qhr), Tensord::zeros(Shape{d, d}), hess.norm(),
                                  opts.tolerance);
  IdentityReport r = combine_reports("mirror", {pg, p1, p2}, opts.tolerance);

  // ‖PHP − H‖² = 4(‖RHO‖² + ‖QHR‖²) for P = I − 2Q.
  const Eigen::MatrixXd P = R - Q;
  const double conjugation = (P * hess * P - hess).norm();
  const double block = 2.0 * std::sqrt(rho.squaredNorm() + qhr.squaredNorm());
  r.extras.emplace_back("conjugation_residual", conjugation);
  r.extras.emplace_back("block_residual", block);
  r.extras.emplace_back("formulation_gap", std::abs(conjugation - block) / std::max(1.0, hess.norm()));
  if (std::abs(conjugation - block) > 1e-12 * std::max(1.0, hess.norm())) {
    r.pass = false;
    r.note = "block and conjugation formulations disagree";
  }
  fill_context(r, opts, model, loss, nullptr, nullptr);
  r.context.transform = "mirror";
  return r;
}

// ---------------------------------------------------------------------------
// Last layer

namespace {

double softmax_variance(const Eigen::VectorXd& y, const Eigen::VectorXd& z) {
  const Eigen::VectorXd e = (y.array() - y.maxCoeff()).exp();
  const Eigen::VectorXd p = e / e.sum();
  const double mean = p.dot(z);
  return p.dot(z.cwiseProduct(z)) - mean * mean;
}

}  // namespace

IdentityReport check_last_layer_alignment(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                          Index trials, std::uint64_t seed, const CheckOptions& opts) {
  const auto block_name = model.last_layer_block();
  if (!block_name) throw Error(ErrorCode::NotFactoredModel, model.name() + " has no last linear layer");
  Eigen::VectorXd h;
  try {
    h = model.features(theta);
  } catch (const Error& e) {
    throw Error(ErrorCode::NotFactoredModel, model.name() + " exposes no features: " + e.what());
  }
  const ParamBlock& wb = model.layout().find(*block_name);
  const Index c = model.c();
  if (wb.rows != c || wb.cols != h.size()) throw Error(ErrorCode::NotFactoredModel, "last layer shape mismatch");

  const LossDerivatives ld = grad_and_hessian_of_loss(model, loss, theta, opts.diff);
  const Eigen::MatrixXd hess = to_matrix(ld.hessian);
  const Eigen::MatrixXd lh = to_matrix(ld.loss_hess);
  const Eigen::MatrixXd W = ParameterLayout::view<double>(theta, wb);
  const bool softmax = loss.name() == "softmax_ce";

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<IdentityReport> parts;
  double worst_var = 0.0;
  for (Index k = 0; k < trials; ++k) {
    Eigen::MatrixXd U(c, c);
    for (Index i = 0; i < c; ++i)
      for (Index j = 0; j < c; ++j) U(i, j) = unif(rng);
    const Eigen::MatrixXd V = U * W;
    Eigen::VectorXd v = Eigen::VectorXd::Zero(model.d());
    ParameterLayout::view<double>(v, wb) = V;
    const double lhs = v.dot(hess * v);
    const Eigen::VectorXd z = V * h;
    const double rhs = z.dot(lh * z);
    parts.push_back(make_report("trial" + std::to_string(k), scalar(lhs), scalar(rhs), hess.norm() * v.squaredNorm(),
                                opts.tolerance));
    if (softmax) {
      const double var = softmax_variance(ld.y, z);
      IdentityReport pv = make_report("variance" + std::to_string(k), scalar(rhs), scalar(var), 0.0, 1e-10);
      worst_var = std::max(worst_var, pv.rel_residual);
      parts.push_back(pv);
    }
  }
  IdentityReport r = combine_reports("last_layer_alignment", parts, opts.tolerance);
  if (softmax) r.extras.emplace_back("variance_rel_residual", worst_var);
  fill_context(r, opts, model, loss, nullptr, nullptr);
  r.context.transform = "last_layer_left_action";
  return r;
}

// ---------------------------------------------------------------------------
// Stationary points

StationaryReport stationary_null_count(const Objective& objective, const std::vector<TransformPtr>& symmetries,
                                       const Eigen::VectorXd& theta_star, double eps_stat, double null_tolerance,
                                       double rank_tolerance, const CheckOptions& opts) {
  StationaryReport out;
  const Eigen::VectorXd g = objective.gradient(theta_star, opts.diff);
  out.grad_norm = g.norm();
  if (!(out.grad_norm <= eps_stat)) {
    throw Error(ErrorCode::NotConverged, "‖∇L‖ = " + std::to_string(out.grad_norm) + " exceeds " +
                                             std::to_string(eps_stat));
  }
  const Eigen::MatrixXd hess = objective.hessian(theta_star, opts.diff);
  out.spectrum = symmetric_eigen(hess);
  out.null_tolerance = null_tolerance;
  out.null_count = out.spectrum.null_count(null_tolerance);

  Eigen::MatrixXd stacked(0, objective.d());
  double worst_action = 0.0;
  for (const auto& t : symmetries) {
    if (!t->is_symmetry() || t->kind() != TransformKind::continuous) {
      throw Error(ErrorCode::InvalidParams, t->name() + " is not a continuous symmetry");
    }
    const Eigen::VectorXd lam = t->identity_lambda();
    const Eigen::MatrixXd X = to_matrix(characteristic_direction(*t, theta_star, lam));
    const Eigen::MatrixXd action = X * hess;  // rows: ∇²L∘X
    worst_action = std::max(worst_action, action.norm() / std::max(hess.norm() * X.norm(), kDenominatorFloor));
    out.kappa.emplace_back(t->name(), action.norm() / std::max(out.grad_norm, 1e-300));
    Eigen::MatrixXd grown(stacked.rows() + X.rows(), stacked.cols());
    grown << stacked, X;
    stacked = grown;
  }
  if (stacked.rows() > 0) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(stacked);
    const Eigen::VectorXd sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv[0] : 0.0;
    out.direction_rank = static_cast<Index>((sv.array() > rank_tolerance * std::max(smax, 1e-300)).count());
  }

  IdentityReport& r = out.report;
  r.check_name = "stationary_null_space";
  r.paper_anchor = paper_anchor(r.check_name);
  r.lhs_norm = static_cast<double>(out.null_count);
  r.rhs_norm = static_cast<double>(out.direction_rank);
  r.abs_residual = static_cast<double>(std::max<Index>(0, out.direction_rank - out.null_count));
  r.rel_residual = worst_action;
  r.tolerance = opts.tolerance;
  r.pass = out.null_count >= out.direction_rank;
  r.extras.emplace_back("grad_norm", out.grad_norm);
  r.extras.emplace_back("null_count", static_cast<double>(out.null_count));
  r.extras.emplace_back("direction_rank", static_cast<double>(out.direction_rank));
  r.extras.emplace_back("lambda_max", out.spectrum.lambda_max);
  for (const auto& [name, kappa] : out.kappa) r.extras.emplace_back("kappa." + name, kappa);
  r.context = opts.context;
  return out;
}

// ---------------------------------------------------------------------------
// Suites

double default_tolerance(DiffMode mode) { return mode == DiffMode::exact ? kExactTolerance : kFdTolerance; }

bool all_pass(const std::vector<IdentityReport>& reports) {
  return std::all_of(reports.begin(), reports.end(), [](const IdentityReport& r) { return r.pass; });
}

namespace {

bool wants(const SuiteCase& sc, const std::string& check) {
  return sc.checks.empty() || std::find(sc.checks.begin(), sc.checks.end(), check) != sc.checks.end();
}

TransformPtr maybe_mutate(const TransformPtr& t, const std::optional<Mutation>& mutation) {
  if (!mutation) return t;
  if (t->kind() == TransformKind::discrete && mutation->derivative != "dH_dtheta" &&
      mutation->derivative != "d2H_dtheta2" && mutation->derivative != "dG_dy" && mutation->derivative != "d2G_dy2") {
    return t;
  }
  return std::make_shared<PerturbedTransformation>(t, mutation->derivative, mutation->rel, mutation->seed);
}

IdentityReport skipped_report(const std::string& check, const std::string& why, const ReportContext& ctx) {
  IdentityReport r;
  r.check_name = check;
  r.paper_anchor = paper_anchor(check);
  r.pass = true;
  r.skipped = true;
  r.note = why;
  r.context = ctx;
  return r;
}

struct Position {
  Eigen::VectorXd theta;
  std::vector<Eigen::VectorXd> lambdas;  // one per transform
  std::uint64_t seed = 0;
};

/// Draws θ and λ until every continuous transform is at a good position and
/// θ is clear of ReLU kinks.
Position draw_position(const Model& model, const std::vector<TransformPtr>& ts, const SuiteSpec& plan, Index index) {
  const double kink = plan.mode == DiffMode::exact ? 1e-6 : 1e-2;
  for (Index attempt = 0; attempt < 200; ++attempt) {
    Position pos;
    pos.seed = derive_seed(plan.seed, static_cast<std::uint64_t>(index * 1000 + attempt));
    pos.theta = model.random_parameters(pos.seed);
    if (model.kink_margin(pos.theta) < kink) continue;
    std::mt19937_64 rng(derive_seed(pos.seed, 1));
    std::uniform_real_distribution<double> unif(-plan.lambda_range, plan.lambda_range);
    bool ok = true;
    for (const auto& t : ts) {
      Eigen::VectorXd lam = t->identity_lambda();
      if (t->kind() == TransformKind::continuous) {
        for (Index q = 0; q < lam.size(); ++q) lam[q] = unif(rng);
        ok = ok && good_position(*t, model, pos.theta, lam).ok;
      }
      pos.lambdas.push_back(lam);
    }
    if (ok) return pos;
  }
  throw Error(ErrorCode::NotGoodPosition, "no good position found for " + model.name());
}

}  // namespace

std::vector<IdentityReport> run_suite(const SuiteSpec& plan) {
  std::vector<IdentityReport> out;
  const double base_tol = default_tolerance(plan.mode);
  auto tol_for = [&](const std::string& check) {
    const auto it = plan.tolerances.find(check);
    return it == plan.tolerances.end() ? base_tol : it->second;
  };

  for (const SuiteCase& sc : plan.cases) {
    const ModelPtr model = build_model(sc.model);
    const LossPtr loss = build_loss(sc.loss, model->c());
    std::vector<TransformPtr> ts;
    for (const auto& spec : sc.transforms) ts.push_back(maybe_mutate(build_transform(spec, *model), plan.mutation));

    const bool homogeneous = model->homogeneity_degree().has_value() && model->c() == 1;
    const bool factored = model->last_layer_block().has_value();

    for (Index i = 0; i < plan.positions; ++i) {
      const Position pos = draw_position(*model, ts, plan, i);
      CheckOptions opts;
      opts.diff.mode = plan.mode;
      opts.context.seed = pos.seed;
      opts.context.label = sc.label;
      auto with_tol = [&](const std::string& check) {
        CheckOptions o = opts;
        o.tolerance = tol_for(check);
        return o;
      };

      for (std::size_t k = 0; k < ts.size(); ++k) {
        const Transformation& t = *ts[k];
        const Eigen::VectorXd& lam = pos.lambdas[k];
        if (t.kind() == TransformKind::continuous) {
          if (wants(sc, "first_order")) out.push_back(check_first_order(*model, *loss, t, pos.theta, lam, with_tol("first_order")));
          if (wants(sc, "second_action"))
            out.push_back(check_second_action(*model, *loss, t, pos.theta, lam, with_tol("second_action")));
          if (wants(sc, "second_quadratic"))
            out.push_back(check_second_quadratic(*model, *loss, t, pos.theta, lam, with_tol("second_quadratic")));
        } else {
          const Eigen::VectorXd fixed = fixed_point_project(t, pos.theta);
          if (wants(sc, "discrete_first"))
            out.push_back(check_discrete_first(*model, *loss, t, fixed, with_tol("discrete_first")));
          if (wants(sc, "discrete_second"))
            out.push_back(check_discrete_second(*model, *loss, t, fixed, with_tol("discrete_second")));
          const auto* disc = dynamic_cast<const DiscreteLinearSymmetry*>(&t);
          if (disc != nullptr && disc->frame() && wants(sc, "mirror")) {
            out.push_back(check_mirror(*model, *loss, *disc->frame(), fixed, with_tol("mirror")));
          }
        }
        if (wants(sc, "equivariance_certificate")) {
          const double res = equivariance_residual(t, *model, pos.theta, lam);
          IdentityReport r = make_report("equivariance_certificate", scalar(res), scalar(0.0), 1.0, 1e-10);
          r.context = opts.context;
          r.context.model = model->name();
          r.context.transform = t.name();
          r.context.loss = loss->name();
          out.push_back(r);
        }
        if (wants(sc, "derivative_certificate") && i == 0) {
          const Eigen::VectorXd y = forward(*model, pos.theta);
          std::vector<IdentityReport> parts;
          for (const auto& [name, gap] : derivative_fd_discrepancy(t, pos.theta, y, lam)) {
            IdentityReport p = make_report(name, scalar(gap), scalar(0.0), 1.0, 1e-6);
            parts.push_back(p);
          }
          IdentityReport r = combine_reports("derivative_certificate", parts, 1e-6);
          r.context = opts.context;
          r.context.model = model->name();
          r.context.transform = t.name();
          r.context.loss = loss->name();
          out.push_back(r);
        }
      }

      if (homogeneous) {
        ReportContext ctx = opts.context;
        ctx.model = model->name();
        ctx.loss = loss->name();
        if (wants(sc, "homogeneity_action") || wants(sc, "homogeneity_quadratic")) {
          try {
            const HomogeneityReports hr =
                check_homogeneity_specialization(*model, *loss, pos.theta, with_tol("homogeneity_action"));
            if (wants(sc, "homogeneity_action")) out.push_back(hr.action);
            if (wants(sc, "homogeneity_quadratic")) out.push_back(hr.quadratic);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateLoss) throw;
            out.push_back(skipped_report("homogeneity_action", e.what(), ctx));
          }
        }
        if (wants(sc, "eigen_alignment")) {
          try {
            out.push_back(check_eigen_alignment(*model, *loss, pos.theta, with_tol("eigen_alignment")));
          } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateLoss) throw;
            out.push_back(skipped_report("eigen_alignment", e.what(), ctx));
          }
        }
        if (wants(sc, "sharpness_bound")) {
          out.push_back(sharpness_bound(*model, *loss, pos.theta, with_tol("sharpness_bound")).report);
        }
      }
      if (factored && wants(sc, "last_layer_alignment")) {
        out.push_back(check_last_layer_alignment(*model, *loss, pos.theta, plan.last_layer_trials,
                                                 derive_seed(pos.seed, 2), with_tol("last_layer_alignment")));
      }
    }
  }
  return out;
}

SuiteSpec full_catalog_suite(Index positions, std::uint64_t seed) {
  SuiteSpec plan;
  plan.positions = positions;
  plan.seed = seed;

  auto model = [](std::string kind, std::vector<Index> widths, std::uint64_t s) {
    ModelSpec m;
    m.kind = std::move(kind);
    m.widths = std::move(widths);
    m.seed = s;
    return m;
  };
  auto loss = [](std::string kind, std::initializer_list<double> target) {
    LossSpec l;
    l.kind = std::move(kind);
    l.target = Eigen::VectorXd(static_cast<Index>(target.size()));
    Index i = 0;
    for (double v : target) l.target[i++] = v;
    return l;
  };
  auto named = [](std::string name) {
    TransformSpec t;
    t.name = std::move(name);
    return t;
  };

  TransformSpec sym_reparam = named("linear_reparam");
  sym_reparam.generator = (Eigen::MatrixXd(2, 2) << 0.7, -0.2, -0.2, 0.4).finished();
  TransformSpec gen_reparam = named("linear_reparam");
  gen_reparam.generator = (Eigen::MatrixXd(2, 2) << 0.3, 0.8, -0.5, 0.1).finished();
  TransformSpec parity_mirror = named("mirror");
  parity_mirror.frame = Eigen::MatrixXd::Zero(2, 1);
  parity_mirror.frame(0, 0) = 1.0;

  const std::vector<TransformSpec> probe_ts = {named("homogeneity_scaling"), named("last_layer_left_action")};
  const std::vector<TransformSpec> relu_ts = {named("homogeneity_scaling"), named("layer_rescaling"),
                                              named("last_layer_left_action")};
  const std::vector<TransformSpec> lin_ts = {named("homogeneity_scaling"), named("layer_rescaling"), sym_reparam,
                                             gen_reparam, named("last_layer_left_action")};
  const std::vector<TransformSpec> fac_ts = {named("last_layer_left_action")};

  ModelSpec probe;
  probe.kind = "linear_probe";
  probe.widths = {3};
  probe.seed = 1;
  ModelSpec fac;
  fac.kind = "factored_last_layer";
  fac.c = 3;
  fac.s = 2;
  fac.hidden = 3;
  fac.seed = 5;
  ModelSpec fac1 = fac;
  fac1.c = 1;
  ModelSpec par;
  par.kind = "parity_pair";

  const ModelSpec relu1 = model("homogeneous_relu_mlp", {3, 4, 1}, 3);
  const ModelSpec relu3 = model("homogeneous_relu_mlp", {3, 4, 3}, 3);
  const ModelSpec relu_deep = model("homogeneous_relu_mlp", {2, 3, 3, 1}, 6);
  const ModelSpec lin2 = model("deep_linear", {3, 2, 2}, 4);

  std::vector<LossSpec> scalar_losses = {loss("square", {0.7}), loss("exponential", {1.0}), loss("logistic", {-1.0})};
  for (const auto& l : scalar_losses) {
    plan.cases.push_back({"linear_probe/" + l.kind, probe, l, probe_ts, {}});
    plan.cases.push_back({"relu[3,4,1]/" + l.kind, relu1, l, relu_ts, {}});
    plan.cases.push_back({"relu[2,3,3,1]/" + l.kind, relu_deep, l, relu_ts, {}});
    plan.cases.push_back({"factored(c=1)/" + l.kind, fac1, l, fac_ts, {}});
    plan.cases.push_back({"parity_pair/" + l.kind, par, l, {parity_mirror}, {}});
  }
  plan.cases.push_back({"relu[3,4,3]/square", relu3, loss("square", {0.5, -0.2, 1.0}), relu_ts, {}});
  plan.cases.push_back({"relu[3,4,3]/softmax_ce", relu3, loss("softmax_ce", {1.0}), relu_ts, {}});
  plan.cases.push_back({"deep_linear[3,2,2]/square", lin2, loss("square", {0.3, -0.6}), lin_ts, {}});
  plan.cases.push_back({"deep_linear[3,2,2]/softmax_ce", lin2, loss("softmax_ce", {0.0}), lin_ts, {}});
  plan.cases.push_back({"factored(c=3)/square", fac, loss("square", {0.1, 0.2, -0.3}), fac_ts, {}});
  plan.cases.push_back({"factored(c=3)/softmax_ce", fac, loss("softmax_ce", {2.0}), fac_ts, {}});
  return plan;
}

}  // namespace equichk
