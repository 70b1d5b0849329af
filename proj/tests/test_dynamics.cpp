#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdlib>
#include <random>

#include "equichk/dynamics.hpp"
#include "equichk/errors.hpp"
#include "fixtures.hpp"

using namespace equichk;
using fixtures::vec;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::InvalidParams;
}

std::shared_ptr<FunctionObjective> half_square(Index d) {
  return FunctionObjective::from_generic(d, [](const auto& t) { return 0.5 * t.squaredNorm(); });
}

/// Two-sample regression dataset on deep_linear [2, 2, 1].
struct TwoSample {
  ModelPtr model = fixtures::deep_linear({2, 2, 1}, 4);
  LossPtr loss = fixtures::loss("square", vec({0.0}), 1);
  std::shared_ptr<DatasetObjective> objective;
  TransformPtr rescaling;
  Charge charge;

  explicit TwoSample(std::vector<Sample> samples = {{vec({1.0, 0.5}), vec({1.0})}, {vec({-0.3, 1.0}), vec({-0.5})}}) {
    objective = std::make_shared<DatasetObjective>(model, loss, Dataset::uniform(std::move(samples)));
    rescaling = fixtures::transform(*model, "layer_rescaling");
    charge = noether_charge(*rescaling, *model);
  }
  Eigen::VectorXd theta0() const { return model->random_parameters(3); }
};

void set_threads(const char* v) {
  if (v == nullptr) {
    unsetenv("EQUICHK_THREADS");
  } else {
    setenv("EQUICHK_THREADS", v, 1);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient flow

TEST(GradientFlow, QuadraticClosedForm) {
  const auto obj = half_square(2);
  const Trajectory tr = gradient_flow(*obj, vec({1, 0}), 1.0, 0.1);
  EXPECT_NEAR(tr.times.back(), 1.0, 1e-15);
  EXPECT_LE((tr.states.back() - vec({std::exp(-1.0), 0.0})).norm(), 1e-6);
  EXPECT_EQ(tr.halvings, 0);
  for (std::size_t k = 1; k < tr.losses.size(); ++k) EXPECT_LE(tr.losses[k], tr.losses[k - 1]);
}

TEST(GradientFlow, FourthOrderConvergence) {
  const auto obj = half_square(2);
  auto err = [&](double dt) { return std::abs(gradient_flow(*obj, vec({1, 0}), 1.0, dt).states.back()[0] - std::exp(-1.0)); };
  for (double dt : {0.2, 0.1, 0.05}) {
    const double ratio = err(dt) / err(dt / 2);
    EXPECT_GE(ratio, 12.0) << dt;
    EXPECT_LE(ratio, 20.0) << dt;
  }
}

TEST(GradientFlow, RecordStride) {
  EXPECT_EQ(record_stride(10.0, 1e-3), 10);
  EXPECT_EQ(record_stride(1.0, 0.1), 1);
  EXPECT_EQ(record_stride(0.5, 1e-3), 1);
  const auto obj = half_square(1);
  const Trajectory tr = gradient_flow(*obj, vec({1}), 10.0, 1e-3);
  EXPECT_EQ(tr.times.size(), 1001u);
  EXPECT_EQ(tr.losses.size(), tr.states.size());
  EXPECT_EQ(tr.diagnostic("grad_norm").size(), tr.times.size());
  for (std::size_t k = 1; k < tr.times.size(); ++k) EXPECT_GT(tr.times[k], tr.times[k - 1]);
}

TEST(GradientFlow, LayerRescalingChargeConserved) {
  const auto model = fixtures::relu_mlp({3, 4, 1});
  const auto loss = fixtures::loss("logistic", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  const auto t = fixtures::transform(*model, "layer_rescaling");
  const Charge c = noether_charge(*t, *model);
  Eigen::VectorXd theta0 = model->random_parameters(12);
  ASSERT_GT(model->kink_margin(theta0), 1e-3);
  const Trajectory tr = gradient_flow(obj, theta0, 10.0, 5e-3, {c});
  EXPECT_LE(tr.charge_drift(c.name), 1e-8);
  EXPECT_GT(std::abs(tr.losses.back() - tr.losses.front()), 1e-3);
}

TEST(GradientFlow, BalancednessConservedOnDeepLinear) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  std::mt19937_64 rng(5);
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back({fixtures::uniform(3, rng), fixtures::uniform(2, rng)});
  const auto loss = fixtures::loss("square", vec({0.0, 0.0}), 2);
  const DatasetObjective obj(model, loss, Dataset::uniform(samples));
  TransformSpec spec;
  spec.name = "linear_reparam";
  spec.generator = (Eigen::MatrixXd(2, 2) << 0.7, -0.2, -0.2, 0.4).finished();
  const Charge c = noether_charge(*fixtures::transform(*model, spec), *model);
  const Trajectory tr = gradient_flow(obj, model->random_parameters(6), 10.0, 5e-3, {c});
  EXPECT_LE(tr.charge_drift(c.name), 1e-8);
}

TEST(GradientFlow, DiagnosticsForScalarModels) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("exponential", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  const Trajectory tr = gradient_flow(obj, vec({0.2, 0.1}), 1.0, 0.01);
  ASSERT_TRUE(tr.has_diagnostic("output"));
  ASSERT_TRUE(tr.has_diagnostic("sharpness_bound"));
  EXPECT_NEAR(tr.diagnostic("output").front(), 0.4, 1e-15);
  EXPECT_NEAR(tr.diagnostic("theta_sq").front(), 0.05, 1e-15);
}

TEST(GradientFlow, StopsAtGradientThreshold) {
  const auto obj = half_square(2);
  const Trajectory tr = gradient_flow(*obj, vec({1, 1}), 100.0, 0.1, {}, 1e-6);
  EXPECT_LE(tr.diagnostic("grad_norm").back(), 1e-6);
  EXPECT_LT(tr.times.back(), 100.0);
}

TEST(GradientFlow, StepFailureOnLossJump) {
  // The plain evaluation jumps up by 10 at θ = 0.5; the derivative path sees a smooth quadratic.
  const FunctionObjective obj(
      1, [](const Eigen::VectorXd& t) { return 0.5 * (t[0] - 1) * (t[0] - 1) + (t[0] > 0.5 ? 10.0 : 0.0); },
      [](const VectorX<HyperDual>& t) { return 0.5 * (t[0] - 1.0) * (t[0] - 1.0); });
  EXPECT_EQ(code_of([&] { gradient_flow(obj, vec({0.4}), 1.0, 0.1); }), ErrorCode::StepFailure);
}

TEST(GradientFlow, NonFiniteBlowUp) {
  const auto obj = FunctionObjective::from_generic(1, [](const auto& t) { return -0.25 * t[0] * t[0] * t[0] * t[0]; });
  EXPECT_EQ(code_of([&] { gradient_flow(*obj, vec({1.0}), 10.0, 0.1); }), ErrorCode::NonFiniteResult);
}

TEST(GradientFlow, RejectsBadArguments) {
  const auto obj = half_square(2);
  EXPECT_EQ(code_of([&] { gradient_flow(*obj, vec({1, 0}), 1.0, 0.0); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([&] { gradient_flow(*obj, vec({1, 0}), 0.01, 0.1); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([&] { gradient_flow(*obj, vec({1}), 1.0, 0.1); }), ErrorCode::LengthMismatch);
}

// ---------------------------------------------------------------------------
// Gradient descent

TEST(GradientDescent, UpdatesOrthogonalToSymmetryDirections) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  const auto loss = fixtures::loss("softmax_ce", vec({1.0}), 2);
  const ModelLossObjective obj(model, loss);
  TransformSpec reparam;
  reparam.name = "linear_reparam";
  reparam.generator = (Eigen::MatrixXd(2, 2) << 0.3, 0.8, -0.5, 0.1).finished();
  const std::vector<TransformPtr> syms = {fixtures::transform(*model, "layer_rescaling"),
                                          fixtures::transform(*model, reparam)};
  const GdResult r = gradient_descent(obj, model->random_parameters(2), 0.1, 200, {}, syms);
  EXPECT_LE(r.max_orthogonality, 1e-10);
  EXPECT_EQ(r.trajectory.times.size(), 201u);
  EXPECT_EQ(r.trajectory.diagnostic("orthogonality.layer_rescaling").size(), 201u);
}

TEST(GradientDescent, ZeroLearningRateIsConstant) {
  const auto obj = half_square(3);
  const GdResult r = gradient_descent(*obj, vec({1, 2, 3}), 0.0, 10);
  for (const auto& s : r.trajectory.states) EXPECT_EQ(s, vec({1, 2, 3}));
}

TEST(GradientDescent, StabilityBoundaryOscillates) {
  // L = ½θᵀAθ with λ_max = 4: η = 2/λ_max flips the top component every step.
  const Eigen::Vector2d diag(1.0, 4.0);
  const auto obj = FunctionObjective::from_generic(2, [diag](const auto& t) {
    return 0.5 * (diag[0] * t[0] * t[0] + diag[1] * t[1] * t[1]);
  });
  const GdResult r = gradient_descent(*obj, vec({1, 1}), 0.5, 200);
  EXPECT_TRUE(r.oscillation);
  EXPECT_NEAR(std::abs(r.trajectory.states.back()[1]), 1.0, 1e-12);
  const GdResult stable = gradient_descent(*obj, vec({1, 1}), 0.1, 200);
  EXPECT_FALSE(stable.oscillation);
}

// ---------------------------------------------------------------------------
// Norm growth

TEST(NormGrowth, LinearProbeExponentialLoss) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("exponential", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  const Trajectory tr = gradient_flow(obj, vec({0.5, -0.4}), 5.0, 1e-2);
  const NormGrowthReport r = norm_growth_check(*model, *loss, tr);
  EXPECT_TRUE(r.classified);
  EXPECT_GT(r.t0, 0.0);
  EXPECT_TRUE(r.monotone);
  EXPECT_LE(r.max_rel_gap, 1e-7);
  EXPECT_TRUE(r.pass);
  // Chord of ½‖θ‖² against Simpson's rule: fourth-order in the record spacing.
  const NormGrowthReport fine = norm_growth_check(*model, *loss, gradient_flow(obj, vec({0.5, -0.4}), 5.0, 5e-3));
  EXPECT_GT(r.integrated_rel_gap, 0.0);
  EXPECT_GE(r.integrated_rel_gap / fine.integrated_rel_gap, 12.0);
  EXPECT_LE(r.integrated_rel_gap / fine.integrated_rel_gap, 20.0);
  // 1-d closed form: d/dt ½‖θ‖² = ⟨x, θ⟩ exp(−⟨x, θ⟩).
  const Eigen::VectorXd& th = tr.states.back();
  const double y = vec({1, 2}).dot(th);
  const Eigen::VectorXd grad = obj.gradient(th);
  EXPECT_NEAR(-th.dot(grad), y * std::exp(-y), 1e-12);
}

TEST(NormGrowth, TwoHomogeneousRelu) {
  const auto model = fixtures::relu_mlp({2, 3, 1}, 7);
  const auto loss = fixtures::loss("logistic", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  Eigen::VectorXd theta0 = model->random_parameters(1);
  if (forward(*model, theta0)[0] < 0) theta0.tail(3) *= -1.0;
  const Trajectory tr = gradient_flow(obj, theta0, 5.0, 1e-2);
  const NormGrowthReport r = norm_growth_check(*model, *loss, tr);
  EXPECT_TRUE(r.classified);
  EXPECT_TRUE(r.monotone);
  EXPECT_LE(r.max_rel_gap, 1e-7);
}

TEST(NormGrowth, NeverCorrectlyClassified) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("logistic", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  const Trajectory tr = gradient_flow(obj, vec({-3, -3}), 0.5, 1e-2);
  const NormGrowthReport r = norm_growth_check(*model, *loss, tr);
  EXPECT_FALSE(r.classified);
  EXPECT_EQ(r.note, "NeverCorrectlyClassified");
}

TEST(NormGrowth, RequiresMarginLoss) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("square", vec({1.0}), 1);
  const ModelLossObjective obj(model, loss);
  const Trajectory tr = gradient_flow(obj, vec({0.1, 0.1}), 0.1, 1e-2);
  EXPECT_EQ(code_of([&] { norm_growth_check(*model, *loss, tr); }), ErrorCode::InvalidParams);
}

// ---------------------------------------------------------------------------
// Noise covariance

TEST(NoiseCovariance, SingleSampleHasNoVariance) {
  TwoSample s({{vec({1.0, 0.5}), vec({1.0})}});
  const CovarianceReport r = noise_covariance(*s.objective, s.theta0());
  EXPECT_LE(r.Sigma.norm(), 1e-15);
  EXPECT_LE(r.grad_trace.norm(), 1e-14);
}

TEST(NoiseCovariance, TwoPointHandVariance) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("square", vec({0.0}), 1);
  const std::vector<Sample> samples = {{vec({1, 2}), vec({1})}, {vec({-1, 0.5}), vec({2})}};
  const DatasetObjective obj(model, loss, Dataset::uniform(samples));
  const Eigen::VectorXd theta = vec({0.3, -0.7});
  const Eigen::VectorXd g1 = obj.sample(0).gradient(theta);
  const Eigen::VectorXd g2 = obj.sample(1).gradient(theta);
  const CovarianceReport r = noise_covariance(obj, theta);
  const Eigen::MatrixXd expected = 0.25 * (g1 - g2) * (g1 - g2).transpose();
  EXPECT_LE((r.Sigma - expected).norm(), 1e-14);
  EXPECT_NEAR(r.trace, r.Sigma.trace(), 1e-15);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.Sigma);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
}

TEST(NoiseCovariance, TraceGradientMatchesFiniteDifferences) {
  TwoSample s({{vec({1.0, 0.5}), vec({1.0})}, {vec({-0.3, 1.0}), vec({-0.5})}, {vec({0.8, -0.9}), vec({0.2})}});
  ASSERT_EQ(s.model->d(), 6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const CovarianceReport r = noise_covariance(*s.objective, s.model->random_parameters(seed));
    EXPECT_LE(r.fd_rel_gap, 1e-5);
    EXPECT_LE((r.Sigma - r.Sigma.transpose()).norm(), 1e-15);
  }
}

// ---------------------------------------------------------------------------
// Stochastic gradient flow

TEST(Sgf, ZeroNoiseIsEulerFlow) {
  TwoSample s;
  NoiseModel noise;
  noise.sigma = 0.0;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.5, 1e-3, 1, {s.charge});
  const Trajectory& tr = e.trajectories.front();
  // Euler GD with η = dt reaches the same state.
  const GdResult gd = gradient_descent(*s.objective, s.theta0(), 1e-3, 500);
  EXPECT_LE((tr.states.back() - gd.trajectory.states.back()).norm(), 1e-12);
  EXPECT_LE(tr.charge_drift(s.charge.name), 1e-3);
}

TEST(Sgf, Reproducible) {
  TwoSample s;
  NoiseModel noise;
  noise.seed = 99;
  const Ensemble a = sgf(*s.objective, s.theta0(), noise, 0.1, 1e-3, 1, {s.charge});
  const Ensemble b = sgf(*s.objective, s.theta0(), noise, 0.1, 1e-3, 1, {s.charge});
  EXPECT_EQ(a.trajectories[0].states.back(), b.trajectories[0].states.back());
}

TEST(Sgf, IndependentOfWorkerCount) {
  TwoSample s;
  NoiseModel noise;
  noise.seed = 5;
  set_threads("1");
  const Ensemble a = sgf(*s.objective, s.theta0(), noise, 0.05, 1e-3, 16);
  set_threads("4");
  const Ensemble b = sgf(*s.objective, s.theta0(), noise, 0.05, 1e-3, 16);
  set_threads(nullptr);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(a.trajectories[i].states.back(), b.trajectories[i].states.back());
  EXPECT_NE(a.trajectories[0].states.back(), a.trajectories[1].states.back());
}

TEST(Sgf, MinibatchMode) {
  TwoSample s;
  NoiseModel noise;
  noise.mode = NoiseModel::Mode::minibatch;
  noise.seed = 2;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.2, 1e-2, 4, {s.charge});
  EXPECT_NEAR(e.effective_sigma, std::sqrt(0.005), 1e-15);
  EXPECT_EQ(e.trajectories[0].steps, 20);
}

TEST(Sgf, InvalidNoiseModel) {
  TwoSample s;
  NoiseModel noise;
  noise.sigma = -1.0;
  EXPECT_EQ(code_of([&] { sgf(*s.objective, s.theta0(), noise, 0.1, 1e-2, 1); }), ErrorCode::InvalidNoiseModel);
  EXPECT_EQ(code_of([] { parse_noise_mode("langevin"); }), ErrorCode::InvalidNoiseModel);
  EXPECT_EQ(parse_noise_mode("minibatch"), NoiseModel::Mode::minibatch);
}

TEST(Sgf, LargeNoiseWarns) {
  TwoSample s;
  NoiseModel noise;
  noise.sigma = 50.0;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.01, 1e-2, 1, {s.charge});
  EXPECT_FALSE(e.warnings.empty());
}

// ---------------------------------------------------------------------------
// Noether drift

TEST(NoetherDrift, TheoryFormsAgree) {
  TwoSample s({{vec({1.0, 0.5}), vec({1.0})}, {vec({-0.3, 1.0}), vec({-0.5})}, {vec({0.8, -0.9}), vec({0.2})}});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DriftTheory t = drift_theory(*s.objective, s.charge, s.model->random_parameters(seed), 0.1);
    EXPECT_LE(std::abs(t.inner_product - t.trace), 1e-8 * t.scale) << seed;
    EXPECT_GT(std::abs(t.trace), 0.0);
  }
}

TEST(NoetherDrift, BalancednessChargeFormsAgree) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  std::mt19937_64 rng(5);
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back({fixtures::uniform(3, rng), fixtures::uniform(2, rng)});
  const DatasetObjective obj(model, fixtures::loss("square", vec({0.0, 0.0}), 2), Dataset::uniform(samples));
  TransformSpec spec;
  spec.name = "linear_reparam";
  spec.generator = (Eigen::MatrixXd(2, 2) << 0.7, -0.2, -0.2, 0.4).finished();
  const Charge c = noether_charge(*fixtures::transform(*model, spec), *model);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DriftTheory t = drift_theory(obj, c, model->random_parameters(seed), 0.3);
    EXPECT_LE(std::abs(t.inner_product - t.trace), 1e-8 * t.scale) << seed;
  }
}

TEST(NoetherDrift, InsufficientEnsemble) {
  TwoSample s;
  NoiseModel noise;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.01, 1e-3, 50, {s.charge});
  EXPECT_EQ(code_of([&] { noether_drift_check(e, s.charge, *s.objective); }), ErrorCode::InsufficientEnsemble);
}

TEST(NoetherDrift, SingleSampleHasNoDrift) {
  TwoSample s({{vec({1.0, 0.5}), vec({1.0})}});
  NoiseModel noise;
  noise.seed = 4;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.1, 1e-3, 100, {s.charge});
  const DriftReport r = noether_drift_check(e, s.charge, *s.objective);
  EXPECT_EQ(r.theory, 0.0);
  EXPECT_TRUE(r.pass) << r.compensated_residual << " " << r.euler_correction << " " << r.empirical;
}

TEST(NoetherDrift, MonteCarloAgreement) {
  TwoSample s;
  NoiseModel noise;
  noise.sigma = 0.1;
  noise.seed = 17;
  const Ensemble e = sgf(*s.objective, s.theta0(), noise, 0.5, 1e-3, 400, {s.charge});
  const DriftReport r = noether_drift_check(e, s.charge, *s.objective);
  EXPECT_TRUE(r.identity_pass) << r.max_identity_gap;
  EXPECT_TRUE(r.empirical_pass) << r.empirical << " vs " << r.theory << " ± " << r.standard_error;
  EXPECT_NE(r.theory, 0.0);
}
