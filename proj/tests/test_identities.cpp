#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "equichk/catalog.hpp"
#include "equichk/errors.hpp"
#include "equichk/identities.hpp"
#include "equichk/objective.hpp"
#include "fixtures.hpp"

using namespace equichk;
using fixtures::vec;

namespace {

// Probe x = (1, 2), square loss with target 2, θ = (3, −1): y = 1, ℓ' = −1, ℓ'' = 1.
struct HandFixture {
  ModelPtr model = fixtures::probe();
  LossPtr loss = fixtures::loss("square", vec({2.0}), 1);
  Eigen::VectorXd theta = vec({3, -1});
};

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::InvalidParams;
}

Eigen::VectorXd lambda1(double v) { return vec({v}); }

}  // namespace

// ---------------------------------------------------------------------------
// Hand-computed values

TEST(HandFixture, LossGradientAndEuler) {
  HandFixture h;
  const LossDerivatives ld = grad_and_hessian_of_loss(*h.model, *h.loss, h.theta);
  EXPECT_NEAR(ld.value, 0.5, 1e-12);
  EXPECT_NEAR(ld.grad.data()[0], -1.0, 1e-12);
  EXPECT_NEAR(ld.grad.data()[1], -2.0, 1e-12);
  // ⟨∇L, θ⟩ = m ℓ'(y) y = −1
  EXPECT_NEAR(ld.grad.data().dot(h.theta), -1.0, 1e-12);

  const auto t = fixtures::transform(*h.model, "homogeneity_scaling");
  const IdentityReport r = check_first_order(*h.model, *h.loss, *t, h.theta, lambda1(0.0));
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.extra("lhs_value"), -1.0, 1e-12);
  EXPECT_NEAR(r.extra("rhs_value"), -1.0, 1e-12);
}

TEST(HandFixture, HomogeneitySpecialization) {
  HandFixture h;
  const HomogeneityReports r = check_homogeneity_specialization(*h.model, *h.loss, h.theta);
  EXPECT_TRUE(r.action.pass);
  EXPECT_TRUE(r.quadratic.pass);
  EXPECT_NEAR(r.action.extra("coefficient"), -1.0, 1e-12);
  EXPECT_NEAR(r.action.lhs_norm, std::sqrt(5.0), 1e-12);  // ∇²Lθ = (1, 2)
  EXPECT_NEAR(r.quadratic.extra("lhs_value"), 1.0, 1e-12);
  EXPECT_NEAR(r.quadratic.extra("rhs_value"), 1.0, 1e-12);
  EXPECT_EQ(r.action.paper_anchor, paper_anchor("homogeneity_action"));
}

TEST(HandFixture, AlignmentAndSharpness) {
  HandFixture h;
  EXPECT_NEAR(alignment_alpha(*h.model, *h.loss, h.theta), -1.0, 1e-12);
  const IdentityReport align = check_eigen_alignment(*h.model, *h.loss, h.theta);
  EXPECT_TRUE(align.pass) << align.rel_residual;
  EXPECT_NEAR(align.extra("lambda_max"), 5.0, 1e-12);

  const SharpnessResult s = sharpness_bound(*h.model, *h.loss, h.theta);
  EXPECT_NEAR(s.lambda_max, 5.0, 1e-12);
  EXPECT_NEAR(s.bound, 0.1, 1e-12);
  EXPECT_NEAR(s.rayleigh, 0.1, 1e-12);
  EXPECT_NEAR(s.power_lambda_max, 5.0, 1e-8);
  EXPECT_TRUE(s.report.pass);
}

TEST(HandFixture, DegenerateLossIsRefused) {
  HandFixture h;
  const auto loss = fixtures::loss("square", vec({1.0}), 1);  // target = y
  EXPECT_EQ(code_of([&] { check_homogeneity_specialization(*h.model, *loss, h.theta); }), ErrorCode::DegenerateLoss);
  EXPECT_EQ(code_of([&] { alignment_alpha(*h.model, *loss, h.theta); }), ErrorCode::DegenerateLoss);
  EXPECT_EQ(code_of([&] { check_eigen_alignment(*h.model, *loss, h.theta); }), ErrorCode::DegenerateLoss);
}

TEST(HandFixture, AlphaDenominatorZero) {
  // m = 1 with y = 0: m y ℓ'' + (m − 1) ℓ' = 0 while ℓ' = −2.
  HandFixture h;
  const Eigen::VectorXd theta = vec({2, -1});
  EXPECT_EQ(code_of([&] { alignment_alpha(*h.model, *h.loss, theta); }), ErrorCode::DegenerateLoss);
}

// ---------------------------------------------------------------------------
// Degenerate branch

TEST(DegenerateBranch, PassesAtZeroOutput) {
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("square", vec({0.0}), 1);
  const IdentityReport r = check_degenerate_branch(*model, *loss, vec({2, -1}));
  EXPECT_TRUE(r.pass);
  EXPECT_LE(r.rel_residual, 1e-12);
  EXPECT_LE(r.extra("gradient_norm"), 1e-14);
}

TEST(DegenerateBranch, NonzeroTargetLeavesCurvatureAlongTheta) {
  // ℓ' = 0 with y = 1: ∇²Lθ = m y ℓ'' ∇f = (1, 2), so the vanishing claim fails
  // while the gradient is still zero.
  const auto model = fixtures::probe();
  const auto loss = fixtures::loss("square", vec({1.0}), 1);
  const Eigen::VectorXd theta = vec({3, -1});
  const IdentityReport r = check_degenerate_branch(*model, *loss, theta);
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.extra("m_y_l2"), 1.0, 1e-12);
  EXPECT_LE(r.extra("closed_form_gap"), 1e-12);
  EXPECT_LE(r.extra("gradient_norm"), 1e-14);
}

TEST(DegenerateBranch, ReluNetworkClosedForm) {
  const auto model = fixtures::relu_mlp({3, 4, 1});
  const Eigen::VectorXd theta = model->random_parameters(11);
  const double y = forward(*model, theta)[0];
  const auto loss = fixtures::loss("square", vec({y}), 1);
  const IdentityReport r = check_degenerate_branch(*model, *loss, theta);
  EXPECT_LE(r.extra("closed_form_gap"), 1e-10);
  EXPECT_NEAR(r.extra("m_y_l2"), 2.0 * y, 1e-12);
}

TEST(DegenerateBranch, RefusesOffBranch) {
  HandFixture h;
  EXPECT_EQ(code_of([&] { check_degenerate_branch(*h.model, *h.loss, h.theta); }), ErrorCode::InvalidParams);
}

// ---------------------------------------------------------------------------
// Continuous identities

class ContinuousCase : public ::testing::TestWithParam<std::tuple<std::string, std::string>> {};

TEST_P(ContinuousCase, AllThreeIdentitiesHold) {
  const auto& [model_kind, transform_name] = GetParam();
  ModelPtr model;
  LossPtr loss;
  if (model_kind == "relu") {
    model = fixtures::relu_mlp({3, 4, 2});
    loss = fixtures::loss("square", vec({0.4, -0.3}), 2);
  } else if (model_kind == "linear") {
    model = fixtures::deep_linear({3, 2, 2});
    loss = fixtures::loss("softmax_ce", vec({1.0}), 2);
  } else {
    model = fixtures::factored(3, 2, 3);
    loss = fixtures::loss("softmax_ce", vec({2.0}), 3);
  }
  TransformSpec spec;
  spec.name = transform_name;
  if (transform_name == "linear_reparam") spec.generator = (Eigen::MatrixXd(2, 2) << 0.3, 0.8, -0.5, 0.1).finished();
  const auto t = fixtures::transform(*model, spec);
  std::mt19937_64 rng(17);
  for (int pos = 0; pos < 8; ++pos) {
    const Eigen::VectorXd theta = model->random_parameters(100 + static_cast<std::uint64_t>(pos));
    if (model->kink_margin(theta) < 1e-6) continue;
    Eigen::VectorXd lambda = fixtures::uniform(t->p(), rng, -0.3, 0.3);
    const IdentityReport a = check_first_order(*model, *loss, *t, theta, lambda);
    const IdentityReport b = check_second_action(*model, *loss, *t, theta, lambda);
    const IdentityReport c = check_second_quadratic(*model, *loss, *t, theta, lambda);
    EXPECT_TRUE(a.pass) << a.rel_residual;
    EXPECT_TRUE(b.pass) << b.rel_residual << " " << b.note;
    EXPECT_TRUE(c.pass) << c.rel_residual << " " << c.note;
    EXPECT_LE(b.rel_residual, 1e-9);
    EXPECT_LE(c.rel_residual, 1e-9);
  }
}

INSTANTIATE_TEST_SUITE_P(Catalog, ContinuousCase,
                         ::testing::Values(std::make_tuple("relu", "homogeneity_scaling"),
                                           std::make_tuple("relu", "layer_rescaling"),
                                           std::make_tuple("relu", "last_layer_left_action"),
                                           std::make_tuple("linear", "homogeneity_scaling"),
                                           std::make_tuple("linear", "linear_reparam"),
                                           std::make_tuple("linear", "last_layer_left_action"),
                                           std::make_tuple("factored", "last_layer_left_action")));

TEST(TermDropping, SymmetryAndLinearity) {
  const auto model = fixtures::relu_mlp({3, 4, 2});
  const auto loss = fixtures::loss("square", vec({0.4, -0.3}), 2);
  const Eigen::VectorXd theta = model->random_parameters(5);

  // Layer rescaling: symmetric and linear in θ, so only the ∇_λ∇_θH term survives.
  const auto resc = fixtures::transform(*model, "layer_rescaling");
  const IdentityReport r = check_second_action(*model, *loss, *resc, theta, lambda1(0.2));
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.extra("green_norm"), 0.0);
  EXPECT_EQ(r.extra("blue_norm"), 0.0);
  EXPECT_GT(r.extra("term2"), 0.0);

  // Homogeneity scaling: linear but not symmetric.
  const auto homog = fixtures::transform(*model, "homogeneity_scaling");
  const IdentityReport s = check_second_quadratic(*model, *loss, *homog, theta, lambda1(-0.1));
  EXPECT_TRUE(s.pass);
  EXPECT_EQ(s.extra("blue_norm"), 0.0);
  EXPECT_GT(s.extra("green_norm"), 0.0);
}

TEST(TermDropping, ReducedFormMatchesFullForm) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  const auto loss = fixtures::loss("square", vec({0.3, -0.6}), 2);
  const Eigen::VectorXd theta = model->random_parameters(9);
  const auto t = fixtures::transform(*model, "layer_rescaling");
  const SecondOrderTerms st = second_action_terms(*model, *loss, *t, theta, lambda1(0.1));
  ASSERT_EQ(st.terms.size(), 5u);
  EXPECT_LE(norm(st.rhs() - st.reduced_rhs(true, true)), 1e-15);
  EXPECT_LE(relative_difference(st.lhs, st.reduced_rhs(true, true)), 1e-10);
}

TEST(ContinuousChecks, FiniteDifferenceMode) {
  const auto model = fixtures::relu_mlp({3, 4, 1});
  const auto loss = fixtures::loss("logistic", vec({-1.0}), 1);
  const auto t = fixtures::transform(*model, "layer_rescaling");
  CheckOptions opts;
  opts.diff.mode = DiffMode::finite_difference;
  opts.tolerance = kFdTolerance;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Eigen::VectorXd theta = model->random_parameters(200 + s);
    if (model->kink_margin(theta) < 1e-2) continue;
    const IdentityReport r = check_second_action(*model, *loss, *t, theta, lambda1(0.15), opts);
    EXPECT_TRUE(r.pass) << r.rel_residual;
    EXPECT_EQ(r.context.mode, "finite_difference");
  }
}

TEST(ContinuousChecks, PerturbedDerivativeIsCaught) {
  const auto model = fixtures::relu_mlp({3, 4, 1});
  const auto loss = fixtures::loss("exponential", vec({1.0}), 1);
  const auto base = fixtures::transform(*model, "homogeneity_scaling");
  const Eigen::VectorXd theta = model->random_parameters(7);
  const Eigen::VectorXd lambda = lambda1(0.2);
  const PerturbedTransformation bad(base, "d2H_dlambda_dtheta", 0.01, 3);
  EXPECT_TRUE(check_second_action(*model, *loss, *base, theta, lambda).pass);
  EXPECT_FALSE(check_second_action(*model, *loss, bad, theta, lambda).pass);
}

TEST(ContinuousChecks, ReportCarriesContext) {
  HandFixture h;
  const auto t = fixtures::transform(*h.model, "homogeneity_scaling");
  CheckOptions opts;
  opts.context.seed = 42;
  const IdentityReport r = check_first_order(*h.model, *h.loss, *t, h.theta, lambda1(0.25), opts);
  EXPECT_EQ(r.check_name, "first_order");
  EXPECT_EQ(r.paper_anchor, paper_anchor("first_order"));
  EXPECT_EQ(r.context.model, "linear_probe");
  EXPECT_EQ(r.context.transform, "homogeneity_scaling");
  EXPECT_EQ(r.context.loss, "square");
  EXPECT_EQ(r.context.seed, 42u);
  ASSERT_EQ(r.context.lambda.size(), 1u);
  EXPECT_EQ(r.context.lambda[0], 0.25);
}

TEST(ContinuousChecks, BadPositionRefused) {
  const auto model = fixtures::factored(2, 2, 3);
  const auto loss = fixtures::loss("square", vec({0.0, 0.0}), 2);
  const auto t = fixtures::transform(*model, "last_layer_left_action");
  const Eigen::VectorXd lambda = vec({-1, 0, 0, -1});  // I + Λ = 0
  EXPECT_EQ(code_of([&] { check_first_order(*model, *loss, *t, model->random_parameters(1), lambda); }),
            ErrorCode::NotGoodPosition);
}

TEST(Reports, RelativeResidualUsesScale) {
  const IdentityReport r = make_report("first_order", Tensord::scalar(1e-9), Tensord::scalar(0.0), 10.0, 1e-7);
  EXPECT_NEAR(r.rel_residual, 1e-10, 1e-24);
  EXPECT_TRUE(r.pass);
  const IdentityReport z = make_report("first_order", Tensord::scalar(0.0), Tensord::scalar(0.0), 0.0, 1e-7);
  EXPECT_EQ(z.rel_residual, 0.0);
  EXPECT_TRUE(z.pass);
  const IdentityReport nan =
      make_report("first_order", Tensord::scalar(std::nan("")), Tensord::scalar(0.0), 0.0, 1e-7);
  EXPECT_FALSE(nan.pass);
  EXPECT_THROW(make_report("x", Tensord::zeros(Shape{2}), Tensord::zeros(Shape{3}), 0.0, 1.0), Error);
}

// ---------------------------------------------------------------------------
// Discrete identities

TEST(Discrete, MirrorParityIsExact) {
  const auto model = fixtures::parity();
  const auto loss = fixtures::loss("logistic", vec({1.0}), 1);
  const Eigen::MatrixXd O = fixtures::column(2, 0);
  for (double t1 : {-1.3, 0.2, 0.9}) {
    const IdentityReport r = check_mirror(*model, *loss, O, vec({0.0, t1}));
    EXPECT_TRUE(r.pass);
    EXPECT_LE(r.rel_residual, 1e-14);
    EXPECT_LE(r.extra("conjugation_residual"), 1e-14);
    EXPECT_LE(r.extra("formulation_gap"), 1e-12);
  }
}

TEST(Discrete, MirrorOffFixedPointRefused) {
  const auto model = fixtures::parity();
  const auto loss = fixtures::loss("square", vec({0.5}), 1);
  EXPECT_EQ(code_of([&] { check_mirror(*model, *loss, fixtures::column(2, 0), vec({0.3, 1.0})); }),
            ErrorCode::NotFixedPoint);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 1);
  bad(0, 0) = 2.0;
  EXPECT_EQ(code_of([&] { check_mirror(*model, *loss, bad, vec({0.0, 1.0})); }), ErrorCode::InvalidParams);
}

TEST(Discrete, ConjugationAndBlockFormsAgreeOnNonSymmetricFrame) {
  // Frame along θ1 is not a symmetry of the parity model: both forms report
  // the same nonzero defect.
  const auto model = fixtures::parity();
  const auto loss = fixtures::loss("square", vec({0.5}), 1);
  const IdentityReport r = check_mirror(*model, *loss, fixtures::column(2, 1), vec({0.7, 0.0}));
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.extra("conjugation_residual"), 1e-3);
  EXPECT_LE(r.extra("formulation_gap"), 1e-12);
}

TEST(Discrete, FirstAndSecondOnProjectedPoints) {
  const auto model = fixtures::relu_mlp({3, 4, 1});
  const auto loss = fixtures::loss("square", vec({0.2}), 1);
  TransformSpec spec;
  spec.name = "hidden_unit_swap";
  spec.units = {0, 2};
  const auto t = fixtures::transform(*model, spec);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Eigen::VectorXd theta = fixed_point_project(*t, model->random_parameters(300 + s));
    const IdentityReport a = check_discrete_first(*model, *loss, *t, theta);
    const IdentityReport b = check_discrete_second(*model, *loss, *t, theta);
    EXPECT_TRUE(a.pass) << a.rel_residual;
    EXPECT_TRUE(b.pass) << b.rel_residual;
  }
  EXPECT_EQ(code_of([&] { check_discrete_first(*model, *loss, *t, model->random_parameters(1)); }),
            ErrorCode::NotFixedPoint);
}

TEST(Discrete, ContinuousTransformRejected) {
  HandFixture h;
  const auto t = fixtures::transform(*h.model, "homogeneity_scaling");
  EXPECT_EQ(code_of([&] { check_discrete_first(*h.model, *h.loss, *t, h.theta); }), ErrorCode::InvalidParams);
}

// ---------------------------------------------------------------------------
// Last layer

TEST(LastLayer, SoftmaxVarianceForm) {
  const auto model = fixtures::factored(3, 2, 3);
  const auto loss = fixtures::loss("softmax_ce", vec({1.0}), 3);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const IdentityReport r = check_last_layer_alignment(*model, *loss, model->random_parameters(s), 20, s);
    EXPECT_TRUE(r.pass) << r.rel_residual;
    EXPECT_LE(r.extra("variance_rel_residual"), 1e-10);
  }
}

TEST(LastLayer, SquareLossAndLayeredModels) {
  const auto model = fixtures::relu_mlp({3, 4, 2});
  const auto loss = fixtures::loss("square", vec({1.0, -1.0}), 2);
  const IdentityReport r = check_last_layer_alignment(*model, *loss, model->random_parameters(4), 10, 4);
  EXPECT_TRUE(r.pass) << r.rel_residual;
}

TEST(LastLayer, ModelWithoutFeaturesRefused) {
  const auto model = fixtures::parity();
  const auto loss = fixtures::loss("square", vec({0.0}), 1);
  EXPECT_EQ(code_of([&] { check_last_layer_alignment(*model, *loss, vec({0.1, 0.2})); }),
            ErrorCode::NotFactoredModel);
}

// ---------------------------------------------------------------------------
// Stationary points

TEST(Stationary, RealizableDeepLinearHasSymmetryNullSpace) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  const Eigen::VectorXd teacher = model->random_parameters(21);
  std::mt19937_64 rng(8);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) {
    const Eigen::VectorXd x = fixtures::uniform(3, rng);
    samples.push_back({x, forward(*model->with_input(x), teacher)});
  }
  const auto loss = fixtures::loss("square", vec({0.0, 0.0}), 2);
  const DatasetObjective objective(model, loss, Dataset::uniform(samples));

  std::vector<TransformPtr> syms;
  syms.push_back(fixtures::transform(*model, "layer_rescaling"));
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) {
      TransformSpec spec;
      spec.name = "linear_reparam";
      spec.generator = Eigen::MatrixXd::Zero(2, 2);
      spec.generator(i, j) = 1.0;
      syms.push_back(fixtures::transform(*model, spec));
    }
  }
  const StationaryReport r = stationary_null_count(objective, syms, teacher);
  EXPECT_EQ(r.direction_rank, 4);
  EXPECT_GE(r.null_count, 4);
  EXPECT_TRUE(r.report.pass);
  EXPECT_LE(r.report.rel_residual, 1e-10);
  EXPECT_EQ(r.kappa.size(), syms.size());
}

TEST(Stationary, NonStationaryRefused) {
  const auto model = fixtures::deep_linear({3, 2, 2});
  const auto loss = fixtures::loss("square", vec({1.0, 1.0}), 2);
  const ModelLossObjective objective(model, loss);
  EXPECT_EQ(code_of([&] {
              stationary_null_count(objective, {fixtures::transform(*model, "layer_rescaling")},
                                    model->random_parameters(2));
            }),
            ErrorCode::NotConverged);
}

// ---------------------------------------------------------------------------
// Suites

TEST(Suite, EmptyPlan) {
  SuiteSpec plan;
  const auto reports = run_suite(plan);
  EXPECT_TRUE(reports.empty());
  EXPECT_TRUE(all_pass(reports));
}

TEST(Suite, SmallPlanPasses) {
  SuiteSpec plan = full_catalog_suite(2, 5);
  const auto reports = run_suite(plan);
  EXPECT_GT(reports.size(), 100u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.pass) << r.check_name << " " << r.context.label << " " << r.rel_residual << " " << r.note;
    EXPECT_FALSE(r.paper_anchor.empty()) << r.check_name;
  }
}

TEST(Suite, DeterministicForSeed) {
  SuiteSpec plan = full_catalog_suite(1, 9);
  plan.cases.resize(3);
  const auto a = run_suite(plan);
  const auto b = run_suite(plan);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].rel_residual, b[i].rel_residual);
}

TEST(Suite, CheckFilter) {
  SuiteSpec plan = full_catalog_suite(3, 1);
  plan.cases.resize(1);
  plan.cases[0].checks = {"first_order"};
  const auto reports = run_suite(plan);
  ASSERT_FALSE(reports.empty());
  for (const auto& r : reports) EXPECT_EQ(r.check_name, "first_order");
}

TEST(Suite, MutationOfEveryDerivativeIsDetected) {
  for (const std::string& name : derivative_names()) {
    SuiteSpec plan;
    plan.positions = 3;
    plan.seed = 11;
    SuiteCase sc;
    sc.label = "mutation";
    sc.model.kind = "homogeneous_relu_mlp";
    sc.model.widths = {3, 4, 1};
    sc.model.seed = 3;
    sc.loss.kind = "exponential";
    sc.loss.target = vec({1.0});
    TransformSpec t;
    t.name = "homogeneity_scaling";
    sc.transforms = {t};
    plan.cases = {sc};
    EXPECT_TRUE(all_pass(run_suite(plan))) << name;
    plan.mutation = Mutation{name, 0.01, 1};
    EXPECT_FALSE(all_pass(run_suite(plan))) << name;
  }
}
