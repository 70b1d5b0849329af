#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <random>

#include "equichk/models.hpp"
#include "equichk/objective.hpp"

using namespace equichk;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

ModelPtr probe() {
  ModelSpec s;
  s.kind = "linear_probe";
  s.input = vec({1, 2});
  return build_model(s);
}

ModelPtr relu_mlp(std::vector<Index> widths, std::uint64_t seed = 3) {
  ModelSpec s;
  s.kind = "homogeneous_relu_mlp";
  s.widths = std::move(widths);
  s.seed = seed;
  return build_model(s);
}

ModelPtr deep_linear(std::vector<Index> widths, std::uint64_t seed = 4) {
  ModelSpec s;
  s.kind = "deep_linear";
  s.widths = std::move(widths);
  s.seed = seed;
  return build_model(s);
}

ModelPtr factored(Index c, Index sdim, Index hidden, std::uint64_t seed = 5) {
  ModelSpec s;
  s.kind = "factored_last_layer";
  s.c = c;
  s.s = sdim;
  s.hidden = hidden;
  s.seed = seed;
  return build_model(s);
}

ModelPtr parity() {
  ModelSpec s;
  s.kind = "parity_pair";
  return build_model(s);
}

LossPtr loss(const std::string& kind, Eigen::VectorXd target, Index c) {
  return build_loss({kind, std::move(target)}, c);
}

Eigen::VectorXd random_vector(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

std::vector<ModelPtr> zoo() {
  return {probe(), relu_mlp({2, 2, 1}), relu_mlp({3, 4, 3, 2}), deep_linear({3, 2, 2}), deep_linear({2, 3, 2, 1}),
          factored(3, 2, 3), parity()};
}

}  // namespace

TEST(BuildModel, ReluMlpHandForwardPass) {
  ModelSpec s;
  s.kind = "homogeneous_relu_mlp";
  s.depth = 2;
  s.widths = {2, 2, 1};
  s.input = vec({1, 1});
  const ModelPtr m = build_model(s);
  ASSERT_EQ(m->d(), 6);
  EXPECT_EQ(m->homogeneity_degree(), 2);
  const Eigen::VectorXd theta = vec({1, -1, 2, 0, 1, 1});
  EXPECT_EQ(forward(*m, theta)[0], 2.0);
  EXPECT_EQ(forward(*m, 2.0 * theta)[0], 8.0);
}

TEST(BuildModel, LinearProbeDotProduct) {
  const ModelPtr m = probe();
  EXPECT_EQ(m->d(), 2);
  EXPECT_EQ(m->c(), 1);
  EXPECT_EQ(forward(*m, vec({3, -1}))[0], 1.0);
  EXPECT_EQ(m->homogeneity_degree(), 1);
}

TEST(BuildModel, UnknownKind) {
  ModelSpec s;
  s.kind = "transformer";
  try {
    build_model(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownSpec);
  }
}

TEST(BuildModel, SizeMismatches) {
  ModelSpec s;
  s.kind = "homogeneous_relu_mlp";
  s.widths = {2};
  EXPECT_THROW(build_model(s), Error);
  s.widths = {2, 0, 1};
  EXPECT_THROW(build_model(s), Error);
  s.widths = {2, 2, 1};
  s.depth = 3;
  EXPECT_THROW(build_model(s), Error);
  s.depth = 2;
  s.input = vec({1, 2, 3});
  try {
    build_model(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SizeMismatch);
  }
}

TEST(BuildModel, DeterministicInitialization) {
  const ModelPtr a = relu_mlp({3, 4, 1}, 17);
  const ModelPtr b = relu_mlp({3, 4, 1}, 17);
  const ModelPtr c = relu_mlp({3, 4, 1}, 18);
  EXPECT_EQ(a->initial_parameters(), b->initial_parameters());
  EXPECT_EQ(a->input(), b->input());
  EXPECT_NE(a->initial_parameters(), c->initial_parameters());
  const ParamBlock& w1 = a->layout().find("W1");
  const double bound = 1.0 / std::sqrt(3.0);
  for (Index k = 0; k < w1.size(); ++k) EXPECT_LE(std::abs(a->initial_parameters()[w1.offset + k]), bound);
}

TEST(Forward, ZeroParametersGiveZeroForHomogeneous) {
  for (const auto& m : {relu_mlp({3, 4, 2}), deep_linear({2, 2, 2}), probe()}) {
    EXPECT_EQ(forward(*m, Eigen::VectorXd::Zero(m->d())).norm(), 0.0);
  }
}

TEST(Forward, FactoredZeroLastLayer) {
  const ModelPtr m = factored(3, 2, 4);
  Eigen::VectorXd theta = m->initial_parameters();
  const ParamBlock& w = m->layout().find("W");
  theta.segment(w.offset, w.size()).setZero();
  EXPECT_EQ(forward(*m, theta).norm(), 0.0);
}

TEST(Forward, FactoredIsWTimesFeatures) {
  const ModelPtr m = factored(3, 2, 4);
  const Eigen::VectorXd theta = m->initial_parameters();
  const auto w = ParameterLayout::view<double>(theta, m->layout().find("W"));
  EXPECT_LE((forward(*m, theta) - w * m->features(theta)).norm(), 1e-15);
}

TEST(Forward, RejectsWrongLengthAndNonFinite) {
  const ModelPtr m = probe();
  EXPECT_THROW(forward(*m, vec({1, 2, 3})), Error);
  EXPECT_THROW(forward(*m, vec({1, std::nan("")})), Error);
}

TEST(Forward, HyperDualMatchesDouble) {
  std::mt19937_64 rng(1);
  for (const auto& m : zoo()) {
    const Eigen::VectorXd theta = random_vector(m->d(), rng);
    const Eigen::VectorXd y = m->forward(theta);
    const VectorX<HyperDual> yh = m->forward(VectorX<HyperDual>(theta.cast<HyperDual>()));
    for (Index k = 0; k < y.size(); ++k) EXPECT_EQ(yh[k].v, y[k]) << m->name();
  }
}

TEST(Forward, WithInputRebindsDatum) {
  const ModelPtr m = probe();
  const ModelPtr m2 = m->with_input(vec({2, 0}));
  EXPECT_EQ(forward(*m2, vec({3, -1}))[0], 6.0);
  EXPECT_EQ(m2->input(), vec({2, 0}));
  EXPECT_EQ(forward(*m, vec({3, -1}))[0], 1.0);
  EXPECT_THROW(m->with_input(vec({1})), Error);
}

TEST(Models, HomogeneityCertificate) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> lam(0.0, 3.0);
  for (const auto& m : zoo()) {
    if (!m->homogeneity_degree()) continue;
    const int deg = *m->homogeneity_degree();
    for (int trial = 0; trial < 50; ++trial) {
      const Eigen::VectorXd theta = random_vector(m->d(), rng);
      double l = lam(rng);
      if (l == 0.0) l = 1.0;
      const Eigen::VectorXd lhs = forward(*m, l * theta);
      const Eigen::VectorXd rhs = std::pow(l, deg) * forward(*m, theta);
      EXPECT_LE((lhs - rhs).norm(), 1e-10 * (1.0 + rhs.norm())) << m->name();
    }
  }
}

TEST(Models, ExactDerivativesMatchFd) {
  std::mt19937_64 rng(3);
  for (const auto& m : zoo()) {
    int accepted = 0;
    while (accepted < 20) {
      const Eigen::VectorXd theta = random_vector(m->d(), rng);
      if (m->kink_margin(theta) < 1e-2) continue;
      ++accepted;
      const auto map = m->as_map();
      EXPECT_LE(relative_difference(jacobian(map, theta), fd_oracle(map, theta, 1)), 1e-5) << m->name();
      EXPECT_LE(relative_difference(second_derivative(map, theta), fd_oracle(map, theta, 2)), 1e-4) << m->name();
    }
  }
}

TEST(Models, KinkMargin) {
  ModelSpec s;
  s.kind = "homogeneous_relu_mlp";
  s.widths = {2, 2, 1};
  s.input = vec({1, 1});
  const ModelPtr m = build_model(s);
  EXPECT_EQ(m->kink_margin(vec({1, -1, 2, 0, 1, 1})), 0.0);
  EXPECT_EQ(m->kink_margin(vec({1, 0, 2, 0, 1, 1})), 1.0);
  EXPECT_TRUE(std::isinf(probe()->kink_margin(vec({1, 1}))));
}

TEST(Models, FeaturesRequireFactoredLayer) {
  try {
    parity()->features(vec({1, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotFactoredModel);
  }
}

TEST(Losses, AnalyticDerivativesMatchFd) {
  std::mt19937_64 rng(4);
  const std::vector<LossPtr> losses = {
      loss("square", vec({0.5, -1, 2}), 3), loss("exponential", vec({1}), 1), loss("exponential", vec({-1}), 1),
      loss("logistic", vec({1}), 1),        loss("logistic", vec({-1}), 1),    loss("softmax_ce", vec({2}), 3)};
  for (const auto& l : losses) {
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::VectorXd y = random_vector(l->c(), rng, 3.0);
      auto map = [&](const auto& yy) {
        using S = typename std::decay_t<decltype(yy)>::Scalar;
        VectorX<S> out(1);
        out[0] = l->value(yy);
        return out;
      };
      EXPECT_LE(relative_difference(loss_gradient(*l, y), fd_oracle(map, y, 1).reshaped(Shape{l->c()})), 1e-6)
          << l->name();
      EXPECT_LE(relative_difference(loss_hessian(*l, y), fd_oracle(map, y, 2).reshaped(Shape{l->c(), l->c()})),
                1e-6)
          << l->name();
      EXPECT_LE(relative_difference(loss_gradient(*l, y), jacobian(map, y).reshaped(Shape{l->c()})), 1e-13);
      EXPECT_LE(relative_difference(loss_hessian(*l, y), second_derivative(map, y).reshaped(Shape{l->c(), l->c()})),
                1e-13);
    }
  }
}

TEST(Losses, ExponentialSecondDerivativeEqualsValue) {
  std::mt19937_64 rng(5);
  for (double label : {1.0, -1.0}) {
    const LossPtr l = loss("exponential", vec({label}), 1);
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::VectorXd y = random_vector(1, rng, 3.0);
      EXPECT_NEAR(l->hessian(y)(0, 0), label * label * l->value(y), 1e-14 * l->value(y));
    }
  }
}

TEST(Losses, SoftmaxHessianStructure) {
  std::mt19937_64 rng(6);
  const LossPtr l = loss("softmax_ce", vec({0}), 4);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd y = random_vector(4, rng, 4.0);
    const Eigen::MatrixXd h = l->hessian(y);
    const Eigen::VectorXd e = (y.array() - y.maxCoeff()).exp();
    const Eigen::VectorXd p = e / e.sum();
    Eigen::MatrixXd expected = -p * p.transpose();
    expected.diagonal() += p;
    EXPECT_LE((h - expected).norm(), 1e-15);
    EXPECT_LE(h.rowwise().sum().cwiseAbs().maxCoeff(), 1e-15);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-15);
  }
}

TEST(Losses, StableForLargeLogits) {
  const LossPtr l = loss("logistic", vec({1}), 1);
  EXPECT_NEAR(l->value(vec({-800})), 800.0, 1e-12);
  EXPECT_NEAR(l->value(vec({800})), 0.0, 1e-300);
  const LossPtr sm = loss("softmax_ce", vec({1}), 2);
  EXPECT_NEAR(sm->value(vec({1000, 0})), 1000.0, 1e-9);
}

TEST(Losses, Validation) {
  EXPECT_THROW(loss("square", vec({1}), 2), Error);
  EXPECT_THROW(loss("exponential", vec({0.5}), 1), Error);
  EXPECT_THROW(loss("exponential", vec({1}), 2), Error);
  EXPECT_THROW(loss("softmax_ce", vec({3}), 3), Error);
  try {
    loss("hinge", vec({1}), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownSpec);
  }
}

TEST(Dataset, WeightsMustSumToOne) {
  const Sample s{vec({1, 2}), vec({2})};
  EXPECT_THROW(Dataset({s, s}, {0.5, 0.6}), Error);
  EXPECT_THROW(Dataset({s, s}, {1.5, -0.5}), Error);
  EXPECT_THROW(Dataset({s}, {0.5, 0.5}), Error);
  EXPECT_NO_THROW(Dataset({s, s}, {0.25, 0.75}));
}

TEST(ExpectedLoss, HandFixture) {
  const ModelPtr m = probe();
  const LossPtr l = loss("square", vec({2}), 1);
  const Dataset one = Dataset::uniform({{vec({1, 2}), vec({2})}});
  EXPECT_EQ(expected_loss(*m, *l, one, vec({3, -1})), 0.5);
  const Dataset two = Dataset::uniform({{vec({1, 2}), vec({2})}, {vec({1, 2}), vec({2})}});
  EXPECT_EQ(expected_loss(*m, *l, two, vec({3, -1})), 0.5);
}

TEST(ExpectedLoss, WeightedSumOfSamples) {
  const ModelPtr m = probe();
  const LossPtr l = loss("square", vec({0}), 1);
  const Dataset data({{vec({1, 0}), vec({1})}, {vec({0, 1}), vec({-1})}}, {0.25, 0.75});
  const Eigen::VectorXd theta = vec({2, 3});
  EXPECT_DOUBLE_EQ(expected_loss(*m, *l, data, theta), 0.25 * 0.5 * 1.0 + 0.75 * 0.5 * 16.0);
  const DatasetObjective obj(m, l, data);
  EXPECT_DOUBLE_EQ(obj.value(theta), expected_loss(*m, *l, data, theta));
}

TEST(GradAndHessianOfLoss, HandFixture) {
  const auto r = grad_and_hessian_of_loss(*probe(), *loss("square", vec({2}), 1), vec({3, -1}));
  EXPECT_EQ(r.value, 0.5);
  EXPECT_EQ(r.grad.flatten(), (std::vector<double>{-1, -2}));
  EXPECT_EQ(r.hessian.flatten(), (std::vector<double>{1, 2, 2, 4}));
  EXPECT_EQ(r.assembly_residual, 0.0);
}

TEST(GradAndHessianOfLoss, ConstantLossHasZeroDerivatives) {
  // Square loss on a zero-weight probe direction: l is constant along the output.
  auto obj = FunctionObjective::from_generic(3, [](const auto& th) {
    using S = typename std::decay_t<decltype(th)>::Scalar;
    (void)th;
    return S(4.0);
  });
  const Eigen::VectorXd theta = vec({1, 2, 3});
  EXPECT_EQ(obj->gradient(theta).norm(), 0.0);
  EXPECT_EQ(obj->hessian(theta).norm(), 0.0);
}

TEST(GradAndHessianOfLoss, MinimumOfConvexQuadratic) {
  const auto r = grad_and_hessian_of_loss(*probe(), *loss("square", vec({1}), 1), vec({1, 0}));
  EXPECT_EQ(norm(r.grad), 0.0);
}

TEST(GradAndHessianOfLoss, AssemblyAgreesAcrossZoo) {
  std::mt19937_64 rng(7);
  for (const auto& m : zoo()) {
    const LossPtr l = m->c() == 1 ? loss("logistic", vec({1}), 1) : loss("softmax_ce", vec({0}), m->c());
    int accepted = 0;
    while (accepted < 20) {
      const Eigen::VectorXd theta = random_vector(m->d(), rng);
      if (m->kink_margin(theta) < 1e-6) continue;
      ++accepted;
      const auto r = grad_and_hessian_of_loss(*m, *l, theta);
      EXPECT_LE(r.assembly_residual, 1e-10) << m->name();
      const Eigen::MatrixXd h = to_matrix(r.hessian);
      EXPECT_LE((h - h.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(GradAndHessianOfLoss, RejectsShapeDisagreement) {
  EXPECT_THROW(grad_and_hessian_of_loss(*probe(), *loss("square", vec({1, 2}), 2), vec({1, 1})), Error);
}

TEST(Objective, SeededEvaluationGivesDirectionalDerivatives) {
  std::mt19937_64 rng(8);
  const ModelPtr m = deep_linear({3, 2, 2});
  const ModelLossObjective obj(m, loss("square", vec({0.3, -0.2}), 2));
  const Eigen::VectorXd theta = random_vector(m->d(), rng);
  const Eigen::VectorXd u = random_vector(m->d(), rng);
  const Eigen::VectorXd v = random_vector(m->d(), rng);
  const HyperDual h = obj.seeded(theta, u, v);
  const Eigen::VectorXd g = obj.gradient(theta);
  EXPECT_NEAR(h.d1, g.dot(u), 1e-13);
  EXPECT_NEAR(h.d2, g.dot(v), 1e-13);
  EXPECT_NEAR(h.d12, u.dot(obj.hessian(theta) * v), 1e-12);
}
