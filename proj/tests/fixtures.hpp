#pragma once

#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "equichk/models.hpp"
#include "equichk/transforms.hpp"

namespace fixtures {

using equichk::Index;

inline Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Eigen::VectorXd uniform(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd out(n);
  for (Index i = 0; i < n; ++i) out[i] = u(rng);
  return out;
}

inline Eigen::MatrixXd uniform_matrix(Index r, Index c, std::mt19937_64& rng) {
  Eigen::MatrixXd out(r, c);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) out(i, j) = u(rng);
  return out;
}

inline equichk::ModelPtr probe(Eigen::VectorXd x = vec({1, 2})) {
  equichk::ModelSpec s;
  s.kind = "linear_probe";
  s.input = std::move(x);
  return equichk::build_model(s);
}

inline equichk::ModelPtr relu_mlp(std::vector<Index> widths, std::uint64_t seed = 3) {
  equichk::ModelSpec s;
  s.kind = "homogeneous_relu_mlp";
  s.widths = std::move(widths);
  s.seed = seed;
  return equichk::build_model(s);
}

inline equichk::ModelPtr deep_linear(std::vector<Index> widths, std::uint64_t seed = 4) {
  equichk::ModelSpec s;
  s.kind = "deep_linear";
  s.widths = std::move(widths);
  s.seed = seed;
  return equichk::build_model(s);
}

inline equichk::ModelPtr factored(Index c, Index sdim, Index hidden, std::uint64_t seed = 5) {
  equichk::ModelSpec s;
  s.kind = "factored_last_layer";
  s.c = c;
  s.s = sdim;
  s.hidden = hidden;
  s.seed = seed;
  return equichk::build_model(s);
}

inline equichk::ModelPtr parity() {
  equichk::ModelSpec s;
  s.kind = "parity_pair";
  return equichk::build_model(s);
}

inline equichk::LossPtr loss(const std::string& kind, Eigen::VectorXd target, Index c) {
  equichk::LossSpec s;
  s.kind = kind;
  s.target = std::move(target);
  return equichk::build_loss(s, c);
}

inline equichk::TransformPtr transform(const equichk::Model& m, equichk::TransformSpec spec) {
  return equichk::build_transform(spec, m);
}

inline equichk::TransformPtr transform(const equichk::Model& m, const std::string& name) {
  equichk::TransformSpec spec;
  spec.name = name;
  return equichk::build_transform(spec, m);
}

inline Eigen::MatrixXd column(Index d, Index i) {
  Eigen::MatrixXd o = Eigen::MatrixXd::Zero(d, 1);
  o(i, 0) = 1.0;
  return o;
}

}  // namespace fixtures
