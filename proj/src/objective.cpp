#include "equichk/objective.hpp"

#include <algorithm>
#include <cmath>

namespace equichk {

namespace {

void require_length(Index expected, const Eigen::VectorXd& theta) {
  if (theta.size() != expected) {
    throw Error(ErrorCode::SizeMismatch,
                "expected " + std::to_string(expected) + " parameters, got " + std::to_string(theta.size()));
  }
}

}  // namespace

LossDerivatives grad_and_hessian_of_loss(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                         const DiffConfig& cfg) {
  if (model.c() != loss.c()) {
    throw Error(ErrorCode::SizeMismatch, "model output dimension " + std::to_string(model.c()) +
                                             " differs from loss input dimension " + std::to_string(loss.c()));
  }
  require_length(model.d(), theta);
  const Index d = model.d();

  LossDerivatives out;
  out.y = forward(model, theta);
  out.value = loss.value(out.y);
  if (!std::isfinite(out.value)) throw Error(ErrorCode::NonFiniteResult, "loss value is not finite");

  auto total = [&](const auto& th) {
    using S = typename std::decay_t<decltype(th)>::Scalar;
    VectorX<S> v(1);
    v[0] = loss.value(model.forward(th));
    return v;
  };
  out.grad = jacobian(total, theta, cfg).reshaped(Shape{d});
  out.hessian = second_derivative(total, theta, cfg).reshaped(Shape{d, d});

  const auto fmap = model.as_map();
  out.model_jacobian = jacobian(fmap, theta, cfg);
  out.model_hessian = second_derivative(fmap, theta, cfg);
  out.loss_grad = loss_gradient(loss, out.y);
  out.loss_hess = loss_hessian(loss, out.y);

  out.assembled_hessian = compose_k(compose(out.loss_hess, out.model_jacobian), out.model_jacobian, 2) +
                          compose(out.loss_grad, out.model_hessian);
  out.assembly_residual = relative_difference(out.hessian, out.assembled_hessian);
  return out;
}

Eigen::VectorXd Objective::gradient(const Eigen::VectorXd& theta, const DiffConfig& cfg) const {
  require_length(d(), theta);
  return jacobian(as_map(), theta, cfg).data();
}

Eigen::MatrixXd Objective::hessian(const Eigen::VectorXd& theta, const DiffConfig& cfg) const {
  require_length(d(), theta);
  return to_matrix(second_derivative(as_map(), theta, cfg).reshaped(Shape{d(), d()}));
}

HyperDual Objective::seeded(const Eigen::VectorXd& theta, const Eigen::VectorXd& u, const Eigen::VectorXd& v) const {
  require_length(d(), theta);
  return directional(as_map(), theta, u, v)[0];
}

ModelLossObjective::ModelLossObjective(ModelPtr model, LossPtr loss) : model_(std::move(model)), loss_(std::move(loss)) {
  if (model_->c() != loss_->c()) {
    throw Error(ErrorCode::SizeMismatch, "model output dimension differs from loss input dimension");
  }
}

double ModelLossObjective::value(const Eigen::VectorXd& theta) const { return loss_->value(model_->forward(theta)); }

HyperDual ModelLossObjective::value(const VectorX<HyperDual>& theta) const {
  return loss_->value(model_->forward(theta));
}

DatasetObjective::DatasetObjective(const ModelPtr& model_family, const LossPtr& loss_family, Dataset data)
    : data_(std::move(data)), d_(model_family->d()) {
  terms_.reserve(static_cast<std::size_t>(data_.size()));
  for (Index i = 0; i < data_.size(); ++i) {
    const Sample& s = data_.sample(i);
    terms_.emplace_back(model_family->with_input(s.input), loss_family->with_target(s.target));
  }
}

double DatasetObjective::value(const Eigen::VectorXd& theta) const {
  double acc = 0.0;
  for (Index i = 0; i < samples(); ++i) acc += weight(i) * terms_[static_cast<std::size_t>(i)].value(theta);
  return acc;
}

HyperDual DatasetObjective::value(const VectorX<HyperDual>& theta) const {
  HyperDual acc(0.0);
  for (Index i = 0; i < samples(); ++i) acc += weight(i) * terms_[static_cast<std::size_t>(i)].value(theta);
  return acc;
}

}  // namespace equichk
