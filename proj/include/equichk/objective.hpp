#pragma once

// Scalar training objectives L: R^d -> R and their derivatives.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

#include "equichk/diff.hpp"
#include "equichk/models.hpp"

namespace equichk {

/// Everything the identity checks need at one parameter point.
struct LossDerivatives {
  double value = 0.0;
  Eigen::VectorXd y;         // f(θ)
  Tensord grad;              // ∇L, (d)
  Tensord hessian;           // ∇²L differentiated directly, (d, d)
  Tensord assembled_hessian; // ∇²l∘∇f∘₂∇f + ∇l∘∇²f
  double assembly_residual = 0.0;
  Tensord model_jacobian;    // ∇f, (d, c)
  Tensord model_hessian;     // ∇²f, (d, d, c)
  Tensord loss_grad;         // ∇l(y), (c)
  Tensord loss_hess;         // ∇²l(y), (c, c)
};

LossDerivatives grad_and_hessian_of_loss(const Model& model, const Loss& loss, const Eigen::VectorXd& theta,
                                         const DiffConfig& cfg = {});

class Objective {
 public:
  virtual ~Objective() = default;

  virtual Index d() const = 0;
  virtual double value(const Eigen::VectorXd& theta) const = 0;
  virtual HyperDual value(const VectorX<HyperDual>& theta) const = 0;

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta, const DiffConfig& cfg = {}) const;
  Eigen::MatrixXd hessian(const Eigen::VectorXd& theta, const DiffConfig& cfg = {}) const;

  /// Hyper-dual evaluation seeded with u (e1) and v (e2): d1 = ∇L·u,
  /// d2 = ∇L·v, d12 = uᵀ∇²L v.
  HyperDual seeded(const Eigen::VectorXd& theta, const Eigen::VectorXd& u, const Eigen::VectorXd& v) const;

  auto as_map() const {
    return [this](const auto& theta) {
      using S = typename std::decay_t<decltype(theta)>::Scalar;
      VectorX<S> out(1);
      out[0] = value(theta);
      return out;
    };
  }
};

using ObjectivePtr = std::shared_ptr<const Objective>;

/// L(θ) = l(f(θ)) for one absorbed datum.
class ModelLossObjective final : public Objective {
 public:
  ModelLossObjective(ModelPtr model, LossPtr loss);

  Index d() const override { return model_->d(); }
  double value(const Eigen::VectorXd& theta) const override;
  HyperDual value(const VectorX<HyperDual>& theta) const override;

  const Model& model() const { return *model_; }
  const Loss& loss() const { return *loss_; }
  const ModelPtr& model_ptr() const { return model_; }
  const LossPtr& loss_ptr() const { return loss_; }

 private:
  ModelPtr model_;
  LossPtr loss_;
};

/// L(θ) = Σ μ(x) l_x(f(θ; x)) over a finite dataset.
class DatasetObjective final : public Objective {
 public:
  DatasetObjective(const ModelPtr& model_family, const LossPtr& loss_family, Dataset data);

  Index d() const override { return d_; }
  double value(const Eigen::VectorXd& theta) const override;
  HyperDual value(const VectorX<HyperDual>& theta) const override;

  Index samples() const { return data_.size(); }
  double weight(Index i) const { return data_.weight(i); }
  const ModelLossObjective& sample(Index i) const { return terms_[static_cast<std::size_t>(i)]; }
  const Dataset& data() const { return data_; }

 private:
  Dataset data_;
  std::vector<ModelLossObjective> terms_;
  Index d_;
};

/// Objective from a pair of callables (double and hyper-dual versions).
class FunctionObjective final : public Objective {
 public:
  FunctionObjective(Index d, std::function<double(const Eigen::VectorXd&)> f,
                    std::function<HyperDual(const VectorX<HyperDual>&)> fh)
      : d_(d), f_(std::move(f)), fh_(std::move(fh)) {}

  /// Builds both callables from one generic lambda.
  template <typename F>
  static std::shared_ptr<FunctionObjective> from_generic(Index d, F f) {
    return std::make_shared<FunctionObjective>(
        d, [f](const Eigen::VectorXd& t) { return f(t); }, [f](const VectorX<HyperDual>& t) { return f(t); });
  }

  Index d() const override { return d_; }
  double value(const Eigen::VectorXd& theta) const override { return f_(theta); }
  HyperDual value(const VectorX<HyperDual>& theta) const override { return fh_(theta); }

 private:
  Index d_;
  std::function<double(const Eigen::VectorXd&)> f_;
  std::function<HyperDual(const VectorX<HyperDual>&)> fh_;
};

}  // namespace equichk
