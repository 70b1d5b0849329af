#pragma once

// Parameter/output transformation pairs (H, G) with f(H(θ, λ)) = G(f(θ), λ).
//
// Derivative tensors follow the Jacobian convention of tensor.hpp: the
// differentiated variable is the leading axis. For H: R^d × R^p -> R^d,
//   dH_dtheta          (d, d)     [i, b]    = ∂H_b/∂θ_i
//   dH_dlambda         (p, d)     [q, b]    = ∂H_b/∂λ_q
//   d2H_dtheta2        (d, d, d)  [i, j, b] = ∂²H_b/∂θ_i∂θ_j
//   d2H_dlambda_dtheta (p, d, d)  [q, i, b] = ∂²H_b/∂λ_q∂θ_i
//   d2H_dlambda2       (p, p, d)  [q, r, b] = ∂²H_b/∂λ_q∂λ_r
// and likewise for G in (y, λ).

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "equichk/diff.hpp"
#include "equichk/models.hpp"

namespace equichk {

enum class TransformKind { continuous, discrete };

inline constexpr double kGoodPositionThreshold = 1e-12;

class Transformation {
 public:
  virtual ~Transformation() = default;

  const std::string& name() const { return name_; }
  Index p() const { return p_; }
  Index d() const { return d_; }
  Index c() const { return c_; }
  TransformKind kind() const { return kind_; }
  bool is_symmetry() const { return symmetry_; }
  bool linear_in_theta() const { return linear_; }

  virtual Eigen::VectorXd H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;
  virtual Eigen::VectorXd G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;

  virtual Tensord dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;
  virtual Tensord dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;
  virtual Tensord d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;
  virtual Tensord d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;
  virtual Tensord d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const = 0;

  // Defaults describe G = Id.
  virtual Tensord dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;
  virtual Tensord dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;
  virtual Tensord d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;
  virtual Tensord d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;
  virtual Tensord d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;

  /// λ at which H is the identity (continuous) or the reflection point λ₀ (discrete).
  Eigen::VectorXd identity_lambda() const { return Eigen::VectorXd::Zero(p_); }

 protected:
  Transformation(std::string name, Index p, Index d, Index c, TransformKind kind, bool symmetry, bool linear)
      : name_(std::move(name)), p_(p), d_(d), c_(c), kind_(kind), symmetry_(symmetry), linear_(linear) {}

  void check_args(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const;
  void check_output_args(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const;

 private:
  std::string name_;
  Index p_;
  Index d_;
  Index c_;
  TransformKind kind_;
  bool symmetry_;
  bool linear_;
};

using TransformPtr = std::shared_ptr<const Transformation>;

/// Names of the ten derivative callbacks, in declaration order.
const std::vector<std::string>& derivative_names();

/// Evaluates a derivative callback by name (see derivative_names()). The
/// first argument is θ for H-derivatives and y for G-derivatives.
Tensord evaluate_derivative(const Transformation& t, const std::string& which, const Eigen::VectorXd& arg,
                            const Eigen::VectorXd& lambda);

/// H(θ, λ) = M(λ)θ and G(y, λ) = N(λ)y with matrix-valued M, N.
class LinearAction : public Transformation {
 public:
  Eigen::VectorXd H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Eigen::VectorXd G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

  Tensord dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;

  Tensord dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

  virtual Eigen::MatrixXd M(const Eigen::VectorXd& lambda) const = 0;
  virtual Eigen::MatrixXd dM(const Eigen::VectorXd& lambda, Index q) const = 0;
  virtual Eigen::MatrixXd d2M(const Eigen::VectorXd& lambda, Index q, Index r) const = 0;
  virtual Eigen::MatrixXd N(const Eigen::VectorXd& lambda) const;
  virtual Eigen::MatrixXd dN(const Eigen::VectorXd& lambda, Index q) const;
  virtual Eigen::MatrixXd d2N(const Eigen::VectorXd& lambda, Index q, Index r) const;

 protected:
  using Transformation::Transformation;
};

/// Discrete symmetry θ -> Pθ (λ is ignored); λ-derivatives are undefined.
class DiscreteLinearSymmetry : public Transformation {
 public:
  DiscreteLinearSymmetry(std::string name, Eigen::MatrixXd P, Index c);

  const Eigen::MatrixXd& matrix() const { return P_; }
  /// Orthonormal frame O when P = I − 2OOᵀ (mirror transforms).
  const std::optional<Eigen::MatrixXd>& frame() const { return frame_; }
  void set_frame(Eigen::MatrixXd O) { frame_ = std::move(O); }

  Eigen::VectorXd H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;

 private:
  Eigen::MatrixXd P_;
  std::optional<Eigen::MatrixXd> frame_;
};

/// Transformation whose derivatives come from hyper-dual differentiation of
/// user-supplied H and G evaluated on (θ, λ) jointly.
class CallbackTransformation final : public Transformation {
 public:
  using HdMap = std::function<VectorX<HyperDual>(const VectorX<HyperDual>&, const VectorX<HyperDual>&)>;

  CallbackTransformation(std::string name, Index p, Index d, Index c, bool symmetry, bool linear, HdMap h,
                         HdMap g = nullptr);

  Eigen::VectorXd H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Eigen::VectorXd G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

  Tensord dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;

  Tensord dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

 private:
  struct Joint {
    Tensord first;   // (n + p, m)
    Tensord second;  // (n + p, n + p, m)
  };
  Joint differentiate(const HdMap& map, const Eigen::VectorXd& x, const Eigen::VectorXd& lambda) const;

  HdMap h_;
  HdMap g_;
};

/// Catalog request. Unused fields are ignored by entries that do not need them.
struct TransformSpec {
  std::string name;
  std::vector<std::string> blocks;  // layer_rescaling, linear_reparam, sign_flip
  std::optional<int> degree;        // homogeneity_scaling; defaults to the model's
  Eigen::MatrixXd generator;        // linear_reparam A
  Eigen::MatrixXd frame;            // mirror O, (d, k)
  std::vector<Index> permutation;   // permutation: θ_i moves to slot π(i)
  std::vector<Index> entries;       // sign_flip: flat parameter indices
  Index layer = 1;                  // hidden_unit_flip / hidden_unit_swap (1-based)
  std::vector<Index> units;         // hidden units (0-based)
};

/// Builds a catalog transformation bound to `model`'s parameter layout.
TransformPtr build_transform(const TransformSpec& spec, const Model& model);

/// Catalog names understood by build_transform.
const std::vector<std::string>& transform_catalog();

struct GoodPositionReport {
  bool ok = false;
  double rcond_H = 0.0;
  double rcond_G = 0.0;
  bool discrete = false;
  std::string reason;
};

GoodPositionReport good_position(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                                 const Eigen::VectorXd& lambda);

/// X = ∇_θH⁻¹ ∘ ∇_λH, shape (p, d).
Tensord characteristic_direction(const Transformation& t, const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda);

/// Y = ∇_yG⁻¹ ∘ ∇_λG at y = f(θ), shape (p, c).
Tensord characteristic_output(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& lambda);

/// ‖f(H(θ, λ)) − G(f(θ), λ)‖ / (1 + ‖f(θ)‖).
double equivariance_residual(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& lambda);

/// Largest relative disagreement between each analytic derivative callback
/// and central finite differences of H and G; keyed by derivative_names().
std::vector<std::pair<std::string, double>> derivative_fd_discrepancy(const Transformation& t,
                                                                      const Eigen::VectorXd& theta,
                                                                      const Eigen::VectorXd& y,
                                                                      const Eigen::VectorXd& lambda);

/// Projection ½(θ + Pθ) onto the +1 eigenspace of a discrete involution.
Eigen::VectorXd fixed_point_project(const Transformation& t, const Eigen::VectorXd& theta);

struct Charge {
  std::string name;
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> hessian;
};

/// Conserved quantity C with ∇C = ∇_λH(θ, 0) for layer_rescaling and for
/// linear_reparam with a symmetric generator.
Charge noether_charge(const Transformation& t, const Model& model);

/// Wraps a transformation and perturbs one derivative callback: nonzero
/// entries are scaled by (1 + rel), zero tensors receive seeded noise of size rel.
class PerturbedTransformation final : public Transformation {
 public:
  PerturbedTransformation(TransformPtr base, std::string which, double rel = 0.01, std::uint64_t seed = 1);

  const std::string& perturbed() const { return which_; }

  Eigen::VectorXd H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Eigen::VectorXd G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

  Tensord dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;
  Tensord d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const override;

  Tensord dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;
  Tensord d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const override;

 private:
  Tensord perturb(const std::string& name, Tensord t) const;

  TransformPtr base_;
  std::string which_;
  double rel_;
  std::uint64_t seed_;
};

}  // namespace equichk
