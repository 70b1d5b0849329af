#include "equichk/transforms.hpp"

#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <random>
#include <type_traits>

namespace equichk {

// ---------------------------------------------------------------------------
// Transformation

void Transformation::check_args(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  if (theta.size() != d_) {
    throw Error(ErrorCode::SizeMismatch, name_ + ": θ has length " + std::to_string(theta.size()) + ", expected " +
                                             std::to_string(d_));
  }
  if (lambda.size() != p_) {
    throw Error(ErrorCode::SizeMismatch, name_ + ": λ has length " + std::to_string(lambda.size()) + ", expected " +
                                             std::to_string(p_));
  }
}

void Transformation::check_output_args(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (y.size() != c_) {
    throw Error(ErrorCode::SizeMismatch, name_ + ": y has length " + std::to_string(y.size()) + ", expected " +
                                             std::to_string(c_));
  }
  if (lambda.size() != p_) throw Error(ErrorCode::SizeMismatch, name_ + ": λ has the wrong length");
}

Eigen::VectorXd Transformation::G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return y;
}

Tensord Transformation::dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::identity(c_);
}

Tensord Transformation::dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::zeros({p_, c_});
}

Tensord Transformation::d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::zeros({c_, c_, c_});
}

Tensord Transformation::d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::zeros({p_, c_, c_});
}

Tensord Transformation::d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::zeros({p_, p_, c_});
}

const std::vector<std::string>& derivative_names() {
  static const std::vector<std::string> names = {
      "dH_dtheta", "dH_dlambda", "d2H_dtheta2", "d2H_dlambda_dtheta", "d2H_dlambda2",
      "dG_dy",     "dG_dlambda", "d2G_dy2",     "d2G_dlambda_dy",     "d2G_dlambda2"};
  return names;
}

Tensord evaluate_derivative(const Transformation& t, const std::string& which, const Eigen::VectorXd& arg,
                            const Eigen::VectorXd& lambda) {
  if (which == "dH_dtheta") return t.dH_dtheta(arg, lambda);
  if (which == "dH_dlambda") return t.dH_dlambda(arg, lambda);
  if (which == "d2H_dtheta2") return t.d2H_dtheta2(arg, lambda);
  if (which == "d2H_dlambda_dtheta") return t.d2H_dlambda_dtheta(arg, lambda);
  if (which == "d2H_dlambda2") return t.d2H_dlambda2(arg, lambda);
  if (which == "dG_dy") return t.dG_dy(arg, lambda);
  if (which == "dG_dlambda") return t.dG_dlambda(arg, lambda);
  if (which == "d2G_dy2") return t.d2G_dy2(arg, lambda);
  if (which == "d2G_dlambda_dy") return t.d2G_dlambda_dy(arg, lambda);
  if (which == "d2G_dlambda2") return t.d2G_dlambda2(arg, lambda);
  throw Error(ErrorCode::UnknownSpec, "unknown derivative '" + which + "'");
}

// ---------------------------------------------------------------------------
// LinearAction

namespace {

/// Stacks per-index rank-2 slices s(q) (each (a, b)) into a (n, a, b) tensor.
template <typename F>
Tensord stack_slices(Index n, Index a, Index b, F slice) {
  Tensord out = Tensord::zeros({n, a, b});
  for (Index q = 0; q < n; ++q) {
    const Tensord s = from_matrix(slice(q));
    out.data().segment(q * a * b, a * b) = s.data();
  }
  return out;
}

}  // namespace

Eigen::VectorXd LinearAction::H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return M(lambda) * theta;
}

Eigen::VectorXd LinearAction::G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return N(lambda) * y;
}

Tensord LinearAction::dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return from_matrix(M(lambda).transpose());
}

Tensord LinearAction::dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  Eigen::MatrixXd rows(p(), d());
  for (Index q = 0; q < p(); ++q) rows.row(q) = (dM(lambda, q) * theta).transpose();
  return from_matrix(rows);
}

Tensord LinearAction::d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return Tensord::zeros({d(), d(), d()});
}

Tensord LinearAction::d2H_dlambda_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return stack_slices(p(), d(), d(), [&](Index q) { return Eigen::MatrixXd(dM(lambda, q).transpose()); });
}

Tensord LinearAction::d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return stack_slices(p(), p(), d(), [&](Index q) {
    Eigen::MatrixXd rows(p(), d());
    for (Index r = 0; r < p(); ++r) rows.row(r) = (d2M(lambda, q, r) * theta).transpose();
    return rows;
  });
}

Tensord LinearAction::dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return from_matrix(N(lambda).transpose());
}

Tensord LinearAction::dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  Eigen::MatrixXd rows(p(), c());
  for (Index q = 0; q < p(); ++q) rows.row(q) = (dN(lambda, q) * y).transpose();
  return from_matrix(rows);
}

Tensord LinearAction::d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return Tensord::zeros({c(), c(), c()});
}

Tensord LinearAction::d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return stack_slices(p(), c(), c(), [&](Index q) { return Eigen::MatrixXd(dN(lambda, q).transpose()); });
}

Tensord LinearAction::d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  check_output_args(y, lambda);
  return stack_slices(p(), p(), c(), [&](Index q) {
    Eigen::MatrixXd rows(p(), c());
    for (Index r = 0; r < p(); ++r) rows.row(r) = (d2N(lambda, q, r) * y).transpose();
    return rows;
  });
}

Eigen::MatrixXd LinearAction::N(const Eigen::VectorXd&) const { return Eigen::MatrixXd::Identity(c(), c()); }

Eigen::MatrixXd LinearAction::dN(const Eigen::VectorXd&, Index) const { return Eigen::MatrixXd::Zero(c(), c()); }

Eigen::MatrixXd LinearAction::d2N(const Eigen::VectorXd&, Index, Index) const {
  return Eigen::MatrixXd::Zero(c(), c());
}

// ---------------------------------------------------------------------------
// DiscreteLinearSymmetry

DiscreteLinearSymmetry::DiscreteLinearSymmetry(std::string name, Eigen::MatrixXd P, Index c)
    : Transformation(std::move(name), 1, P.rows(), c, TransformKind::discrete, true, true), P_(std::move(P)) {
  if (P_.rows() != P_.cols()) throw Error(ErrorCode::InvalidParams, "discrete action must be square");
}

Eigen::VectorXd DiscreteLinearSymmetry::H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return P_ * theta;
}

Tensord DiscreteLinearSymmetry::dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return from_matrix(P_.transpose());
}

Tensord DiscreteLinearSymmetry::d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return Tensord::zeros({d(), d(), d()});
}

namespace {
[[noreturn]] void no_lambda_derivative(const std::string& name) {
  throw Error(ErrorCode::InvalidParams, name + " is discrete and has no λ-derivatives");
}
}  // namespace

Tensord DiscreteLinearSymmetry::dH_dlambda(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  no_lambda_derivative(name());
}
Tensord DiscreteLinearSymmetry::d2H_dlambda_dtheta(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  no_lambda_derivative(name());
}
Tensord DiscreteLinearSymmetry::d2H_dlambda2(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  no_lambda_derivative(name());
}

// ---------------------------------------------------------------------------
// CallbackTransformation

namespace {

/// Copies tensor entries whose leading indices fall in the given half-open ranges.
Tensord sub_tensor(const Tensord& t, const std::vector<std::pair<Index, Index>>& ranges) {
  const Index rank = t.rank();
  std::vector<Index> axes;
  for (Index a = 0; a < rank; ++a) {
    axes.push_back(a < static_cast<Index>(ranges.size()) ? ranges[static_cast<std::size_t>(a)].second -
                                                               ranges[static_cast<std::size_t>(a)].first
                                                         : t.shape()[a]);
  }
  Tensord out = Tensord::zeros(Shape(axes));
  std::vector<Index> idx(static_cast<std::size_t>(rank), 0);
  for (Index flat = 0; flat < out.size(); ++flat) {
    Index rem = flat;
    for (Index a = rank - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = rem % axes[static_cast<std::size_t>(a)];
      rem /= axes[static_cast<std::size_t>(a)];
    }
    Index src = 0;
    for (Index a = 0; a < rank; ++a) {
      const Index off = a < static_cast<Index>(ranges.size()) ? ranges[static_cast<std::size_t>(a)].first : 0;
      src = src * t.shape()[a] + idx[static_cast<std::size_t>(a)] + off;
    }
    out.data()[flat] = t.data()[src];
  }
  return out;
}

}  // namespace

CallbackTransformation::CallbackTransformation(std::string name, Index p, Index d, Index c, bool symmetry,
                                               bool linear, HdMap h, HdMap g)
    : Transformation(std::move(name), p, d, c, TransformKind::continuous, symmetry, linear),
      h_(std::move(h)),
      g_(std::move(g)) {
  if (!h_) throw Error(ErrorCode::InvalidParams, "callback transformation needs H");
  if (!g_ && !symmetry) throw Error(ErrorCode::InvalidParams, "non-symmetry callback transformation needs G");
}

CallbackTransformation::Joint CallbackTransformation::differentiate(const HdMap& map, const Eigen::VectorXd& x,
                                                                    const Eigen::VectorXd& lambda) const {
  const Index n = x.size();
  Eigen::VectorXd z(n + p());
  z << x, lambda;
  auto joint = [&](const auto& zz) {
    using S = typename std::decay_t<decltype(zz)>::Scalar;
    if constexpr (std::is_same_v<S, HyperDual>) {
      return VectorX<HyperDual>(map(zz.head(n), zz.tail(p())));
    } else {
      const VectorX<HyperDual> hz = zz.template cast<HyperDual>();
      const VectorX<HyperDual> out = map(hz.head(n), hz.tail(p()));
      Eigen::VectorXd v(out.size());
      for (Index k = 0; k < out.size(); ++k) v[k] = out[k].v;
      return v;
    }
  };
  return {jacobian(joint, z), second_derivative(joint, z)};
}

namespace {
Eigen::VectorXd value_part(const VectorX<HyperDual>& v) {
  Eigen::VectorXd out(v.size());
  for (Index i = 0; i < v.size(); ++i) out[i] = v[i].v;
  return out;
}
}  // namespace

Eigen::VectorXd CallbackTransformation::H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return value_part(h_(theta.cast<HyperDual>(), lambda.cast<HyperDual>()));
}

Eigen::VectorXd CallbackTransformation::G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::G(y, lambda);
  check_output_args(y, lambda);
  return value_part(g_(y.cast<HyperDual>(), lambda.cast<HyperDual>()));
}

Tensord CallbackTransformation::dH_dtheta(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return sub_tensor(differentiate(h_, theta, lambda).first, {{0, d()}});
}
Tensord CallbackTransformation::dH_dlambda(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return sub_tensor(differentiate(h_, theta, lambda).first, {{d(), d() + p()}});
}
Tensord CallbackTransformation::d2H_dtheta2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return sub_tensor(differentiate(h_, theta, lambda).second, {{0, d()}, {0, d()}});
}
Tensord CallbackTransformation::d2H_dlambda_dtheta(const Eigen::VectorXd& theta,
                                                   const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return sub_tensor(differentiate(h_, theta, lambda).second, {{d(), d() + p()}, {0, d()}});
}
Tensord CallbackTransformation::d2H_dlambda2(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  check_args(theta, lambda);
  return sub_tensor(differentiate(h_, theta, lambda).second, {{d(), d() + p()}, {d(), d() + p()}});
}

Tensord CallbackTransformation::dG_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::dG_dy(y, lambda);
  check_output_args(y, lambda);
  return sub_tensor(differentiate(g_, y, lambda).first, {{0, c()}});
}
Tensord CallbackTransformation::dG_dlambda(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::dG_dlambda(y, lambda);
  check_output_args(y, lambda);
  return sub_tensor(differentiate(g_, y, lambda).first, {{c(), c() + p()}});
}
Tensord CallbackTransformation::d2G_dy2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::d2G_dy2(y, lambda);
  check_output_args(y, lambda);
  return sub_tensor(differentiate(g_, y, lambda).second, {{0, c()}, {0, c()}});
}
Tensord CallbackTransformation::d2G_dlambda_dy(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::d2G_dlambda_dy(y, lambda);
  check_output_args(y, lambda);
  return sub_tensor(differentiate(g_, y, lambda).second, {{c(), c() + p()}, {0, c()}});
}
Tensord CallbackTransformation::d2G_dlambda2(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  if (!g_) return Transformation::d2G_dlambda2(y, lambda);
  check_output_args(y, lambda);
  return sub_tensor(differentiate(g_, y, lambda).second, {{c(), c() + p()}, {c(), c() + p()}});
}

// ---------------------------------------------------------------------------
// Catalog entries

namespace {

/// H = e^λ θ, G = e^{mλ} y.
class HomogeneityScaling final : public LinearAction {
 public:
  HomogeneityScaling(int m, Index d, Index c)
      : LinearAction("homogeneity_scaling", 1, d, c, TransformKind::continuous, false, true), m_(m) {}

  int degree() const { return m_; }

  Eigen::MatrixXd M(const Eigen::VectorXd& l) const override { return std::exp(l[0]) * id(d()); }
  Eigen::MatrixXd dM(const Eigen::VectorXd& l, Index) const override { return std::exp(l[0]) * id(d()); }
  Eigen::MatrixXd d2M(const Eigen::VectorXd& l, Index, Index) const override { return std::exp(l[0]) * id(d()); }

  Eigen::MatrixXd N(const Eigen::VectorXd& l) const override { return std::exp(m_ * l[0]) * id(c()); }
  Eigen::MatrixXd dN(const Eigen::VectorXd& l, Index) const override { return m_ * std::exp(m_ * l[0]) * id(c()); }
  Eigen::MatrixXd d2N(const Eigen::VectorXd& l, Index, Index) const override {
    return static_cast<double>(m_ * m_) * std::exp(m_ * l[0]) * id(c());
  }

 private:
  static Eigen::MatrixXd id(Index n) { return Eigen::MatrixXd::Identity(n, n); }
  int m_;
};

/// Diagonal action: (e^λ W₁, e^{−λ} W₂).
class LayerRescaling final : public LinearAction {
 public:
  LayerRescaling(const ParameterLayout& layout, ParamBlock b1, ParamBlock b2, Index c)
      : LinearAction("layer_rescaling", 1, layout.size(), c, TransformKind::continuous, true, true),
        b1_(std::move(b1)),
        b2_(std::move(b2)) {}

  const ParamBlock& first() const { return b1_; }
  const ParamBlock& second() const { return b2_; }

  Eigen::MatrixXd M(const Eigen::VectorXd& l) const override { return diag(std::exp(l[0]), std::exp(-l[0]), 1.0); }
  Eigen::MatrixXd dM(const Eigen::VectorXd& l, Index) const override {
    return diag(std::exp(l[0]), -std::exp(-l[0]), 0.0);
  }
  Eigen::MatrixXd d2M(const Eigen::VectorXd& l, Index, Index) const override {
    return diag(std::exp(l[0]), std::exp(-l[0]), 0.0);
  }

 private:
  Eigen::MatrixXd diag(double s1, double s2, double rest) const {
    Eigen::VectorXd v = Eigen::VectorXd::Constant(d(), rest);
    v.segment(b1_.offset, b1_.size()).setConstant(s1);
    v.segment(b2_.offset, b2_.size()).setConstant(s2);
    return v.asDiagonal();
  }

  ParamBlock b1_;
  ParamBlock b2_;
};

/// (W₁, W₂) -> (e^{λA} W₁, W₂ e^{−λA}) on row-major blocks.
class LinearReparam final : public LinearAction {
 public:
  LinearReparam(const ParameterLayout& layout, ParamBlock b1, ParamBlock b2, Eigen::MatrixXd A, Index c)
      : LinearAction("linear_reparam", 1, layout.size(), c, TransformKind::continuous, true, true),
        b1_(std::move(b1)),
        b2_(std::move(b2)),
        A_(std::move(A)) {}

  const ParamBlock& first() const { return b1_; }
  const ParamBlock& second() const { return b2_; }
  const Eigen::MatrixXd& generator() const { return A_; }

  Eigen::MatrixXd M(const Eigen::VectorXd& l) const override {
    const Eigen::MatrixXd E = (l[0] * A_).exp();
    const Eigen::MatrixXd F = (-l[0] * A_).exp();
    return assemble(E, F, 1.0);
  }
  Eigen::MatrixXd dM(const Eigen::VectorXd& l, Index) const override {
    const Eigen::MatrixXd E = (l[0] * A_).exp();
    const Eigen::MatrixXd F = (-l[0] * A_).exp();
    return assemble(A_ * E, -A_ * F, 0.0);
  }
  Eigen::MatrixXd d2M(const Eigen::VectorXd& l, Index, Index) const override {
    const Eigen::MatrixXd E = (l[0] * A_).exp();
    const Eigen::MatrixXd F = (-l[0] * A_).exp();
    return assemble(A_ * A_ * E, A_ * A_ * F, 0.0);
  }

 private:
  // Left factor E on W₁ (h × n) and right factor F on W₂ (c × h).
  Eigen::MatrixXd assemble(const Eigen::MatrixXd& E, const Eigen::MatrixXd& F, double rest) const {
    Eigen::MatrixXd m = rest * Eigen::MatrixXd::Identity(d(), d());
    m.block(b1_.offset, b1_.offset, b1_.size(), b1_.size()) =
        Eigen::kroneckerProduct(E, Eigen::MatrixXd::Identity(b1_.cols, b1_.cols));
    m.block(b2_.offset, b2_.offset, b2_.size(), b2_.size()) =
        Eigen::kroneckerProduct(Eigen::MatrixXd::Identity(b2_.rows, b2_.rows), Eigen::MatrixXd(F.transpose()));
    return m;
  }

  ParamBlock b1_;
  ParamBlock b2_;
  Eigen::MatrixXd A_;
};

/// W -> (I + Λ) W on the last layer, y -> (I + Λ) y, Λ = reshape(λ) row-major.
class LastLayerLeftAction final : public LinearAction {
 public:
  LastLayerLeftAction(const ParameterLayout& layout, ParamBlock w, Index c)
      : LinearAction("last_layer_left_action", c * c, layout.size(), c, TransformKind::continuous, false, true),
        w_(std::move(w)) {}

  Eigen::MatrixXd M(const Eigen::VectorXd& l) const override { return assemble(left(l), 1.0); }
  Eigen::MatrixXd dM(const Eigen::VectorXd&, Index q) const override { return assemble(basis(q), 0.0); }
  Eigen::MatrixXd d2M(const Eigen::VectorXd&, Index, Index) const override { return Eigen::MatrixXd::Zero(d(), d()); }

  Eigen::MatrixXd N(const Eigen::VectorXd& l) const override { return left(l); }
  Eigen::MatrixXd dN(const Eigen::VectorXd&, Index q) const override { return basis(q); }

 private:
  Eigen::MatrixXd left(const Eigen::VectorXd& l) const {
    return Eigen::MatrixXd::Identity(c(), c()) + Eigen::Map<const RowMatrixX<double>>(l.data(), c(), c());
  }
  Eigen::MatrixXd basis(Index q) const {
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(c(), c());
    e(q / c(), q % c()) = 1.0;
    return e;
  }
  Eigen::MatrixXd assemble(const Eigen::MatrixXd& left_factor, double rest) const {
    Eigen::MatrixXd m = rest * Eigen::MatrixXd::Identity(d(), d());
    m.block(w_.offset, w_.offset, w_.size(), w_.size()) =
        Eigen::kroneckerProduct(left_factor, Eigen::MatrixXd::Identity(w_.cols, w_.cols));
    return m;
  }

  ParamBlock w_;
};

bool is_layered(const Model& m) { return m.name() == "homogeneous_relu_mlp" || m.name() == "deep_linear"; }

Index layer_count(const Model& m) { return static_cast<Index>(m.layout().blocks().size()); }

/// Blocks on either side of hidden layer `l` (1-based): rows of the first,
/// columns of the second index the hidden units.
std::pair<ParamBlock, ParamBlock> hidden_layer_blocks(const Model& m, Index l) {
  const ParameterLayout& layout = m.layout();
  if (is_layered(m)) {
    if (l < 1 || l >= layer_count(m)) {
      throw Error(ErrorCode::InvalidParams, "hidden layer " + std::to_string(l) + " out of range");
    }
    return {layout.find("W" + std::to_string(l)), layout.find("W" + std::to_string(l + 1))};
  }
  if (m.name() == "factored_last_layer") {
    if (l == 1) return {layout.find("V1"), layout.find("V2")};
    if (l == 2) return {layout.find("V2"), layout.find("W")};
    throw Error(ErrorCode::InvalidParams, "factored_last_layer has hidden layers 1 and 2");
  }
  throw Error(ErrorCode::InvalidParams, m.name() + " has no hidden layers");
}

std::pair<ParamBlock, ParamBlock> consecutive_blocks(const TransformSpec& spec, const Model& m) {
  if (!is_layered(m)) throw Error(ErrorCode::InvalidParams, spec.name + " needs a layered model, got " + m.name());
  if (spec.blocks.empty()) return hidden_layer_blocks(m, 1);
  if (spec.blocks.size() != 2) throw Error(ErrorCode::InvalidParams, spec.name + " needs exactly two blocks");
  const ParamBlock& b1 = m.layout().find(spec.blocks[0]);
  const ParamBlock& b2 = m.layout().find(spec.blocks[1]);
  const auto& blocks = m.layout().blocks();
  for (std::size_t k = 0; k + 1 < blocks.size(); ++k) {
    if (blocks[k].name == b1.name && blocks[k + 1].name == b2.name) return {b1, b2};
  }
  throw Error(ErrorCode::InvalidParams, spec.name + ": blocks " + b1.name + ", " + b2.name + " are not consecutive");
}

Eigen::MatrixXd permutation_matrix(const std::vector<Index>& perm, Index d) {
  if (static_cast<Index>(perm.size()) != d) {
    throw Error(ErrorCode::InvalidParams, "permutation must list all " + std::to_string(d) + " parameters");
  }
  std::vector<bool> seen(static_cast<std::size_t>(d), false);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d, d);
  for (Index i = 0; i < d; ++i) {
    const Index j = perm[static_cast<std::size_t>(i)];
    if (j < 0 || j >= d || seen[static_cast<std::size_t>(j)]) {
      throw Error(ErrorCode::InvalidParams, "not a permutation of 0.." + std::to_string(d - 1));
    }
    seen[static_cast<std::size_t>(j)] = true;
    P(j, i) = 1.0;
  }
  return P;
}

/// Indices of the parameters attached to hidden unit `u` between blocks b1 and b2.
std::vector<Index> unit_entries(const ParamBlock& b1, const ParamBlock& b2, Index u) {
  if (u < 0 || u >= b1.rows || u >= b2.cols) throw Error(ErrorCode::InvalidParams, "hidden unit out of range");
  std::vector<Index> out;
  for (Index j = 0; j < b1.cols; ++j) out.push_back(b1.offset + u * b1.cols + j);
  for (Index r = 0; r < b2.rows; ++r) out.push_back(b2.offset + r * b2.cols + u);
  return out;
}

TransformPtr make_mirror(std::string name, const Eigen::MatrixXd& O, const Model& m) {
  if (O.rows() != m.d() || O.cols() < 1) {
    throw Error(ErrorCode::InvalidParams, "mirror frame must have " + std::to_string(m.d()) + " rows");
  }
  if (!O.allFinite()) throw Error(ErrorCode::InvalidParams, "mirror frame must be finite");
  const Eigen::MatrixXd gram = O.transpose() * O;
  if ((gram - Eigen::MatrixXd::Identity(O.cols(), O.cols())).cwiseAbs().maxCoeff() > 1e-10) {
    throw Error(ErrorCode::InvalidParams, "mirror frame must have orthonormal columns");
  }
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(m.d(), m.d()) - 2.0 * O * O.transpose();
  auto t = std::make_shared<DiscreteLinearSymmetry>(std::move(name), std::move(P), m.c());
  t->set_frame(O);
  return t;
}

TransformPtr make_sign_flip(std::string name, const std::vector<Index>& entries, const Model& m) {
  if (entries.empty()) throw Error(ErrorCode::InvalidParams, "sign flip needs at least one entry");
  Eigen::MatrixXd O = Eigen::MatrixXd::Zero(m.d(), static_cast<Index>(entries.size()));
  std::vector<bool> seen(static_cast<std::size_t>(m.d()), false);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const Index i = entries[k];
    if (i < 0 || i >= m.d() || seen[static_cast<std::size_t>(i)]) {
      throw Error(ErrorCode::InvalidParams, "sign flip entries must be distinct parameter indices");
    }
    seen[static_cast<std::size_t>(i)] = true;
    O(i, static_cast<Index>(k)) = 1.0;
  }
  return make_mirror(std::move(name), O, m);
}

}  // namespace

const std::vector<std::string>& transform_catalog() {
  static const std::vector<std::string> names = {
      "homogeneity_scaling", "layer_rescaling", "linear_reparam",  "last_layer_left_action", "mirror",
      "sign_flip",           "permutation",     "hidden_unit_swap", "hidden_unit_flip"};
  return names;
}

TransformPtr build_transform(const TransformSpec& spec, const Model& model) {
  const Index d = model.d();
  const Index c = model.c();
  if (spec.name == "homogeneity_scaling") {
    const auto declared = model.homogeneity_degree();
    if (!spec.degree && !declared) {
      throw Error(ErrorCode::InvalidParams, model.name() + " declares no homogeneity degree");
    }
    if (spec.degree && declared && *spec.degree != *declared) {
      throw Error(ErrorCode::InvalidParams, "degree " + std::to_string(*spec.degree) + " differs from " +
                                                model.name() + "'s degree " + std::to_string(*declared));
    }
    return std::make_shared<HomogeneityScaling>(spec.degree ? *spec.degree : *declared, d, c);
  }
  if (spec.name == "layer_rescaling") {
    auto [b1, b2] = consecutive_blocks(spec, model);
    return std::make_shared<LayerRescaling>(model.layout(), b1, b2, c);
  }
  if (spec.name == "linear_reparam") {
    if (model.name() != "deep_linear") {
      throw Error(ErrorCode::InvalidParams, "linear_reparam applies to deep_linear, got " + model.name());
    }
    auto [b1, b2] = consecutive_blocks(spec, model);
    const Eigen::MatrixXd& A = spec.generator;
    if (A.rows() != b1.rows || A.cols() != b1.rows) {
      throw Error(ErrorCode::InvalidParams, "generator must be " + std::to_string(b1.rows) + "x" +
                                                std::to_string(b1.rows));
    }
    if (!A.allFinite()) throw Error(ErrorCode::InvalidParams, "generator must be finite");
    return std::make_shared<LinearReparam>(model.layout(), b1, b2, A, c);
  }
  if (spec.name == "last_layer_left_action") {
    const auto block = model.last_layer_block();
    if (!block) throw Error(ErrorCode::InvalidParams, model.name() + " has no last linear layer");
    return std::make_shared<LastLayerLeftAction>(model.layout(), model.layout().find(*block), c);
  }
  if (spec.name == "mirror") return make_mirror("mirror", spec.frame, model);
  if (spec.name == "sign_flip") {
    std::vector<Index> entries = spec.entries;
    for (const auto& name : spec.blocks) {
      const ParamBlock& b = model.layout().find(name);
      for (Index k = 0; k < b.size(); ++k) entries.push_back(b.offset + k);
    }
    return make_sign_flip("sign_flip", entries, model);
  }
  if (spec.name == "permutation") {
    return std::make_shared<DiscreteLinearSymmetry>("permutation", permutation_matrix(spec.permutation, d), c);
  }
  if (spec.name == "hidden_unit_swap") {
    if (model.name() == "parity_pair" || model.name() == "linear_probe") {
      throw Error(ErrorCode::InvalidParams, model.name() + " has no hidden units");
    }
    auto [b1, b2] = hidden_layer_blocks(model, spec.layer);
    if (spec.units.size() != 2 || spec.units[0] == spec.units[1]) {
      throw Error(ErrorCode::InvalidParams, "hidden_unit_swap needs two distinct units");
    }
    const auto a = unit_entries(b1, b2, spec.units[0]);
    const auto b = unit_entries(b1, b2, spec.units[1]);
    std::vector<Index> perm(static_cast<std::size_t>(d));
    for (Index i = 0; i < d; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (std::size_t k = 0; k < a.size(); ++k) std::swap(perm[static_cast<std::size_t>(a[k])], perm[static_cast<std::size_t>(b[k])]);
    return std::make_shared<DiscreteLinearSymmetry>("hidden_unit_swap", permutation_matrix(perm, d), c);
  }
  if (spec.name == "hidden_unit_flip") {
    if (model.name() != "deep_linear" && model.name() != "factored_last_layer") {
      throw Error(ErrorCode::InvalidParams, "hidden_unit_flip needs an odd activation; " + model.name() + " has none");
    }
    auto [b1, b2] = hidden_layer_blocks(model, spec.layer);
    if (spec.units.empty()) throw Error(ErrorCode::InvalidParams, "hidden_unit_flip needs at least one unit");
    std::vector<Index> entries;
    for (Index u : spec.units) {
      const auto e = unit_entries(b1, b2, u);
      entries.insert(entries.end(), e.begin(), e.end());
    }
    return make_sign_flip("hidden_unit_flip", entries, model);
  }
  throw Error(ErrorCode::UnknownSpec, "unknown transform '" + spec.name + "'");
}

// ---------------------------------------------------------------------------
// Characteristic quantities

GoodPositionReport good_position(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                                 const Eigen::VectorXd& lambda) {
  GoodPositionReport r;
  if (t.kind() == TransformKind::discrete) {
    r.discrete = true;
    r.reason = t.name() + " is discrete; continuous characteristic quantities are undefined";
    return r;
  }
  try {
    r.rcond_H = reciprocal_condition(t.dH_dtheta(theta, lambda));
    r.rcond_G = reciprocal_condition(t.dG_dy(forward(model, theta), lambda));
  } catch (const std::exception& e) {
    r.reason = e.what();
    return r;
  }
  r.ok = r.rcond_H >= kGoodPositionThreshold && r.rcond_G >= kGoodPositionThreshold;
  if (!r.ok) r.reason = "Jacobian of H or G is numerically singular";
  return r;
}

namespace {

Tensord checked_inverse(const Tensord& jac, const std::string& what) {
  const double rc = reciprocal_condition(jac);
  if (!(rc >= kGoodPositionThreshold)) {
    throw Error(ErrorCode::NotGoodPosition, what + " has reciprocal condition " + std::to_string(rc));
  }
  return invert_square(jac, kGoodPositionThreshold);
}

void require_continuous(const Transformation& t) {
  if (t.kind() == TransformKind::discrete) {
    throw Error(ErrorCode::NotGoodPosition, t.name() + " is discrete; use the fixed-point identities");
  }
}

}  // namespace

Tensord characteristic_direction(const Transformation& t, const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) {
  require_continuous(t);
  const Tensord inv = checked_inverse(t.dH_dtheta(theta, lambda), "∇_θH");
  return compose(inv, t.dH_dlambda(theta, lambda));
}

Tensord characteristic_output(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& lambda) {
  require_continuous(t);
  const Eigen::VectorXd y = forward(model, theta);
  const Tensord inv = checked_inverse(t.dG_dy(y, lambda), "∇_yG");
  return compose(inv, t.dG_dlambda(y, lambda));
}

double equivariance_residual(const Transformation& t, const Model& model, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& lambda) {
  const Eigen::VectorXd y = forward(model, theta);
  const Eigen::VectorXd lhs = forward(model, t.H(theta, lambda));
  return (lhs - t.G(y, lambda)).norm() / (1.0 + y.norm());
}

std::vector<std::pair<std::string, double>> derivative_fd_discrepancy(const Transformation& t,
                                                                      const Eigen::VectorXd& theta,
                                                                      const Eigen::VectorXd& y,
                                                                      const Eigen::VectorXd& lambda) {
  const Index d = t.d();
  const Index c = t.c();
  const Index p = t.p();
  const bool discrete = t.kind() == TransformKind::discrete;

  // Joint maps z = (x, λ) -> H or G, evaluated in double only.
  auto joint_h = [&](const Eigen::VectorXd& z) { return t.H(z.head(d), z.tail(p)); };
  auto joint_g = [&](const Eigen::VectorXd& z) { return t.G(z.head(c), z.tail(p)); };

  Eigen::VectorXd zh(d + p), zg(c + p);
  zh << theta, lambda;
  zg << y, lambda;
  const Tensord h1 = fd_oracle(joint_h, zh, 1);
  const Tensord h2 = fd_oracle(joint_h, zh, 2);
  const Tensord g1 = fd_oracle(joint_g, zg, 1);
  const Tensord g2 = fd_oracle(joint_g, zg, 2);

  auto gap = [](const Tensord& analytic, const Tensord& fd) { return relative_difference(analytic, fd, 1.0); };

  std::vector<std::pair<std::string, double>> out;
  out.emplace_back("dH_dtheta", gap(t.dH_dtheta(theta, lambda), sub_tensor(h1, {{0, d}})));
  out.emplace_back("d2H_dtheta2", gap(t.d2H_dtheta2(theta, lambda), sub_tensor(h2, {{0, d}, {0, d}})));
  if (!discrete) {
    out.emplace_back("dH_dlambda", gap(t.dH_dlambda(theta, lambda), sub_tensor(h1, {{d, d + p}})));
    out.emplace_back("d2H_dlambda_dtheta",
                     gap(t.d2H_dlambda_dtheta(theta, lambda), sub_tensor(h2, {{d, d + p}, {0, d}})));
    out.emplace_back("d2H_dlambda2", gap(t.d2H_dlambda2(theta, lambda), sub_tensor(h2, {{d, d + p}, {d, d + p}})));
  }
  out.emplace_back("dG_dy", gap(t.dG_dy(y, lambda), sub_tensor(g1, {{0, c}})));
  out.emplace_back("d2G_dy2", gap(t.d2G_dy2(y, lambda), sub_tensor(g2, {{0, c}, {0, c}})));
  if (!discrete) {
    out.emplace_back("dG_dlambda", gap(t.dG_dlambda(y, lambda), sub_tensor(g1, {{c, c + p}})));
    out.emplace_back("d2G_dlambda_dy", gap(t.d2G_dlambda_dy(y, lambda), sub_tensor(g2, {{c, c + p}, {0, c}})));
    out.emplace_back("d2G_dlambda2", gap(t.d2G_dlambda2(y, lambda), sub_tensor(g2, {{c, c + p}, {c, c + p}})));
  }
  return out;
}

Eigen::VectorXd fixed_point_project(const Transformation& t, const Eigen::VectorXd& theta) {
  const auto* disc = dynamic_cast<const DiscreteLinearSymmetry*>(&t);
  if (disc == nullptr) throw Error(ErrorCode::InvalidParams, t.name() + " is not a discrete linear symmetry");
  if (theta.size() != t.d()) throw Error(ErrorCode::SizeMismatch, "θ has the wrong length");
  const Eigen::MatrixXd& P = disc->matrix();
  const double defect = (P * P - Eigen::MatrixXd::Identity(t.d(), t.d())).cwiseAbs().maxCoeff();
  if (defect > 1e-12) {
    throw Error(ErrorCode::NotInvolution, t.name() + " satisfies P² = I only to " + std::to_string(defect));
  }
  if (disc->frame()) {
    const Eigen::MatrixXd& O = *disc->frame();
    return theta - O * (O.transpose() * theta);
  }
  return 0.5 * (theta + P * theta);
}

// ---------------------------------------------------------------------------
// Charges

namespace {

Charge rescaling_charge(const LayerRescaling& t, Index d) {
  const ParamBlock b1 = t.first();
  const ParamBlock b2 = t.second();
  Charge q;
  q.name = "layer_rescaling_charge";
  q.value = [b1, b2](const Eigen::VectorXd& th) {
    return 0.5 * (th.segment(b1.offset, b1.size()).squaredNorm() - th.segment(b2.offset, b2.size()).squaredNorm());
  };
  q.gradient = [b1, b2, d](const Eigen::VectorXd& th) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
    g.segment(b1.offset, b1.size()) = th.segment(b1.offset, b1.size());
    g.segment(b2.offset, b2.size()) = -th.segment(b2.offset, b2.size());
    return g;
  };
  q.hessian = [b1, b2, d](const Eigen::VectorXd&) {
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(d);
    diag.segment(b1.offset, b1.size()).setOnes();
    diag.segment(b2.offset, b2.size()).setConstant(-1.0);
    return Eigen::MatrixXd(diag.asDiagonal());
  };
  return q;
}

Charge reparam_charge(const LinearReparam& t, Index d) {
  const ParamBlock b1 = t.first();
  const ParamBlock b2 = t.second();
  const Eigen::MatrixXd A = t.generator();
  Charge q;
  q.name = "balancedness_charge";
  // ½ Tr(A (W₁W₁ᵀ − W₂ᵀW₂))
  q.value = [b1, b2, A](const Eigen::VectorXd& th) {
    const auto w1 = ParameterLayout::view<double>(th, b1);
    const auto w2 = ParameterLayout::view<double>(th, b2);
    return 0.5 * (A * (w1 * w1.transpose() - w2.transpose() * w2)).trace();
  };
  q.gradient = [b1, b2, A, d](const Eigen::VectorXd& th) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
    const auto w1 = ParameterLayout::view<double>(th, b1);
    const auto w2 = ParameterLayout::view<double>(th, b2);
    ParameterLayout::view<double>(g, b1) = A * w1;
    ParameterLayout::view<double>(g, b2) = -w2 * A;
    return g;
  };
  q.hessian = [b1, b2, A, d](const Eigen::VectorXd&) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d, d);
    h.block(b1.offset, b1.offset, b1.size(), b1.size()) =
        Eigen::kroneckerProduct(A, Eigen::MatrixXd::Identity(b1.cols, b1.cols));
    h.block(b2.offset, b2.offset, b2.size(), b2.size()) =
        -Eigen::kroneckerProduct(Eigen::MatrixXd::Identity(b2.rows, b2.rows), A);
    return h;
  };
  return q;
}

}  // namespace

Charge noether_charge(const Transformation& t, const Model& model) {
  if (t.kind() != TransformKind::continuous || !t.is_symmetry() || t.p() != 1) {
    throw Error(ErrorCode::NotConservative, t.name() + " is not a one-parameter continuous symmetry");
  }
  if (t.d() != model.d()) throw Error(ErrorCode::SizeMismatch, "transform and model disagree on d");
  if (const auto* lin = dynamic_cast<const LinearAction*>(&t)) {
    // ∇_λH(θ, 0) = Kθ is a gradient field iff K is symmetric.
    const Eigen::MatrixXd K = lin->dM(t.identity_lambda(), 0);
    const double curl = (K - K.transpose()).norm();
    if (curl > 1e-12 * std::max(1.0, K.norm())) {
      throw Error(ErrorCode::NotConservative,
                  t.name() + ": ∇_λH(θ, 0) has nonzero curl " + std::to_string(curl) + "; no potential exists");
    }
  }
  if (const auto* r = dynamic_cast<const LayerRescaling*>(&t)) return rescaling_charge(*r, t.d());
  if (const auto* r = dynamic_cast<const LinearReparam*>(&t)) return reparam_charge(*r, t.d());
  throw Error(ErrorCode::NotConservative, "no closed-form charge registered for " + t.name());
}

// ---------------------------------------------------------------------------
// PerturbedTransformation

PerturbedTransformation::PerturbedTransformation(TransformPtr base, std::string which, double rel,
                                                 std::uint64_t seed)
    : Transformation(base->name() + "[" + which + "]", base->p(), base->d(), base->c(), base->kind(),
                     base->is_symmetry(), base->linear_in_theta()),
      base_(std::move(base)),
      which_(std::move(which)),
      rel_(rel),
      seed_(seed) {
  const auto& names = derivative_names();
  if (std::find(names.begin(), names.end(), which_) == names.end()) {
    throw Error(ErrorCode::UnknownSpec, "unknown derivative '" + which_ + "'");
  }
}

Tensord PerturbedTransformation::perturb(const std::string& name, Tensord t) const {
  if (name != which_) return t;
  if (norm(t) > 0.0) return t * (1.0 + rel_);
  std::mt19937_64 rng(seed_);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = rel_ * u(rng);
  return t;
}

Eigen::VectorXd PerturbedTransformation::H(const Eigen::VectorXd& theta, const Eigen::VectorXd& lambda) const {
  return base_->H(theta, lambda);
}
Eigen::VectorXd PerturbedTransformation::G(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda) const {
  return base_->G(y, lambda);
}

#define EQUICHK_PERTURBED(fn, arg)                                                                  \
  Tensord PerturbedTransformation::fn(const Eigen::VectorXd& arg, const Eigen::VectorXd& lambda) const { \
    return perturb(#fn, base_->fn(arg, lambda));                                                    \
  }

EQUICHK_PERTURBED(dH_dtheta, theta)
EQUICHK_PERTURBED(dH_dlambda, theta)
EQUICHK_PERTURBED(d2H_dtheta2, theta)
EQUICHK_PERTURBED(d2H_dlambda_dtheta, theta)
EQUICHK_PERTURBED(d2H_dlambda2, theta)
EQUICHK_PERTURBED(dG_dy, y)
EQUICHK_PERTURBED(dG_dlambda, y)
EQUICHK_PERTURBED(d2G_dy2, y)
EQUICHK_PERTURBED(d2G_dlambda_dy, y)
EQUICHK_PERTURBED(d2G_dlambda2, y)

#undef EQUICHK_PERTURBED

}  // namespace equichk
