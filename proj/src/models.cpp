#include "equichk/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace equichk {

void ParameterLayout::add(std::string name, Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw Error(ErrorCode::SizeMismatch, "block " + name + " must be non-empty");
  if (contains(name)) throw Error(ErrorCode::InvalidParams, "duplicate block " + name);
  blocks_.push_back({std::move(name), rows, cols, size_});
  size_ += rows * cols;
}

const ParamBlock& ParameterLayout::find(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw Error(ErrorCode::UnknownSpec, "no parameter block named " + name);
}

bool ParameterLayout::contains(const std::string& name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

Index ParameterLayout::index_of(const std::string& name, Index r, Index c) const {
  const ParamBlock& b = find(name);
  if (r < 0 || r >= b.rows || c < 0 || c >= b.cols) {
    throw Error(ErrorCode::IndexOutOfRange, "entry out of range in block " + name);
  }
  return b.offset + r * b.cols + c;
}

Eigen::VectorXd Model::features(const Eigen::VectorXd&) const {
  throw Error(ErrorCode::NotFactoredModel, name() + " has no factored last layer");
}

Eigen::VectorXd Model::random_parameters(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Eigen::VectorXd theta(d());
  for (const auto& b : layout_.blocks()) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(b.cols));
    for (Index k = 0; k < b.size(); ++k) theta[b.offset + k] = scale * unif(rng);
  }
  return theta;
}

namespace {

template <typename Scalar>
VectorX<Scalar> lift_input(const Eigen::VectorXd& x) {
  return x.template cast<Scalar>();
}

/// CRTP glue: Derived supplies `template <class S> VectorX<S> eval(const VectorX<S>&) const`.
template <typename Derived>
class ModelImpl : public Model {
 public:
  using Model::Model;

  Eigen::VectorXd forward(const Eigen::VectorXd& theta) const override { return self().eval(theta); }
  VectorX<HyperDual> forward(const VectorX<HyperDual>& theta) const override { return self().eval(theta); }

  ModelPtr with_input(const Eigen::VectorXd& x) const override {
    if (x.size() != input().size()) {
      throw Error(ErrorCode::SizeMismatch, name() + " expects inputs of length " + std::to_string(input().size()));
    }
    if (!x.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "model input must be finite");
    auto copy = std::make_shared<Derived>(self());
    copy->set_input(x);
    return copy;
  }

  void seed_parameters(std::uint64_t seed) { set_initial_parameters(random_parameters(seed)); }

 protected:
  const Eigen::VectorXd& datum() const { return input(); }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

class LinearProbe final : public ModelImpl<LinearProbe> {
 public:
  explicit LinearProbe(const Eigen::VectorXd& x)
      : ModelImpl("linear_probe", 1, make_layout(x.size()), x, 1, std::string("w")) {}

  template <typename S>
  VectorX<S> eval(const VectorX<S>& theta) const {
    VectorX<S> out(1);
    out[0] = theta.dot(lift_input<S>(datum()));
    return out;
  }

  Eigen::VectorXd features(const Eigen::VectorXd&) const override { return datum(); }

 private:
  static ParameterLayout make_layout(Index n) {
    ParameterLayout l;
    l.add("w", 1, n);
    return l;
  }
};

/// f = W_L σ(... σ(W_1 x)); σ = relu or identity.
class LayeredNet : public ModelImpl<LayeredNet> {
 public:
  LayeredNet(std::string kind, bool relu_hidden, const std::vector<Index>& widths, const Eigen::VectorXd& x)
      : ModelImpl(std::move(kind), widths.back(), make_layout(widths), x, static_cast<int>(widths.size() - 1),
                  "W" + std::to_string(widths.size() - 1)),
        relu_hidden_(relu_hidden) {}

  template <typename S>
  VectorX<S> eval(const VectorX<S>& theta) const {
    VectorX<S> h = lift_input<S>(datum());
    const auto& blocks = layout().blocks();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      VectorX<S> z = ParameterLayout::view(theta, blocks[l]) * h;
      if (relu_hidden_ && l + 1 < blocks.size()) {
        for (Index k = 0; k < z.size(); ++k) z[k] = relu(z[k]);
      }
      h = std::move(z);
    }
    return h;
  }

  Eigen::VectorXd features(const Eigen::VectorXd& theta) const override {
    Eigen::VectorXd h = datum();
    const auto& blocks = layout().blocks();
    for (std::size_t l = 0; l + 1 < blocks.size(); ++l) {
      Eigen::VectorXd z = ParameterLayout::view(theta, blocks[l]) * h;
      if (relu_hidden_) z = z.cwiseMax(0.0);
      h = std::move(z);
    }
    return h;
  }

  double kink_margin(const Eigen::VectorXd& theta) const override {
    if (!relu_hidden_) return std::numeric_limits<double>::infinity();
    double margin = std::numeric_limits<double>::infinity();
    Eigen::VectorXd h = datum();
    const auto& blocks = layout().blocks();
    for (std::size_t l = 0; l + 1 < blocks.size(); ++l) {
      Eigen::VectorXd z = ParameterLayout::view(theta, blocks[l]) * h;
      margin = std::min(margin, z.cwiseAbs().minCoeff());
      h = z.cwiseMax(0.0);
    }
    return margin;
  }

 private:
  static ParameterLayout make_layout(const std::vector<Index>& widths) {
    ParameterLayout l;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
      l.add("W" + std::to_string(k + 1), widths[k + 1], widths[k]);
    }
    return l;
  }

  bool relu_hidden_;
};

/// f = W h(θ'), h = tanh(V2 tanh(V1 x)).
class FactoredLastLayer final : public ModelImpl<FactoredLastLayer> {
 public:
  FactoredLastLayer(Index c, Index s, Index hidden, const Eigen::VectorXd& x)
      : ModelImpl("factored_last_layer", c, make_layout(c, s, hidden, x.size()), x, std::nullopt, std::string("W")) {}

  template <typename S>
  VectorX<S> eval(const VectorX<S>& theta) const {
    return ParameterLayout::view(theta, layout().find("W")) * feature_map(theta);
  }

  Eigen::VectorXd features(const Eigen::VectorXd& theta) const override { return feature_map(theta); }

 private:
  template <typename S>
  VectorX<S> feature_map(const VectorX<S>& theta) const {
    using std::tanh;
    VectorX<S> a = ParameterLayout::view(theta, layout().find("V1")) * lift_input<S>(datum());
    for (Index k = 0; k < a.size(); ++k) a[k] = tanh(a[k]);
    VectorX<S> h = ParameterLayout::view(theta, layout().find("V2")) * a;
    for (Index k = 0; k < h.size(); ++k) h[k] = tanh(h[k]);
    return h;
  }

  static ParameterLayout make_layout(Index c, Index s, Index hidden, Index n) {
    ParameterLayout l;
    l.add("W", c, s);
    l.add("V1", hidden, n);
    l.add("V2", s, hidden);
    return l;
  }
};

/// f(θ) = x0·θ0² + x1·θ1 + θ0²·θ1, even in θ0.
class ParityPair final : public ModelImpl<ParityPair> {
 public:
  explicit ParityPair(const Eigen::VectorXd& x) : ModelImpl("parity_pair", 1, make_layout(), x, std::nullopt, std::nullopt) {}

  template <typename S>
  VectorX<S> eval(const VectorX<S>& theta) const {
    const Eigen::VectorXd& x = datum();
    VectorX<S> out(1);
    const S sq = theta[0] * theta[0];
    out[0] = S(x[0]) * sq + S(x[1]) * theta[1] + sq * theta[1];
    return out;
  }

 private:
  static ParameterLayout make_layout() {
    ParameterLayout l;
    l.add("theta", 1, 2);
    return l;
  }
};

Eigen::VectorXd draw_input(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Eigen::VectorXd x(n);
  for (Index i = 0; i < n; ++i) x[i] = unif(rng);
  return x;
}

Eigen::VectorXd resolve_input(const ModelSpec& spec, Index n) {
  if (spec.input.size() == 0) return draw_input(n, spec.seed);
  if (spec.input.size() != n) {
    throw Error(ErrorCode::SizeMismatch, spec.kind + ": input has length " + std::to_string(spec.input.size()) +
                                             ", expected " + std::to_string(n));
  }
  if (!spec.input.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "model input must be finite");
  return spec.input;
}

void check_widths(const ModelSpec& spec) {
  if (spec.widths.size() < 2) throw Error(ErrorCode::SizeMismatch, spec.kind + " needs at least two widths");
  for (Index w : spec.widths) {
    if (w < 1) throw Error(ErrorCode::SizeMismatch, spec.kind + ": widths must be positive");
  }
  if (spec.depth != 0 && spec.depth != static_cast<Index>(spec.widths.size()) - 1) {
    throw Error(ErrorCode::SizeMismatch, spec.kind + ": depth " + std::to_string(spec.depth) +
                                             " disagrees with " + std::to_string(spec.widths.size()) + " widths");
  }
}

template <typename M>
ModelPtr finish(std::shared_ptr<M> model, std::uint64_t seed) {
  model->seed_parameters(seed);
  return model;
}

}  // namespace

ModelPtr build_model(const ModelSpec& spec) {
  if (spec.kind == "linear_probe") {
    Index n = spec.input.size();
    if (n == 0) {
      if (spec.widths.empty()) throw Error(ErrorCode::SizeMismatch, "linear_probe needs an input or widths=[n]");
      n = spec.widths.front();
    }
    if (n < 1) throw Error(ErrorCode::SizeMismatch, "linear_probe input must be non-empty");
    return finish(std::make_shared<LinearProbe>(resolve_input(spec, n)), spec.seed);
  }
  if (spec.kind == "homogeneous_relu_mlp" || spec.kind == "deep_linear") {
    check_widths(spec);
    const bool relu_hidden = spec.kind == "homogeneous_relu_mlp";
    return finish(std::make_shared<LayeredNet>(spec.kind, relu_hidden, spec.widths,
                                               resolve_input(spec, spec.widths.front())),
                  spec.seed);
  }
  if (spec.kind == "factored_last_layer") {
    if (spec.c < 1 || spec.s < 1 || spec.hidden < 1) {
      throw Error(ErrorCode::SizeMismatch, "factored_last_layer needs positive c, s and hidden");
    }
    const Index n = spec.input.size() ? spec.input.size() : (spec.widths.empty() ? 2 : spec.widths.front());
    return finish(std::make_shared<FactoredLastLayer>(spec.c, spec.s, spec.hidden, resolve_input(spec, n)), spec.seed);
  }
  if (spec.kind == "parity_pair") {
    const Eigen::VectorXd x = spec.input.size() ? resolve_input(spec, 2) : Eigen::VectorXd::Ones(2);
    return finish(std::make_shared<ParityPair>(x), spec.seed);
  }
  throw Error(ErrorCode::UnknownSpec, "unknown model kind '" + spec.kind + "'");
}

Eigen::VectorXd forward(const Model& model, const Eigen::VectorXd& theta) {
  if (theta.size() != model.d()) {
    throw Error(ErrorCode::SizeMismatch, model.name() + " has " + std::to_string(model.d()) + " parameters, got " +
                                             std::to_string(theta.size()));
  }
  if (!theta.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "parameters must be finite");
  Eigen::VectorXd y = model.forward(theta);
  if (!y.allFinite()) throw Error(ErrorCode::NonFiniteResult, model.name() + " produced a non-finite output");
  return y;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

template <typename Derived>
class LossImpl : public Loss {
 public:
  using Loss::Loss;

  double value(const Eigen::VectorXd& y) const override { return self().eval(y); }
  HyperDual value(const VectorX<HyperDual>& y) const override { return self().eval(y); }

  LossPtr with_target(const Eigen::VectorXd& target) const override {
    return std::make_shared<Derived>(c(), Derived::validate_target(target, c()));
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

class SquareLoss final : public LossImpl<SquareLoss> {
 public:
  SquareLoss(Index c, Eigen::VectorXd target) : LossImpl("square", c, std::move(target)) {}

  static Eigen::VectorXd validate_target(const Eigen::VectorXd& t, Index c) {
    if (t.size() != c) throw Error(ErrorCode::SizeMismatch, "square loss target must have length " + std::to_string(c));
    return t;
  }

  template <typename S>
  S eval(const VectorX<S>& y) const {
    S acc(0.0);
    for (Index k = 0; k < y.size(); ++k) {
      const S r = y[k] - S(target()[k]);
      acc += r * r;
    }
    return S(0.5) * acc;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const override { return y - target(); }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& y) const override {
    return Eigen::MatrixXd::Identity(y.size(), y.size());
  }
};

double validate_label(const Eigen::VectorXd& t, Index c, const std::string& name) {
  if (c != 1) throw Error(ErrorCode::SizeMismatch, name + " loss needs scalar model output");
  if (t.size() != 1 || (t[0] != 1.0 && t[0] != -1.0)) {
    throw Error(ErrorCode::InvalidParams, name + " loss label must be -1 or +1");
  }
  return t[0];
}

/// l(y) = exp(-y·ŷ).
class ExponentialLoss final : public LossImpl<ExponentialLoss> {
 public:
  ExponentialLoss(Index c, Eigen::VectorXd target) : LossImpl("exponential", c, std::move(target)) {}

  static Eigen::VectorXd validate_target(const Eigen::VectorXd& t, Index c) {
    validate_label(t, c, "exponential");
    return t;
  }

  template <typename S>
  S eval(const VectorX<S>& y) const {
    using std::exp;
    return exp(-y[0] * S(label()));
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const override {
    return Eigen::VectorXd::Constant(1, -label() * std::exp(-y[0] * label()));
  }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& y) const override {
    return Eigen::MatrixXd::Constant(1, 1, label() * label() * std::exp(-y[0] * label()));
  }

 private:
  double label() const { return target()[0]; }
};

template <typename S>
S softplus(const S& z) {
  using std::exp;
  using std::log1p;
  return value_of(z) > 0.0 ? z + log1p(exp(-z)) : log1p(exp(z));
}

/// l(y) = log(1 + exp(-y·ŷ)).
class LogisticLoss final : public LossImpl<LogisticLoss> {
 public:
  LogisticLoss(Index c, Eigen::VectorXd target) : LossImpl("logistic", c, std::move(target)) {}

  static Eigen::VectorXd validate_target(const Eigen::VectorXd& t, Index c) {
    validate_label(t, c, "logistic");
    return t;
  }

  template <typename S>
  S eval(const VectorX<S>& y) const {
    return softplus(-y[0] * S(label()));
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const override {
    const double s = sigmoid(-y[0] * label());
    return Eigen::VectorXd::Constant(1, -label() * s);
  }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& y) const override {
    const double s = sigmoid(-y[0] * label());
    return Eigen::MatrixXd::Constant(1, 1, label() * label() * s * (1.0 - s));
  }

 private:
  static double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  double label() const { return target()[0]; }
};

/// l(y) = logsumexp(y) − y_k for class k.
class SoftmaxCrossEntropy final : public LossImpl<SoftmaxCrossEntropy> {
 public:
  SoftmaxCrossEntropy(Index c, Eigen::VectorXd target) : LossImpl("softmax_ce", c, std::move(target)) {}

  static Eigen::VectorXd validate_target(const Eigen::VectorXd& t, Index c) {
    if (c < 2) throw Error(ErrorCode::SizeMismatch, "softmax_ce needs at least two outputs");
    if (t.size() != 1 || t[0] != std::floor(t[0]) || t[0] < 0 || t[0] >= static_cast<double>(c)) {
      throw Error(ErrorCode::InvalidParams, "softmax_ce target must be a class index in [0, c)");
    }
    return t;
  }

  template <typename S>
  S eval(const VectorX<S>& y) const {
    using std::exp;
    using std::log;
    double shift = value_of(y[0]);
    for (Index k = 1; k < y.size(); ++k) shift = std::max(shift, value_of(y[k]));
    S acc(0.0);
    for (Index k = 0; k < y.size(); ++k) acc += exp(y[k] - S(shift));
    return log(acc) + S(shift) - y[cls()];
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const override {
    Eigen::VectorXd g = probabilities(y);
    g[cls()] -= 1.0;
    return g;
  }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& y) const override {
    const Eigen::VectorXd p = probabilities(y);
    Eigen::MatrixXd h = -p * p.transpose();
    h.diagonal() += p;
    return h;
  }

  static Eigen::VectorXd probabilities(const Eigen::VectorXd& y) {
    const Eigen::VectorXd e = (y.array() - y.maxCoeff()).exp();
    return e / e.sum();
  }

 private:
  Index cls() const { return static_cast<Index>(target()[0]); }
};

}  // namespace

LossPtr build_loss(const LossSpec& spec, Index c) {
  if (c < 1) throw Error(ErrorCode::SizeMismatch, "loss input dimension must be positive");
  if (!spec.target.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "loss target must be finite");
  if (spec.kind == "square") return std::make_shared<SquareLoss>(c, SquareLoss::validate_target(spec.target, c));
  if (spec.kind == "exponential") {
    return std::make_shared<ExponentialLoss>(c, ExponentialLoss::validate_target(spec.target, c));
  }
  if (spec.kind == "logistic") return std::make_shared<LogisticLoss>(c, LogisticLoss::validate_target(spec.target, c));
  if (spec.kind == "softmax_ce") {
    return std::make_shared<SoftmaxCrossEntropy>(c, SoftmaxCrossEntropy::validate_target(spec.target, c));
  }
  throw Error(ErrorCode::UnknownSpec, "unknown loss kind '" + spec.kind + "'");
}

bool is_classification_loss(const Loss& loss) {
  return loss.name() == "exponential" || loss.name() == "logistic";
}

Tensord loss_gradient(const Loss& loss, const Eigen::VectorXd& y) { return from_vector<double>(loss.gradient(y)); }

Tensord loss_hessian(const Loss& loss, const Eigen::VectorXd& y) { return from_matrix(loss.hessian(y)); }

// ---------------------------------------------------------------------------

Dataset::Dataset(std::vector<Sample> samples, std::vector<double> weights)
    : samples_(std::move(samples)), weights_(std::move(weights)) {
  if (samples_.empty()) throw Error(ErrorCode::SizeMismatch, "dataset must be non-empty");
  if (weights_.size() != samples_.size()) {
    throw Error(ErrorCode::LengthMismatch, "dataset needs one weight per sample");
  }
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw Error(ErrorCode::InvalidParams, "dataset weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw Error(ErrorCode::InvalidParams, "dataset weights must sum to 1");
}

Dataset Dataset::uniform(std::vector<Sample> samples) {
  const std::size_t n = samples.size();
  if (n == 0) throw Error(ErrorCode::SizeMismatch, "dataset must be non-empty");
  return Dataset(std::move(samples), std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

double expected_loss(const Model& model, const Loss& loss_family, const Dataset& data, const Eigen::VectorXd& theta) {
  double total = 0.0;
  for (Index i = 0; i < data.size(); ++i) {
    const auto& s = data.sample(i);
    const ModelPtr m = model.with_input(s.input);
    const LossPtr l = loss_family.with_target(s.target);
    total += data.weight(i) * l->value(forward(*m, theta));
  }
  if (!std::isfinite(total)) throw Error(ErrorCode::NonFiniteResult, "expected loss is not finite");
  return total;
}

}  // namespace equichk
