#pragma once

// Small differentiable models f: R^d -> R^c and losses l: R^c -> R.
//
// Every model absorbs one input datum into its definition; `with_input`
// rebinds the datum so a Dataset can evaluate per-sample losses. Forward
// passes are available for double and HyperDual parameters.

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "equichk/hyperdual.hpp"
#include "equichk/tensor.hpp"

namespace equichk {

struct ParamBlock {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;

  Index size() const { return rows * cols; }
};

/// Named row-major blocks laid out contiguously in the parameter vector.
class ParameterLayout {
 public:
  void add(std::string name, Index rows, Index cols);

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& find(const std::string& name) const;
  bool contains(const std::string& name) const;
  Index size() const { return size_; }

  /// Index of block entry (r, c) in the flat parameter vector.
  Index index_of(const std::string& name, Index r, Index c) const;

  template <typename Scalar>
  static Eigen::Map<const RowMatrixX<Scalar>> view(const VectorX<Scalar>& theta, const ParamBlock& b) {
    return {theta.data() + b.offset, b.rows, b.cols};
  }
  template <typename Scalar>
  static Eigen::Map<RowMatrixX<Scalar>> view(VectorX<Scalar>& theta, const ParamBlock& b) {
    return {theta.data() + b.offset, b.rows, b.cols};
  }

 private:
  std::vector<ParamBlock> blocks_;
  Index size_ = 0;
};

/// Catalog request. `kind` is one of linear_probe, homogeneous_relu_mlp,
/// deep_linear, factored_last_layer, parity_pair.
struct ModelSpec {
  std::string kind;
  std::vector<Index> widths;  // [n, h1, ..., c] for the layered models
  Index depth = 0;            // optional cross-check against widths
  Index c = 0;                // factored_last_layer
  Index s = 0;
  Index hidden = 0;
  Eigen::VectorXd input;      // absorbed datum; drawn from `seed` when empty
  std::uint64_t seed = 0;
};

class Model {
 public:
  virtual ~Model() = default;

  const std::string& name() const { return name_; }
  Index d() const { return layout_.size(); }
  Index c() const { return c_; }
  const ParameterLayout& layout() const { return layout_; }
  std::optional<int> homogeneity_degree() const { return degree_; }
  std::optional<std::string> last_layer_block() const { return last_layer_; }
  const Eigen::VectorXd& input() const { return input_; }
  const Eigen::VectorXd& initial_parameters() const { return theta0_; }

  virtual Eigen::VectorXd forward(const Eigen::VectorXd& theta) const = 0;
  virtual VectorX<HyperDual> forward(const VectorX<HyperDual>& theta) const = 0;

  /// Feature vector h(θ') feeding the last linear layer, f = W h.
  virtual Eigen::VectorXd features(const Eigen::VectorXd& theta) const;

  /// Smallest |pre-activation| over ReLU units; +inf for smooth models.
  virtual double kink_margin(const Eigen::VectorXd&) const { return std::numeric_limits<double>::infinity(); }

  virtual std::shared_ptr<const Model> with_input(const Eigen::VectorXd& x) const = 0;

  /// Per-block uniform[-1, 1] / sqrt(fan-in) draw.
  Eigen::VectorXd random_parameters(std::uint64_t seed) const;

  /// Callable usable by the differentiation routines.
  auto as_map() const {
    return [this](const auto& theta) { return forward(theta); };
  }

 protected:
  Model(std::string name, Index c, ParameterLayout layout, Eigen::VectorXd input, std::optional<int> degree,
        std::optional<std::string> last_layer)
      : name_(std::move(name)),
        c_(c),
        layout_(std::move(layout)),
        input_(std::move(input)),
        degree_(degree),
        last_layer_(std::move(last_layer)) {}

  void set_initial_parameters(Eigen::VectorXd theta) { theta0_ = std::move(theta); }
  void set_input(Eigen::VectorXd x) { input_ = std::move(x); }

 private:
  std::string name_;
  Index c_;
  ParameterLayout layout_;
  Eigen::VectorXd input_;
  std::optional<int> degree_;
  std::optional<std::string> last_layer_;
  Eigen::VectorXd theta0_;
};

using ModelPtr = std::shared_ptr<const Model>;

ModelPtr build_model(const ModelSpec& spec);

/// Checked forward pass: length must equal d, result must be finite.
Eigen::VectorXd forward(const Model& model, const Eigen::VectorXd& theta);

/// Catalog request for a loss. square: `target` is the regression vector;
/// exponential / logistic: target[0] is a label in {-1, +1}; softmax_ce:
/// target[0] is the class index.
struct LossSpec {
  std::string kind;
  Eigen::VectorXd target;
};

class Loss {
 public:
  virtual ~Loss() = default;

  const std::string& name() const { return name_; }
  Index c() const { return c_; }
  const Eigen::VectorXd& target() const { return target_; }

  virtual double value(const Eigen::VectorXd& y) const = 0;
  virtual HyperDual value(const VectorX<HyperDual>& y) const = 0;
  virtual Eigen::VectorXd gradient(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::MatrixXd hessian(const Eigen::VectorXd& y) const = 0;

  virtual std::shared_ptr<const Loss> with_target(const Eigen::VectorXd& target) const = 0;

 protected:
  Loss(std::string name, Index c, Eigen::VectorXd target)
      : name_(std::move(name)), c_(c), target_(std::move(target)) {}

 private:
  std::string name_;
  Index c_;
  Eigen::VectorXd target_;
};

using LossPtr = std::shared_ptr<const Loss>;

/// `c` is the model output dimension the loss must accept.
LossPtr build_loss(const LossSpec& spec, Index c);

/// True for the margin losses with l'(y)·y < 0 on correctly classified points.
bool is_classification_loss(const Loss& loss);

Tensord loss_gradient(const Loss& loss, const Eigen::VectorXd& y);
Tensord loss_hessian(const Loss& loss, const Eigen::VectorXd& y);

struct Sample {
  Eigen::VectorXd input;
  Eigen::VectorXd target;
};

/// Finite distribution over (input, target) pairs.
class Dataset {
 public:
  Dataset(std::vector<Sample> samples, std::vector<double> weights);
  static Dataset uniform(std::vector<Sample> samples);

  Index size() const { return static_cast<Index>(samples_.size()); }
  const Sample& sample(Index i) const { return samples_[static_cast<std::size_t>(i)]; }
  double weight(Index i) const { return weights_[static_cast<std::size_t>(i)]; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<Sample> samples_;
  std::vector<double> weights_;
};

/// Σ μ(x) l_x(f(θ; x)).
double expected_loss(const Model& model, const Loss& loss_family, const Dataset& data, const Eigen::VectorXd& theta);

}  // namespace equichk
