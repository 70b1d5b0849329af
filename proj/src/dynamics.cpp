#include "equichk/dynamics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <random>
#include <thread>

#include "equichk/rng.hpp"

namespace equichk {

namespace {

const std::vector<double>& find_series(const Series& s, const std::string& name, const char* what) {
  for (const auto& [k, v] : s) {
    if (k == name) return v;
  }
  throw Error(ErrorCode::UnknownSpec, std::string("trajectory has no ") + what + " '" + name + "'");
}

std::vector<double>& series(Series& s, const std::string& name) {
  for (auto& [k, v] : s) {
    if (k == name) return v;
  }
  s.emplace_back(name, std::vector<double>{});
  return s.back().second;
}

void require_finite(const Eigen::VectorXd& theta, const char* where) {
  if (!theta.allFinite()) throw Error(ErrorCode::NonFiniteResult, std::string(where) + " produced a non-finite state");
}

/// Records state, loss, charges and the standard diagnostics.
class Recorder {
 public:
  Recorder(const Objective& objective, const std::vector<Charge>& charges, Trajectory& out)
      : objective_(objective), charges_(charges), out_(out) {
    single_ = dynamic_cast<const ModelLossObjective*>(&objective);
    if (single_ != nullptr && single_->model().c() != 1) single_ = nullptr;
  }

  void record(double t, const Eigen::VectorXd& theta, double loss, const Eigen::VectorXd& grad) {
    out_.times.push_back(t);
    out_.states.push_back(theta);
    out_.losses.push_back(loss);
    for (const auto& c : charges_) series(out_.charges, c.name).push_back(c.value(theta));
    series(out_.diagnostics, "grad_norm").push_back(grad.norm());
    series(out_.diagnostics, "theta_sq").push_back(theta.squaredNorm());
    if (single_ != nullptr) {
      const Model& model = single_->model();
      const Eigen::VectorXd y = model.forward(theta);
      series(out_.diagnostics, "output").push_back(y[0]);
      if (const auto m = model.homogeneity_degree()) {
        const Loss& loss_fn = single_->loss();
        const double l1 = loss_fn.gradient(y)[0];
        const double l2 = loss_fn.hessian(y)(0, 0);
        const double tt = theta.squaredNorm();
        const double bound = tt > 0 ? (*m / tt) * (l2 * *m * y[0] * y[0] + l1 * (*m - 1) * y[0]) : 0.0;
        series(out_.diagnostics, "sharpness_bound").push_back(bound);
      }
    }
  }

 private:
  const Objective& objective_;
  const std::vector<Charge>& charges_;
  Trajectory& out_;
  const ModelLossObjective* single_ = nullptr;
};

Eigen::VectorXd rk4(const Objective& obj, const Eigen::VectorXd& theta, const Eigen::VectorXd& k1, double h) {
  const Eigen::VectorXd k2 = -obj.gradient(theta + 0.5 * h * k1);
  const Eigen::VectorXd k3 = -obj.gradient(theta + 0.5 * h * k2);
  const Eigen::VectorXd k4 = -obj.gradient(theta + h * k3);
  return theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct FlowState {
  Eigen::VectorXd theta;
  double loss;
  Eigen::VectorXd grad;
};

void advance(const Objective& obj, FlowState& s, double h, int depth, Trajectory& traj) {
  const Eigen::VectorXd next = rk4(obj, s.theta, -s.grad, h);
  require_finite(next, "gradient flow");
  const double next_loss = obj.value(next);
  const double slack = 1e-13 * std::abs(s.loss);
  if (!(next_loss <= s.loss + slack)) {
    if (depth == 20) {
      throw Error(ErrorCode::StepFailure, "loss increase persists after 20 step halvings at L = " +
                                              std::to_string(s.loss));
    }
    ++traj.halvings;
    advance(obj, s, 0.5 * h, depth + 1, traj);
    advance(obj, s, 0.5 * h, depth + 1, traj);
    return;
  }
  s.theta = next;
  s.loss = next_loss;
  s.grad = obj.gradient(next);
  ++traj.steps;
}

}  // namespace

const std::vector<double>& Trajectory::charge(const std::string& name) const {
  return find_series(charges, name, "charge");
}

const std::vector<double>& Trajectory::diagnostic(const std::string& name) const {
  return find_series(diagnostics, name, "diagnostic");
}

bool Trajectory::has_diagnostic(const std::string& name) const {
  return std::any_of(diagnostics.begin(), diagnostics.end(), [&](const auto& kv) { return kv.first == name; });
}

double Trajectory::charge_drift(const std::string& name) const {
  const auto& c = charge(name);
  double worst = 0.0;
  for (double v : c) worst = std::max(worst, std::abs(v - c.front()));
  return c.empty() ? 0.0 : worst / (1.0 + std::abs(c.front()));
}

Index record_stride(double T, double dt) {
  const double n = std::ceil(T / dt - 1e-9);
  return std::max<Index>(1, static_cast<Index>(std::ceil(n / 1000.0)));
}

Trajectory gradient_flow(const Objective& objective, const Eigen::VectorXd& theta0, double T, double dt,
                         const std::vector<Charge>& charges, double stop_grad_norm) {
  if (!(dt > 0) || !(T >= dt)) throw Error(ErrorCode::InvalidParams, "gradient flow needs dt > 0 and T ≥ dt");
  if (theta0.size() != objective.d()) throw Error(ErrorCode::LengthMismatch, "θ₀ has the wrong length");
  require_finite(theta0, "initial state");
  Trajectory traj;
  Recorder rec(objective, charges, traj);
  FlowState s{theta0, objective.value(theta0), objective.gradient(theta0)};
  rec.record(0.0, s.theta, s.loss, s.grad);

  const Index n = static_cast<Index>(std::ceil(T / dt - 1e-9));
  const Index stride = record_stride(T, dt);
  for (Index k = 1; k <= n; ++k) {
    const double t_prev = static_cast<double>(k - 1) * dt;
    const double h = std::min(dt, T - t_prev);
    advance(objective, s, h, 0, traj);
    const double t = k == n ? T : static_cast<double>(k) * dt;
    const bool stop = stop_grad_norm > 0 && s.grad.norm() <= stop_grad_norm;
    if (k % stride == 0 || k == n || stop) rec.record(t, s.theta, s.loss, s.grad);
    if (stop) break;
  }
  return traj;
}

GdResult gradient_descent(const Objective& objective, const Eigen::VectorXd& theta0, double eta, Index steps,
                          const std::vector<Charge>& charges, const std::vector<TransformPtr>& symmetries) {
  if (!(eta >= 0) || !std::isfinite(eta)) throw Error(ErrorCode::InvalidParams, "learning rate must be ≥ 0");
  if (steps < 0) throw Error(ErrorCode::InvalidParams, "step count must be ≥ 0");
  if (theta0.size() != objective.d()) throw Error(ErrorCode::LengthMismatch, "θ₀ has the wrong length");
  GdResult out;
  Trajectory& traj = out.trajectory;
  Recorder rec(objective, charges, traj);
  Eigen::VectorXd theta = theta0;
  Eigen::VectorXd grad = objective.gradient(theta);
  rec.record(0.0, theta, objective.value(theta), grad);
  for (const auto& t : symmetries) series(traj.diagnostics, "orthogonality." + t->name()).push_back(0.0);

  Eigen::VectorXd prev_step;
  for (Index k = 1; k <= steps; ++k) {
    const Eigen::VectorXd step = -eta * grad;
    for (const auto& t : symmetries) {
      const Eigen::MatrixXd X = to_matrix(characteristic_direction(*t, theta, t->identity_lambda()));
      const double denom = step.norm() * X.norm();
      const double v = denom > 0 ? (X * step).norm() / denom : 0.0;
      series(traj.diagnostics, "orthogonality." + t->name()).push_back(v);
      out.max_orthogonality = std::max(out.max_orthogonality, v);
    }
    if (prev_step.size() > 0 && prev_step.norm() > 0) {
      out.oscillation = step.dot(prev_step) < 0 && step.norm() >= 0.99 * prev_step.norm();
    }
    prev_step = step;
    theta += step;
    require_finite(theta, "gradient descent");
    grad = objective.gradient(theta);
    rec.record(static_cast<double>(k), theta, objective.value(theta), grad);
    ++traj.steps;
  }
  return out;
}

NormGrowthReport norm_growth_check(const Model& model, const Loss& loss, const Trajectory& trajectory,
                                   double tolerance) {
  const auto m = model.homogeneity_degree();
  if (!m || model.c() != 1) throw Error(ErrorCode::InvalidParams, "norm growth needs a scalar homogeneous model");
  if (!is_classification_loss(loss)) throw Error(ErrorCode::InvalidParams, loss.name() + " is not a margin loss");
  NormGrowthReport r;
  const std::size_t n = trajectory.states.size();
  std::vector<double> margin(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Eigen::VectorXd y = model.forward(trajectory.states[k]);
    margin[k] = loss.gradient(y)[0] * y[0];
  }
  // First record from which ℓ'(y)·y < 0 holds through the end.
  std::size_t start = n;
  for (std::size_t k = n; k-- > 0;) {
    if (margin[k] < 0) start = k;
    else break;
  }
  if (start == n) {
    r.note = "NeverCorrectlyClassified";
    r.pass = true;
    return r;
  }
  r.classified = true;
  r.t0 = trajectory.times[start];
  r.monotone = true;
  for (std::size_t k = start + 1; k < n; ++k) {
    const double a = trajectory.states[k - 1].squaredNorm();
    const double b = trajectory.states[k].squaredNorm();
    if (b < a - 1e-12 * a) r.monotone = false;
  }
  // Along θ̇ = −∇L: ½ d‖θ‖²/dt = −⟨θ, ∇L⟩, compared with −m ℓ'(y) y.
  std::vector<double> rate(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Eigen::VectorXd& th = trajectory.states[k];
    const Eigen::VectorXd y = model.forward(th);
    const Eigen::VectorXd jf = to_matrix(jacobian(model.as_map(), th)).col(0);
    const double lhs = -th.dot(jf) * loss.gradient(y)[0];
    const double rhs = -*m * loss.gradient(y)[0] * y[0];
    r.max_rel_gap = std::max(r.max_rel_gap, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-300}));
    rate[k] = rhs;
  }
  // Integrated over record pairs; needs uniform spacing.
  for (std::size_t k = 2; k < n; k += 2) {
    const double h = trajectory.times[k] - trajectory.times[k - 1];
    if (std::abs((trajectory.times[k - 1] - trajectory.times[k - 2]) - h) > 1e-9 * h) continue;
    const double change = 0.5 * (trajectory.states[k].squaredNorm() - trajectory.states[k - 2].squaredNorm());
    const double simpson = h / 3.0 * (rate[k - 2] + 4.0 * rate[k - 1] + rate[k]);
    const double size = h / 3.0 * (std::abs(rate[k - 2]) + 4.0 * std::abs(rate[k - 1]) + std::abs(rate[k]));
    r.integrated_rel_gap = std::max(r.integrated_rel_gap, std::abs(change - simpson) / std::max(size, 1e-300));
  }
  r.pass = r.monotone && r.max_rel_gap <= tolerance;
  if (!r.monotone) r.note = "‖θ‖² decreased after first correct classification";
  return r;
}

CovarianceReport noise_covariance(const DatasetObjective& objective, const Eigen::VectorXd& theta, bool with_fd) {
  const Index d = objective.d();
  const Index n = objective.samples();
  CovarianceReport r;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd hg = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd hmean = Eigen::MatrixXd::Zero(d, d);
  std::vector<Eigen::VectorXd> grads;
  for (Index i = 0; i < n; ++i) {
    const double w = objective.weight(i);
    const Eigen::VectorXd g = objective.sample(i).gradient(theta);
    const Eigen::MatrixXd h = objective.sample(i).hessian(theta);
    mean += w * g;
    hmean += w * h;
    hg += w * (h * g);
    grads.push_back(g);
  }
  r.Sigma = Eigen::MatrixXd::Zero(d, d);
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd c = grads[static_cast<std::size_t>(i)] - mean;
    r.Sigma += objective.weight(i) * c * c.transpose();
  }
  r.trace = r.Sigma.trace();
  r.grad_trace = 2.0 * (hg - hmean * mean);
  if (with_fd) {
    auto trace_of = [&objective, n, d](const Eigen::VectorXd& th) {
      Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
      double sq = 0.0;
      for (Index i = 0; i < n; ++i) {
        const Eigen::VectorXd g = objective.sample(i).gradient(th);
        m += objective.weight(i) * g;
        sq += objective.weight(i) * g.squaredNorm();
      }
      Eigen::VectorXd out(1);
      out[0] = sq - m.squaredNorm();
      return out;
    };
    r.grad_trace_fd = fd_oracle(trace_of, theta, 1).data();
    r.fd_rel_gap = (r.grad_trace - r.grad_trace_fd).norm() / std::max(r.grad_trace.norm(), 1e-12);
  }
  return r;
}

NoiseModel::Mode parse_noise_mode(const std::string& s) {
  if (s == "exact_sde") return NoiseModel::Mode::exact_sde;
  if (s == "minibatch") return NoiseModel::Mode::minibatch;
  throw Error(ErrorCode::InvalidNoiseModel, "unknown noise mode '" + s + "'");
}

std::string to_string(NoiseModel::Mode m) { return m == NoiseModel::Mode::exact_sde ? "exact_sde" : "minibatch"; }

unsigned worker_count() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EQUICHK_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(std::min<long>(v, 1024));
  }
  return hw;
}

namespace {

/// PSD factor B with BBᵀ = Σ; eigenvalues down to −1e-10·max(1, ‖Σ‖) are clipped.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& sigma) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double floor = -1e-10 * std::max(1.0, sigma.norm());
  if (ev.size() > 0 && ev.minCoeff() < floor) {
    throw Error(ErrorCode::InvalidNoiseModel, "noise covariance has eigenvalue " + std::to_string(ev.minCoeff()));
  }
  return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

Eigen::MatrixXd covariance_only(const DatasetObjective& obj, const Eigen::VectorXd& theta, Eigen::VectorXd& mean) {
  const Index d = obj.d();
  mean = Eigen::VectorXd::Zero(d);
  std::vector<Eigen::VectorXd> grads;
  for (Index i = 0; i < obj.samples(); ++i) {
    grads.push_back(obj.sample(i).gradient(theta));
    mean += obj.weight(i) * grads.back();
  }
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(d, d);
  for (Index i = 0; i < obj.samples(); ++i) {
    const Eigen::VectorXd c = grads[static_cast<std::size_t>(i)] - mean;
    sigma += obj.weight(i) * c * c.transpose();
  }
  return sigma;
}

Trajectory sgf_path(const DatasetObjective& obj, const Eigen::VectorXd& theta0, const NoiseModel& noise, double T,
                    double dt, std::uint64_t seed, const std::vector<Charge>& charges) {
  Trajectory traj;
  Recorder rec(obj, charges, traj);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::discrete_distribution<Index> pick;
  if (noise.mode == NoiseModel::Mode::minibatch) {
    const auto& w = obj.data().weights();
    pick = std::discrete_distribution<Index>(w.begin(), w.end());
  }
  const Index n = static_cast<Index>(std::ceil(T / dt - 1e-9));
  const Index stride = record_stride(T, dt);
  const double noise_scale = noise.sigma * std::sqrt(2.0 * dt);
  Eigen::VectorXd theta = theta0;
  Eigen::VectorXd mean;
  Eigen::VectorXd xi(obj.d());
  for (Index k = 0; k <= n; ++k) {
    Eigen::VectorXd drift;
    Eigen::MatrixXd sigma;
    if (noise.mode == NoiseModel::Mode::exact_sde) {
      sigma = covariance_only(obj, theta, mean);
      drift = mean;
    } else {
      drift = obj.gradient(theta);
    }
    if (k % stride == 0 || k == n) rec.record(k == n ? T : static_cast<double>(k) * dt, theta, obj.value(theta), drift);
    if (k == n) break;
    const double h = std::min(dt, T - static_cast<double>(k) * dt);
    if (noise.mode == NoiseModel::Mode::exact_sde) {
      theta -= h * drift;
      if (noise.sigma > 0) {
        for (Index i = 0; i < xi.size(); ++i) xi[i] = normal(rng);
        theta += noise_scale * (psd_factor(sigma) * xi);
      }
    } else {
      theta -= h * obj.sample(pick(rng)).gradient(theta);
    }
    require_finite(theta, "stochastic gradient flow");
    ++traj.steps;
  }
  return traj;
}

namespace {

/// Runs fn(i) for i in [0, n) on worker_count() threads; rethrows the first failure.
template <class Fn>
void parallel_for(Index n, Fn fn) {
  std::atomic<Index> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      const Index i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  const unsigned workers = static_cast<unsigned>(std::max<Index>(1, std::min<Index>(worker_count(), n)));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

double mean_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  return m / static_cast<double>(v.size());
}

double standard_error_of(const std::vector<double>& v, double mean) {
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size() - 1);
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

}  // namespace

Ensemble sgf(const DatasetObjective& objective, const Eigen::VectorXd& theta0, const NoiseModel& noise, double T,
             double dt, Index ensemble, const std::vector<Charge>& charges) {
  if (!(noise.sigma >= 0) || !std::isfinite(noise.sigma)) {
    throw Error(ErrorCode::InvalidNoiseModel, "σ must be finite and ≥ 0");
  }
  if (!(dt > 0) || !(T >= dt)) throw Error(ErrorCode::InvalidParams, "SGF needs dt > 0 and T ≥ dt");
  if (ensemble < 1) throw Error(ErrorCode::InvalidParams, "ensemble must hold at least one trajectory");
  if (theta0.size() != objective.d()) throw Error(ErrorCode::LengthMismatch, "θ₀ has the wrong length");
  Ensemble out;
  out.noise = noise;
  out.T = T;
  out.dt = dt;
  out.effective_sigma = noise.mode == NoiseModel::Mode::exact_sde ? noise.sigma : std::sqrt(dt / 2.0);

  // Noise injected per step against the charge scale.
  const CovarianceReport cov = noise_covariance(objective, theta0, false);
  double charge_scale = 1.0;
  for (const auto& c : charges) charge_scale = std::max(charge_scale, std::abs(c.value(theta0)));
  if (out.effective_sigma * out.effective_sigma * cov.trace * dt > 1e-2 * charge_scale) {
    out.warnings.push_back("σ²·Tr Σ·dt is not small against the charge scale; reduce dt");
  }

  out.trajectories.resize(static_cast<std::size_t>(ensemble));
  parallel_for(ensemble, [&](Index i) {
    out.trajectories[static_cast<std::size_t>(i)] =
        sgf_path(objective, theta0, noise, T, dt, derive_seed(noise.seed, static_cast<std::uint64_t>(i)), charges);
  });
  return out;
}

DriftTheory drift_theory(const DatasetObjective& objective, const Charge& charge, const Eigen::VectorXd& theta,
                         double sigma, double dt) {
  if (!charge.gradient || !charge.hessian) {
    throw Error(ErrorCode::InvalidParams, "charge " + charge.name + " lacks gradient or Hessian");
  }
  const CovarianceReport cov = noise_covariance(objective, theta, false);
  const Eigen::VectorXd gc = charge.gradient(theta);
  const Eigen::MatrixXd hc = charge.hessian(theta);
  const double s2 = sigma * sigma;
  DriftTheory r;
  r.inner_product = -0.5 * s2 * gc.dot(cov.grad_trace);
  r.trace = s2 * (cov.Sigma * hc).trace();
  const Eigen::VectorXd g = objective.gradient(theta);
  r.euler_bias = 0.5 * dt * g.dot(hc * g);
  r.scale = 0.5 * s2 * gc.norm() * cov.grad_trace.norm() + s2 * cov.Sigma.norm() * hc.norm();
  return r;
}

namespace {

/// Trace-form drift and Euler term from per-sample gradients only.
std::pair<double, double> predicted_drift(const DatasetObjective& objective, const Charge& charge,
                                          const Eigen::VectorXd& theta, double sigma, double dt) {
  const Index n = objective.samples();
  std::vector<Eigen::VectorXd> grads;
  grads.reserve(static_cast<std::size_t>(n));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(theta.size());
  for (Index i = 0; i < n; ++i) {
    grads.push_back(objective.sample(i).gradient(theta));
    mean += objective.weight(i) * grads.back();
  }
  const Eigen::MatrixXd hc = charge.hessian(theta);
  double tr = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd c = grads[static_cast<std::size_t>(i)] - mean;
    tr += objective.weight(i) * c.dot(hc * c);
  }
  return {sigma * sigma * tr, 0.5 * dt * mean.dot(hc * mean)};
}

}  // namespace

DriftReport noether_drift_check(const Ensemble& ensemble, const Charge& charge, const DatasetObjective& objective) {
  const Index n = static_cast<Index>(ensemble.trajectories.size());
  if (n < 100) {
    throw Error(ErrorCode::InsufficientEnsemble, "drift check needs ≥ 100 trajectories, got " + std::to_string(n));
  }
  DriftReport r;
  r.trajectories = n;
  const double sigma = ensemble.effective_sigma;
  const Trajectory& first = ensemble.trajectories.front();
  const std::size_t records = first.states.size();
  for (const auto& t : ensemble.trajectories) {
    if (t.states.size() != records) throw Error(ErrorCode::SizeMismatch, "ensemble trajectories differ in length");
  }
  const std::vector<double>& times = first.times;
  const double span = times.back() - times.front();

  // Empirical mean drift per unit time.
  std::vector<double> rates(static_cast<std::size_t>(n));
  double charge_size = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Trajectory& t = ensemble.trajectories[static_cast<std::size_t>(i)];
    const double c0 = charge.value(t.states.front()), c1 = charge.value(t.states.back());
    rates[static_cast<std::size_t>(i)] = (c1 - c0) / span;
    charge_size = std::max({charge_size, std::abs(c0), std::abs(c1)});
  }
  r.empirical = mean_of(rates);
  r.standard_error = standard_error_of(rates, r.empirical);

  // Continuous-time theory on the ensemble-mean path, plus the identity check.
  std::vector<double> mean_path(records);
  for (std::size_t k = 0; k < records; ++k) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(objective.d());
    for (const auto& t : ensemble.trajectories) m += t.states[k];
    m /= static_cast<double>(n);
    const DriftTheory dtk = drift_theory(objective, charge, m, sigma, ensemble.dt);
    mean_path[k] = dtk.trace;
    if (dtk.scale > 0) {
      r.max_identity_gap = std::max(r.max_identity_gap, std::abs(dtk.inner_product - dtk.trace) / dtk.scale);
    }
  }
  if (records == 1) {
    r.theory = mean_path.front();
  } else {
    for (std::size_t k = 1; k < records; ++k) r.theory += 0.5 * (mean_path[k] + mean_path[k - 1]) * (times[k] - times[k - 1]);
    r.theory /= span;
  }

  // Per-path compensator: the predicted drift (trace term plus the Euler term
  // of the discrete step) accumulated left-point along each trajectory. With
  // every step recorded and a quadratic charge, ΔC minus it has mean zero.
  std::vector<double> trace_int(static_cast<std::size_t>(n)), bias_int(static_cast<std::size_t>(n));
  std::vector<double> quad_gap(static_cast<std::size_t>(n));
  parallel_for(n, [&](Index i) {
    const Trajectory& t = ensemble.trajectories[static_cast<std::size_t>(i)];
    double tr = 0.0, bi = 0.0, prev = 0.0, trap = 0.0;
    for (std::size_t k = 0; k < records; ++k) {
      const auto [trace, euler] = predicted_drift(objective, charge, t.states[k], sigma, ensemble.dt);
      const double total = trace + euler;
      if (k + 1 < records) {
        const double h = times[k + 1] - times[k];
        tr += trace * h;
        bi += euler * h;
      }
      if (k > 0) trap += 0.5 * (total + prev) * (times[k] - times[k - 1]);
      prev = total;
    }
    trace_int[static_cast<std::size_t>(i)] = tr / span;
    bias_int[static_cast<std::size_t>(i)] = bi / span;
    quad_gap[static_cast<std::size_t>(i)] = (trap - tr - bi) / span;
  });
  r.theory_pathwise = mean_of(trace_int);
  r.euler_correction = mean_of(bias_int);

  std::vector<double> residual(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = rates[i] - trace_int[i] - bias_int[i];
  r.compensated_residual = mean_of(residual);
  r.compensated_standard_error = standard_error_of(residual, r.compensated_residual);

  // Exact when every step is recorded; otherwise the left-point rule is O(stride·dt) off.
  const bool every_step = records < 2 || std::abs((times[1] - times[0]) - ensemble.dt) <= 1e-12 * ensemble.dt;
  r.bias_budget = every_step ? 0.0 : 2.0 * std::abs(mean_of(quad_gap));

  r.identity_pass = r.max_identity_gap <= 1e-8;
  // Roundoff floor for noiseless ensembles, where the standard error is zero.
  const double floor = 1e-12 * (charge_size / span + std::abs(r.theory_pathwise) + std::abs(r.euler_correction));
  r.band = 3.0 * r.compensated_standard_error + r.bias_budget + floor;
  r.empirical_pass = std::abs(r.compensated_residual) <= r.band;
  r.pass = r.identity_pass && r.empirical_pass;
  return r;
}

}  // namespace equichk
