#include "equichk/experiment.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <map>

#include "equichk/catalog.hpp"
#include "equichk/dynamics.hpp"
#include "equichk/report_io.hpp"

namespace equichk {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Setup {
  ModelPtr model;
  LossPtr loss;
  ObjectivePtr objective;
  std::shared_ptr<const DatasetObjective> dataset;  // null for single-datum objectives
  std::vector<TransformPtr> transforms;
  Eigen::VectorXd theta0;
};

Setup build_setup(const ExperimentConfig& cfg) {
  Setup s;
  s.model = build_model(*cfg.model);
  s.loss = build_loss(*cfg.loss, s.model->c());
  for (const auto& t : cfg.transforms) s.transforms.push_back(build_transform(t, *s.model));
  if (!cfg.samples.empty()) {
    Dataset data = cfg.weights.empty() ? Dataset::uniform(cfg.samples) : Dataset(cfg.samples, cfg.weights);
    s.dataset = std::make_shared<DatasetObjective>(s.model, s.loss, std::move(data));
    s.objective = s.dataset;
  } else {
    s.objective = std::make_shared<ModelLossObjective>(s.model, s.loss);
  }
  if (cfg.theta0) {
    if (cfg.theta0->size() != s.model->d()) {
      throw Error(ErrorCode::ConfigError, "theta0: expected " + std::to_string(s.model->d()) + " entries");
    }
    s.theta0 = *cfg.theta0;
  } else {
    s.theta0 = s.model->random_parameters(cfg.seed);
  }
  return s;
}

std::vector<std::pair<std::string, Charge>> charges_of(const Setup& s) {
  std::vector<std::pair<std::string, Charge>> out;
  for (const auto& t : s.transforms) {
    try {
      out.emplace_back(t->name(), noether_charge(*t, *s.model));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NotConservative) throw;
    }
  }
  return out;
}

std::vector<Charge> plain(const std::vector<std::pair<std::string, Charge>>& cs) {
  std::vector<Charge> out;
  for (const auto& [n, c] : cs) out.push_back(c);
  return out;
}

IdentityReport base_report(const std::string& check, const ExperimentConfig& cfg, const Setup& s,
                           const std::string& transform, double tol) {
  IdentityReport r;
  r.check_name = check;
  r.paper_anchor = paper_anchor(check);
  r.tolerance = tol;
  r.context.model = s.model->name();
  r.context.loss = s.loss->name();
  r.context.transform = transform;
  r.context.seed = cfg.seed;
  r.context.label = cfg.experiment;
  return r;
}

void run_flow(const ExperimentConfig& cfg, const fs::path& dir, RunResult& out) {
  const Setup s = build_setup(cfg);
  const auto charges = charges_of(s);
  const DynamicsConfig& dyn = cfg.dynamics;
  if (dyn.method == "gd") {
    std::vector<TransformPtr> syms;
    for (const auto& t : s.transforms) {
      if (t->is_symmetry() && t->kind() == TransformKind::continuous) syms.push_back(t);
    }
    const GdResult gd = gradient_descent(*s.objective, s.theta0, dyn.eta, dyn.steps, plain(charges), syms);
    for (const auto& t : syms) {
      IdentityReport r = base_report("gd_orthogonality", cfg, s, t->name(), cfg.tolerance.value_or(1e-10));
      for (double v : gd.trajectory.diagnostic("orthogonality." + t->name())) r.rel_residual = std::max(r.rel_residual, v);
      r.abs_residual = r.rel_residual;
      r.pass = r.rel_residual <= r.tolerance;
      r.extras.emplace_back("steps", static_cast<double>(dyn.steps));
      r.extras.emplace_back("oscillation", gd.oscillation ? 1.0 : 0.0);
      out.reports.push_back(r);
    }
    write_trajectory_csv(dir / "trajectory.csv", gd.trajectory);
    out.files.push_back("trajectory.csv");
    return;
  }

  const Trajectory tr = gradient_flow(*s.objective, s.theta0, dyn.T, dyn.dt, plain(charges));
  for (const auto& [name, c] : charges) {
    IdentityReport r = base_report("charge_conservation", cfg, s, name, cfg.tolerance.value_or(1e-8));
    const auto& series = tr.charge(c.name);
    r.lhs_norm = std::abs(series.front());
    r.rhs_norm = std::abs(series.back());
    r.rel_residual = tr.charge_drift(c.name);
    r.abs_residual = r.rel_residual * (1.0 + std::abs(series.front()));
    r.pass = r.rel_residual <= r.tolerance;
    r.extras.emplace_back("initial", series.front());
    r.extras.emplace_back("final", series.back());
    r.extras.emplace_back("halvings", static_cast<double>(tr.halvings));
    // ReLU units crossing zero cost the integrator its order; surface the closest approach.
    double kink = std::numeric_limits<double>::infinity();
    for (const auto& st : tr.states) kink = std::min(kink, s.model->kink_margin(st));
    if (std::isfinite(kink)) r.extras.emplace_back("min_kink_margin", kink);
    out.reports.push_back(r);
  }
  const bool scalar_margin = !s.dataset && s.model->c() == 1 && s.model->homogeneity_degree() &&
                             is_classification_loss(*s.loss);
  if (scalar_margin) {
    const NormGrowthReport ng = norm_growth_check(*s.model, *s.loss, tr);
    IdentityReport r = base_report("norm_growth", cfg, s, "", cfg.tolerance.value_or(1e-7));
    r.rel_residual = ng.max_rel_gap;
    r.abs_residual = ng.max_rel_gap;
    r.pass = ng.pass;
    r.skipped = !ng.classified;
    r.note = ng.note;
    r.extras.emplace_back("t0", ng.t0);
    r.extras.emplace_back("integrated_rel_gap", ng.integrated_rel_gap);
    r.extras.emplace_back("monotone", ng.monotone ? 1.0 : 0.0);
    out.reports.push_back(r);
  }
  write_trajectory_csv(dir / "trajectory.csv", tr);
  out.files.push_back("trajectory.csv");
}

void run_sgf(const ExperimentConfig& cfg, const fs::path& dir, RunResult& out) {
  const Setup s = build_setup(cfg);
  const auto charges = charges_of(s);
  if (charges.empty()) throw Error(ErrorCode::ConfigError, "transforms: no transform with a closed-form charge");
  const DynamicsConfig& dyn = cfg.dynamics;
  NoiseModel noise;
  noise.mode = parse_noise_mode(dyn.noise_mode);
  noise.sigma = dyn.sigma;
  noise.seed = cfg.seed;
  const Ensemble ens = sgf(*s.dataset, s.theta0, noise, dyn.T, dyn.dt, dyn.ensemble, plain(charges));
  out.warnings.insert(out.warnings.end(), ens.warnings.begin(), ens.warnings.end());

  for (const auto& [name, c] : charges) {
    const DriftReport d = noether_drift_check(ens, c, *s.dataset);
    IdentityReport r = base_report("noether_drift", cfg, s, name, 1.0);
    r.lhs_norm = std::abs(d.empirical);
    r.rhs_norm = std::abs(d.theory_pathwise + d.euler_correction);
    r.abs_residual = std::abs(d.compensated_residual);
    r.scale = d.band;
    // Residual in units of the allowed band.
    r.rel_residual = r.abs_residual / std::max(r.scale, 1e-300);
    r.pass = d.pass;
    if (!d.identity_pass) r.note = "inner-product and trace forms disagree";
    r.extras = {{"empirical", d.empirical},
                {"standard_error", d.standard_error},
                {"theory", d.theory},
                {"theory_pathwise", d.theory_pathwise},
                {"euler_correction", d.euler_correction},
                {"compensated_residual", d.compensated_residual},
                {"compensated_standard_error", d.compensated_standard_error},
                {"bias_budget", d.bias_budget},
                {"max_identity_gap", d.max_identity_gap},
                {"trajectories", static_cast<double>(d.trajectories)},
                {"effective_sigma", ens.effective_sigma}};
    out.reports.push_back(r);
  }

  // Ensemble mean and per-trajectory files.
  const Trajectory& first = ens.trajectories.front();
  {
    const fs::path p = dir / "ensemble_mean.csv";
    std::ofstream f(p);
    f.precision(17);
    f << "time,loss_mean";
    for (const auto& [k, v] : first.charges) f << ",charge_mean." << k << ",charge_stderr." << k;
    f << '\n';
    const double n = static_cast<double>(ens.trajectories.size());
    for (std::size_t i = 0; i < first.times.size(); ++i) {
      double lm = 0.0;
      for (const auto& t : ens.trajectories) lm += t.losses[i] / n;
      f << first.times[i] << ',' << lm;
      for (const auto& [k, v] : first.charges) {
        double m = 0.0, m2 = 0.0;
        for (const auto& t : ens.trajectories) {
          const double x = t.charge(k)[i];
          m += x / n;
          m2 += x * x / n;
        }
        const double var = n > 1 ? std::max(0.0, m2 - m * m) * n / (n - 1) : 0.0;
        f << ',' << m << ',' << std::sqrt(var / n);
      }
      f << '\n';
    }
    out.files.push_back("ensemble_mean.csv");
  }
  ordered_json manifest;
  manifest["trajectories"] = ens.trajectories.size();
  manifest["noise_mode"] = to_string(noise.mode);
  manifest["sigma"] = noise.sigma;
  manifest["effective_sigma"] = ens.effective_sigma;
  manifest["T"] = ens.T;
  manifest["dt"] = ens.dt;
  manifest["files"] = ordered_json::array();
  const std::size_t written = std::min<std::size_t>(ens.trajectories.size(), static_cast<std::size_t>(dyn.write_trajectories));
  for (std::size_t i = 0; i < written; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "trajectories/traj_%05zu.csv", i);
    write_trajectory_csv(dir / name, ens.trajectories[i]);
    manifest["files"].push_back(name);
    out.files.push_back(name);
  }
  std::ofstream(dir / "ensemble.json") << manifest.dump(2) << '\n';
  out.files.push_back("ensemble.json");
}

void run_stationary(const ExperimentConfig& cfg, const fs::path& dir, RunResult& out) {
  const Setup s = build_setup(cfg);
  const DynamicsConfig& dyn = cfg.dynamics;
  std::vector<TransformPtr> syms;
  for (const auto& t : s.transforms) {
    if (t->is_symmetry() && t->kind() == TransformKind::continuous) syms.push_back(t);
  }
  const Trajectory tr = gradient_flow(*s.objective, s.theta0, dyn.T, dyn.dt, {}, dyn.stop_grad);
  write_trajectory_csv(dir / "trajectory.csv", tr);
  out.files.push_back("trajectory.csv");
  IdentityReport r;
  try {
    CheckOptions opts;
    opts.context.seed = cfg.seed;
    opts.context.label = cfg.experiment;
    const StationaryReport st = stationary_null_count(*s.objective, syms, tr.states.back(), dyn.stop_grad);
    r = st.report;
    std::ofstream f(dir / "spectrum.csv");
    f << "index,eigenvalue\n";
    for (Index k = 0; k < st.spectrum.eigenvalues.size(); ++k) f << k << ',' << st.spectrum.eigenvalues[k] << '\n';
    out.files.push_back("spectrum.csv");
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotConverged) throw;
    r = base_report("stationary_null_space", cfg, s, "", cfg.tolerance.value_or(kExactTolerance));
    r.pass = false;
    r.note = e.what();
  }
  r.context.model = s.model->name();
  r.context.loss = s.loss->name();
  r.context.seed = cfg.seed;
  r.context.label = cfg.experiment;
  for (const auto& t : syms) r.context.transform += (r.context.transform.empty() ? "" : "+") + t->name();
  r.extras.emplace_back("flow_time", tr.times.back());
  out.reports.push_back(r);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, const std::optional<fs::path>& output_dir) {
  const auto start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  RunResult out;
  out.output_dir = output_dir.value_or(fs::path(config.output_dir));
  out.digest = config_digest(config);
  fs::create_directories(out.output_dir);

  if (config.experiment == "check_suite") {
    out.reports = run_suite(config.suite);
  } else if (config.experiment == "flow") {
    run_flow(config, out.output_dir, out);
  } else if (config.experiment == "sgf_drift") {
    run_sgf(config, out.output_dir, out);
  } else if (config.experiment == "stationary_spectrum") {
    run_stationary(config, out.output_dir, out);
  } else {
    throw Error(ErrorCode::ConfigError, "experiment: unknown kind '" + config.experiment + "'");
  }
  out.all_pass = all_pass(out.reports);

  write_reports_jsonl(out.output_dir / "reports.jsonl", out.reports);
  write_summary_csv(out.output_dir / "summary.csv", out.reports);
  out.files.insert(out.files.begin(), {"reports.jsonl", "summary.csv"});

  std::map<std::string, std::map<std::string, int>> counts;
  for (const auto& r : out.reports) {
    auto& c = counts[r.check_name];
    c["passed"] += r.pass && !r.skipped;
    c["failed"] += !r.pass;
    c["skipped"] += r.skipped;
  }
  ordered_json m;
  m["tool"] = "equichk";
  m["version"] = kToolVersion;
  m["experiment"] = config.experiment;
  m["config_digest"] = out.digest;
  m["started_utc"] = started;
  m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  m["all_pass"] = out.all_pass;
  m["report_count"] = out.reports.size();
  ordered_json pc = ordered_json::object();
  for (auto& [check, c] : counts) pc[check] = {{"passed", c["passed"]}, {"failed", c["failed"]}, {"skipped", c["skipped"]}};
  m["pass_counts"] = pc;
  m["files"] = out.files;
  m["warnings"] = out.warnings;
  std::ofstream(out.output_dir / "manifest.json") << m.dump(2) << '\n';
  out.files.push_back("manifest.json");
  return out;
}

}  // namespace equichk
