#include "equichk/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "equichk/catalog.hpp"

namespace equichk {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& path, const std::string& msg) {
  throw Error(ErrorCode::ConfigError, (path.empty() ? std::string("<root>") : path) + ": " + msg);
}

class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  const std::string& path() const { return path_; }
  const json& raw() const { return j_; }
  [[noreturn]] void fail(const std::string& msg) const { config_error(path_, msg); }

  void require_object(std::initializer_list<const char*> allowed) const {
    if (!j_.is_object()) fail("expected an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j_.items()) {
      if (!ok.count(k)) config_error(child_path(k), "unknown key");
    }
  }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }
  Node operator[](const std::string& key) const {
    if (!has(key)) config_error(child_path(key), "missing required field");
    return Node(j_.at(key), child_path(key));
  }
  Node operator[](std::size_t i) const { return Node(j_.at(i), path_ + "[" + std::to_string(i) + "]"); }
  std::size_t size() const { return j_.size(); }

  std::string str() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }
  bool boolean() const {
    if (!j_.is_boolean()) fail("expected true or false");
    return j_.get<bool>();
  }
  double number() const {
    if (!j_.is_number()) fail("expected a number");
    const double v = j_.get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }
  double positive() const {
    const double v = number();
    if (!(v > 0)) fail("must be positive");
    return v;
  }
  double non_negative() const {
    const double v = number();
    if (!(v >= 0)) fail("must be non-negative");
    return v;
  }
  Index integer() const {
    if (!j_.is_number_integer()) fail("expected an integer");
    return j_.get<Index>();
  }
  Index count() const {
    const Index v = integer();
    if (v < 0) fail("must be non-negative");
    return v;
  }
  std::uint64_t seed() const {
    if (!j_.is_number_unsigned() && !(j_.is_number_integer() && j_.get<std::int64_t>() >= 0)) {
      fail("expected a non-negative integer seed");
    }
    return j_.get<std::uint64_t>();
  }
  template <typename F>
  auto list(F&& each) const {
    if (!j_.is_array()) fail("expected an array");
    std::vector<decltype(each(std::declval<Node>()))> out;
    for (std::size_t i = 0; i < j_.size(); ++i) out.push_back(each((*this)[i]));
    return out;
  }
  Eigen::VectorXd vector() const {
    const auto v = list([](const Node& n) { return n.number(); });
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
  }
  Eigen::MatrixXd matrix() const {
    const auto rows = list([](const Node& n) { return n.vector(); });
    if (rows.empty()) fail("matrix must have at least one row");
    Eigen::MatrixXd m(static_cast<Index>(rows.size()), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols()) (*this)[r].fail("ragged matrix row");
      m.row(static_cast<Index>(r)) = rows[r].transpose();
    }
    return m;
  }

 private:
  std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const json& j_;
  std::string path_;
};

ModelSpec parse_model(const Node& n) {
  n.require_object({"kind", "widths", "depth", "c", "s", "hidden", "input", "seed"});
  ModelSpec m;
  m.kind = n["kind"].str();
  if (n.has("widths")) m.widths = n["widths"].list([](const Node& x) { return x.count(); });
  if (n.has("depth")) m.depth = n["depth"].count();
  if (n.has("c")) m.c = n["c"].count();
  if (n.has("s")) m.s = n["s"].count();
  if (n.has("hidden")) m.hidden = n["hidden"].count();
  if (n.has("input")) m.input = n["input"].vector();
  if (n.has("seed")) m.seed = n["seed"].seed();
  return m;
}

LossSpec parse_loss(const Node& n) {
  n.require_object({"kind", "target"});
  LossSpec l;
  l.kind = n["kind"].str();
  if (n.has("target")) {
    l.target = n["target"].raw().is_array() ? n["target"].vector() : Eigen::VectorXd::Constant(1, n["target"].number());
  }
  return l;
}

TransformSpec parse_transform(const Node& n) {
  TransformSpec t;
  if (n.raw().is_string()) {
    t.name = n.str();
    return t;
  }
  n.require_object({"name", "blocks", "degree", "generator", "frame", "permutation", "entries", "layer", "units"});
  t.name = n["name"].str();
  if (n.has("blocks")) t.blocks = n["blocks"].list([](const Node& x) { return x.str(); });
  if (n.has("degree")) t.degree = static_cast<int>(n["degree"].integer());
  if (n.has("generator")) t.generator = n["generator"].matrix();
  if (n.has("frame")) t.frame = n["frame"].matrix();
  if (n.has("permutation")) t.permutation = n["permutation"].list([](const Node& x) { return x.count(); });
  if (n.has("entries")) t.entries = n["entries"].list([](const Node& x) { return x.count(); });
  if (n.has("layer")) t.layer = n["layer"].count();
  if (n.has("units")) t.units = n["units"].list([](const Node& x) { return x.count(); });
  return t;
}

std::vector<TransformSpec> parse_transforms(const Node& n) {
  return n.list([](const Node& x) { return parse_transform(x); });
}

bool is_check(const std::string& name) {
  const auto& entries = catalog_entries();
  return std::any_of(entries.begin(), entries.end(),
                     [&](const CatalogEntry& e) { return e.category == "check" && e.name == name; });
}

void check_names(const Node& n, const std::vector<std::string>& checks) {
  for (std::size_t i = 0; i < checks.size(); ++i) {
    if (!is_check(checks[i])) n[i].fail("unknown check '" + checks[i] + "'");
  }
}

/// Builds every catalog object once so unknown names surface as config errors.
void validate_case(const std::string& path, const ModelSpec& ms, const LossSpec& ls,
                   const std::vector<TransformSpec>& ts) {
  ModelPtr model;
  try {
    model = build_model(ms);
  } catch (const Error& e) {
    config_error(path + "model", e.what());
  }
  try {
    build_loss(ls, model->c());
  } catch (const Error& e) {
    config_error(path + "loss", e.what());
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    try {
      build_transform(ts[i], *model);
    } catch (const Error& e) {
      config_error(path + "transforms[" + std::to_string(i) + "]", e.what());
    }
  }
}

DynamicsConfig parse_dynamics(const Node& n) {
  n.require_object({"method", "T", "dt", "eta", "steps", "sigma", "ensemble", "noise_mode", "stop_grad",
                    "write_trajectories"});
  DynamicsConfig d;
  if (n.has("method")) {
    d.method = n["method"].str();
    if (d.method != "gf" && d.method != "gd") n["method"].fail("expected \"gf\" or \"gd\"");
  }
  if (n.has("T")) d.T = n["T"].positive();
  if (n.has("dt")) d.dt = n["dt"].positive();
  if (n.has("eta")) d.eta = n["eta"].non_negative();
  if (n.has("steps")) d.steps = n["steps"].count();
  if (n.has("sigma")) d.sigma = n["sigma"].non_negative();
  if (n.has("ensemble")) {
    d.ensemble = n["ensemble"].count();
    if (d.ensemble < 1) n["ensemble"].fail("must be at least 1");
  }
  if (n.has("noise_mode")) {
    d.noise_mode = n["noise_mode"].str();
    if (d.noise_mode != "exact_sde" && d.noise_mode != "minibatch") {
      n["noise_mode"].fail("expected \"exact_sde\" or \"minibatch\"");
    }
  }
  if (n.has("stop_grad")) d.stop_grad = n["stop_grad"].positive();
  if (n.has("write_trajectories")) d.write_trajectories = n["write_trajectories"].count();
  if (d.T < d.dt) config_error(n.path() + ".T", "must be at least dt");
  return d;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_digest(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.canonical)));
  return buf;
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line and column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(ErrorCode::ConfigError, "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                                            e.what());
  }

  const Node root(j, "");
  root.require_object({"experiment", "seed", "output_dir", "mode", "positions", "lambda_range", "last_layer_trials",
                       "tolerances", "tolerance", "mutation", "cases", "model", "loss", "transforms", "checks",
                       "dataset", "theta0", "dynamics"});
  ExperimentConfig cfg;
  cfg.canonical = j.dump();
  cfg.experiment = root["experiment"].str();
  static const std::set<std::string> kinds = {"check_suite", "flow", "sgf_drift", "stationary_spectrum"};
  if (!kinds.count(cfg.experiment)) root["experiment"].fail("unknown experiment '" + cfg.experiment + "'");
  if (root.has("seed")) cfg.seed = root["seed"].seed();
  if (root.has("output_dir")) cfg.output_dir = root["output_dir"].str();
  if (root.has("model")) cfg.model = parse_model(root["model"]);
  if (root.has("loss")) cfg.loss = parse_loss(root["loss"]);
  if (root.has("transforms")) cfg.transforms = parse_transforms(root["transforms"]);
  if (root.has("tolerance")) cfg.tolerance = root["tolerance"].positive();
  if (root.has("dynamics")) cfg.dynamics = parse_dynamics(root["dynamics"]);
  if (root.has("theta0")) cfg.theta0 = root["theta0"].vector();

  if (root.has("dataset")) {
    const Node ds = root["dataset"];
    ds.require_object({"samples", "weights"});
    cfg.samples = ds["samples"].list([](const Node& s) {
      s.require_object({"input", "target"});
      Sample out;
      out.input = s["input"].vector();
      out.target = s["target"].raw().is_array() ? s["target"].vector()
                                                : Eigen::VectorXd::Constant(1, s["target"].number());
      return out;
    });
    if (cfg.samples.empty()) ds["samples"].fail("dataset needs at least one sample");
    if (ds.has("weights")) {
      cfg.weights = ds["weights"].list([](const Node& w) { return w.non_negative(); });
      if (cfg.weights.size() != cfg.samples.size()) ds["weights"].fail("one weight per sample");
    }
  }

  // Suite plan.
  SuiteSpec& plan = cfg.suite;
  plan.seed = cfg.seed;
  if (root.has("mode")) {
    const std::string mode = root["mode"].str();
    if (mode == "exact") {
      plan.mode = DiffMode::exact;
    } else if (mode == "finite_difference") {
      plan.mode = DiffMode::finite_difference;
    } else {
      root["mode"].fail("expected \"exact\" or \"finite_difference\"");
    }
  }
  if (root.has("positions")) plan.positions = root["positions"].count();
  if (root.has("lambda_range")) plan.lambda_range = root["lambda_range"].positive();
  if (root.has("last_layer_trials")) plan.last_layer_trials = root["last_layer_trials"].count();
  if (root.has("tolerances")) {
    const Node tn = root["tolerances"];
    if (!tn.raw().is_object()) tn.fail("expected an object of check → tolerance");
    for (const auto& [k, v] : tn.raw().items()) {
      if (!is_check(k)) tn[k].fail("unknown check");
      plan.tolerances[k] = tn[k].positive();
    }
  }
  if (root.has("mutation")) {
    const Node mn = root["mutation"];
    mn.require_object({"derivative", "rel", "seed"});
    Mutation m;
    m.derivative = mn["derivative"].str();
    const auto& names = derivative_names();
    if (std::find(names.begin(), names.end(), m.derivative) == names.end()) {
      mn["derivative"].fail("unknown derivative '" + m.derivative + "'");
    }
    if (mn.has("rel")) m.rel = mn["rel"].positive();
    if (mn.has("seed")) m.seed = mn["seed"].seed();
    plan.mutation = m;
  }

  if (cfg.experiment == "check_suite") {
    if (root.has("cases")) {
      const Node cn = root["cases"];
      if (cn.raw().is_string()) {
        if (cn.str() != "catalog") cn.fail("expected an array of cases or \"catalog\"");
        plan.cases = full_catalog_suite(plan.positions, plan.seed).cases;
      } else {
        plan.cases = cn.list([](const Node& c) {
          c.require_object({"label", "model", "loss", "transforms", "checks"});
          SuiteCase sc;
          sc.model = parse_model(c["model"]);
          sc.loss = parse_loss(c["loss"]);
          if (c.has("transforms")) sc.transforms = parse_transforms(c["transforms"]);
          if (c.has("checks")) {
            sc.checks = c["checks"].list([](const Node& x) { return x.str(); });
            check_names(c["checks"], sc.checks);
          }
          sc.label = c.has("label") ? c["label"].str() : sc.model.kind + "/" + sc.loss.kind;
          return sc;
        });
      }
    } else {
      if (!cfg.model || !cfg.loss) root.fail("check_suite needs \"cases\" or both \"model\" and \"loss\"");
      SuiteCase sc;
      sc.model = *cfg.model;
      sc.loss = *cfg.loss;
      sc.transforms = cfg.transforms;
      if (root.has("checks")) {
        sc.checks = root["checks"].list([](const Node& x) { return x.str(); });
        check_names(root["checks"], sc.checks);
      }
      sc.label = sc.model.kind + "/" + sc.loss.kind;
      plan.cases.push_back(sc);
    }
    if (root.has("cases")) {
      for (std::size_t i = 0; i < plan.cases.size(); ++i) {
        const SuiteCase& sc = plan.cases[i];
        validate_case("cases[" + std::to_string(i) + "].", sc.model, sc.loss, sc.transforms);
      }
    } else {
      validate_case("", plan.cases[0].model, plan.cases[0].loss, plan.cases[0].transforms);
    }
  } else {
    if (!cfg.model) config_error("model", "missing required field");
    if (!cfg.loss) config_error("loss", "missing required field");
    validate_case("", *cfg.model, *cfg.loss, cfg.transforms);
    if (cfg.experiment == "sgf_drift" && cfg.samples.empty()) config_error("dataset", "sgf_drift needs a dataset");
    if (cfg.experiment == "sgf_drift" && cfg.transforms.empty()) {
      config_error("transforms", "sgf_drift needs a symmetry with a charge");
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace equichk
