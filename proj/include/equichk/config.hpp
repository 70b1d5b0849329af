#pragma once

// Experiment configuration files (JSON). Unknown keys are rejected; every
// error is a ConfigError naming the offending field.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "equichk/identities.hpp"
#include "equichk/models.hpp"
#include "equichk/transforms.hpp"

namespace equichk {

struct DynamicsConfig {
  std::string method = "gf";  // gf | gd (flow experiments)
  double T = 1.0;
  double dt = 1e-2;
  double eta = 0.1;
  Index steps = 100;
  double sigma = 0.1;
  Index ensemble = 100;
  std::string noise_mode = "exact_sde";
  double stop_grad = 1e-10;       // stationary_spectrum convergence target
  Index write_trajectories = 4;   // per-trajectory CSVs written for SGF ensembles
};

struct ExperimentConfig {
  std::string experiment;  // check_suite | flow | sgf_drift | stationary_spectrum
  std::uint64_t seed = 0;
  std::string output_dir = "equichk_out";

  /// check_suite plan; cases come from "cases" or from the single-case fields.
  SuiteSpec suite;

  std::optional<ModelSpec> model;
  std::optional<LossSpec> loss;
  std::vector<TransformSpec> transforms;
  std::vector<Sample> samples;
  std::vector<double> weights;
  std::optional<Eigen::VectorXd> theta0;
  DynamicsConfig dynamics;
  std::optional<double> tolerance;

  /// Compact JSON with sorted keys; stable under key reordering.
  std::string canonical;
};

/// Throws Error(ConfigError) with "line L, column C" for syntax errors and a
/// dotted field path for schema errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a of the canonical form, as 16 hex digits.
std::string config_digest(const ExperimentConfig& config);
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace equichk
