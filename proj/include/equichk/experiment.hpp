#pragma once

// Runs a parsed experiment configuration and writes its outputs.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "equichk/config.hpp"
#include "equichk/identities.hpp"

namespace equichk {

inline constexpr const char* kToolVersion = "1.0.0";

struct RunResult {
  std::vector<IdentityReport> reports;
  std::vector<std::string> files;  // relative to the output directory
  std::vector<std::string> warnings;
  std::string digest;
  std::filesystem::path output_dir;
  bool all_pass = false;
};

/// Writes reports.jsonl, summary.csv, manifest.json and any trajectory or
/// spectrum files. `output_dir` overrides the configured directory.
RunResult run_experiment(const ExperimentConfig& config,
                         const std::optional<std::filesystem::path>& output_dir = std::nullopt);

}  // namespace equichk
