#pragma once

// Serialization of identity reports and trajectories.

#include <filesystem>
#include <string>
#include <vector>

#include "equichk/dynamics.hpp"
#include "equichk/identities.hpp"

namespace equichk {

/// One compact JSON object; doubles round-trip exactly.
std::string report_to_json(const IdentityReport& r);

void write_reports_jsonl(const std::filesystem::path& path, const std::vector<IdentityReport>& reports);

/// Columns: check_name, paper_anchor, rel_residual, tolerance, pass, then
/// skipped, label, model, transform, loss, seed.
void write_summary_csv(const std::filesystem::path& path, const std::vector<IdentityReport>& reports);

/// Columns: time, loss, every diagnostic series, every charge series.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& trajectory);

/// Quotes a CSV field when it holds a comma, quote or newline.
std::string csv_field(const std::string& s);

}  // namespace equichk
