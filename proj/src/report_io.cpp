#include "equichk/report_io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

namespace equichk {

using nlohmann::ordered_json;

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::InvalidParams, "cannot write " + path.string());
  return out;
}

/// Shortest round-trip representation.
std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

ordered_json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  return num(v);
}

}  // namespace

std::string report_to_json(const IdentityReport& r) {
  ordered_json j;
  j["check_name"] = r.check_name;
  j["paper_anchor"] = r.paper_anchor;
  j["label"] = r.context.label;
  j["model"] = r.context.model;
  j["transform"] = r.context.transform;
  j["loss"] = r.context.loss;
  j["mode"] = r.context.mode;
  j["seed"] = r.context.seed;
  j["lambda"] = r.context.lambda;
  j["lhs_norm"] = finite_or_string(r.lhs_norm);
  j["rhs_norm"] = finite_or_string(r.rhs_norm);
  j["abs_residual"] = finite_or_string(r.abs_residual);
  j["rel_residual"] = finite_or_string(r.rel_residual);
  j["scale"] = finite_or_string(r.scale);
  j["tolerance"] = r.tolerance;
  j["pass"] = r.pass;
  j["skipped"] = r.skipped;
  j["note"] = r.note;
  ordered_json extras = ordered_json::object();
  for (const auto& [k, v] : r.extras) extras[k] = finite_or_string(v);
  j["extras"] = extras;
  return j.dump();
}

void write_reports_jsonl(const std::filesystem::path& path, const std::vector<IdentityReport>& reports) {
  std::ofstream out = open_out(path);
  for (const auto& r : reports) out << report_to_json(r) << '\n';
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<IdentityReport>& reports) {
  std::ofstream out = open_out(path);
  out << "check_name,paper_anchor,rel_residual,tolerance,pass,skipped,label,model,transform,loss,seed\n";
  for (const auto& r : reports) {
    out << csv_field(r.check_name) << ',' << csv_field(r.paper_anchor) << ',' << num(r.rel_residual) << ','
        << num(r.tolerance) << ',' << (r.pass ? "true" : "false") << ',' << (r.skipped ? "true" : "false") << ','
        << csv_field(r.context.label) << ',' << csv_field(r.context.model) << ',' << csv_field(r.context.transform)
        << ',' << csv_field(r.context.loss) << ',' << r.context.seed << '\n';
  }
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& t) {
  std::ofstream out = open_out(path);
  out << "time,loss";
  for (const auto& [k, v] : t.diagnostics) out << ',' << csv_field(k);
  for (const auto& [k, v] : t.charges) out << ',' << csv_field("charge." + k);
  out << '\n';
  for (std::size_t i = 0; i < t.times.size(); ++i) {
    out << num(t.times[i]) << ',' << num(t.losses[i]);
    for (const auto& [k, v] : t.diagnostics) out << ',' << (i < v.size() ? num(v[i]) : "");
    for (const auto& [k, v] : t.charges) out << ',' << (i < v.size() ? num(v[i]) : "");
    out << '\n';
  }
}

}  // namespace equichk
