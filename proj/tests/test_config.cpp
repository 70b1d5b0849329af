#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "equichk/config.hpp"
#include "equichk/experiment.hpp"
#include "equichk/report_io.hpp"

using namespace equichk;
namespace fs = std::filesystem;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
    return e.what();
  }
  ADD_FAILURE() << "no error for: " << text;
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("equichk_test_" + name);
  fs::remove_all(p);
  return p;
}

const char* kSmallSuite = R"({
  "experiment": "check_suite",
  "seed": 5,
  "positions": 2,
  "model": {"kind": "deep_linear", "widths": [3, 2, 2], "seed": 4},
  "loss": {"kind": "square", "target": [0.5, -0.3]},
  "transforms": ["layer_rescaling", "homogeneity_scaling"]
})";

}  // namespace

TEST(Config, ParsesSingleCaseSuite) {
  const ExperimentConfig cfg = parse_config(kSmallSuite);
  EXPECT_EQ(cfg.experiment, "check_suite");
  EXPECT_EQ(cfg.seed, 5u);
  ASSERT_EQ(cfg.suite.cases.size(), 1u);
  EXPECT_EQ(cfg.suite.cases[0].transforms.size(), 2u);
  EXPECT_EQ(cfg.suite.positions, 2);
}

TEST(Config, UnknownTopLevelKey) {
  const std::string msg = config_error(R"({"experiment": "check_suite", "cases": "catalog", "positons": 3})");
  EXPECT_NE(msg.find("positons"), std::string::npos) << msg;
}

TEST(Config, UnknownNestedKeyNamesPath) {
  const std::string msg = config_error(R"({"experiment": "flow",
    "model": {"kind": "linear_probe", "input": [1, 2], "widht": 3},
    "loss": {"kind": "square", "target": 1}})");
  EXPECT_NE(msg.find("model.widht"), std::string::npos) << msg;
}

TEST(Config, UnknownModelNamesField) {
  const std::string msg = config_error(R"({"experiment": "flow",
    "model": {"kind": "transformer"}, "loss": {"kind": "square", "target": 1}})");
  EXPECT_NE(msg.find("model"), std::string::npos) << msg;
}

TEST(Config, UnknownModelInCaseNamesIndex) {
  const std::string msg = config_error(R"({"experiment": "check_suite", "cases": [
    {"model": {"kind": "linear_probe", "input": [1, 2]}, "loss": {"kind": "square", "target": 1}},
    {"model": {"kind": "bogus"}, "loss": {"kind": "square", "target": 1}}]})");
  EXPECT_NE(msg.find("cases[1].model"), std::string::npos) << msg;
}

TEST(Config, SyntaxErrorReportsLineAndColumn) {
  const std::string msg = config_error("{\n  \"experiment\": \"flow\",\n  \"seed\": ,\n}");
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(Config, UnknownExperimentAndCheck) {
  EXPECT_NE(config_error(R"({"experiment": "train"})").find("experiment"), std::string::npos);
  const std::string msg = config_error(R"({"experiment": "check_suite",
    "model": {"kind": "linear_probe", "input": [1, 2]}, "loss": {"kind": "square", "target": 1},
    "checks": ["first_order", "third_order"]})");
  EXPECT_NE(msg.find("third_order"), std::string::npos) << msg;
}

TEST(Config, NonPositiveNumbersRejected) {
  const std::string msg = config_error(R"({"experiment": "flow",
    "model": {"kind": "linear_probe", "input": [1, 2]}, "loss": {"kind": "square", "target": 1},
    "dynamics": {"dt": -0.1}})");
  EXPECT_NE(msg.find("dynamics.dt"), std::string::npos) << msg;
}

TEST(Config, SgfNeedsDataset) {
  const std::string msg = config_error(R"({"experiment": "sgf_drift",
    "model": {"kind": "deep_linear", "widths": [2, 2, 1]}, "loss": {"kind": "square", "target": 0},
    "transforms": ["layer_rescaling"]})");
  EXPECT_NE(msg.find("dataset"), std::string::npos) << msg;
}

TEST(Config, UnknownMutationDerivative) {
  const std::string msg = config_error(R"({"experiment": "check_suite", "cases": "catalog",
    "mutation": {"derivative": "dH_dmu"}})");
  EXPECT_NE(msg.find("mutation.derivative"), std::string::npos) << msg;
}

TEST(Config, DigestStableUnderKeyReordering) {
  const ExperimentConfig a = parse_config(kSmallSuite);
  const ExperimentConfig b = parse_config(R"({
    "transforms": ["layer_rescaling", "homogeneity_scaling"],
    "loss": {"target": [0.5, -0.3], "kind": "square"},
    "model": {"seed": 4, "widths": [3, 2, 2], "kind": "deep_linear"},
    "positions": 2, "seed": 5, "experiment": "check_suite"
  })");
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_EQ(config_digest(a).size(), 16u);
  const ExperimentConfig c = parse_config(R"({"experiment": "check_suite", "seed": 6, "positions": 2,
    "model": {"kind": "deep_linear", "widths": [3, 2, 2], "seed": 4},
    "loss": {"kind": "square", "target": [0.5, -0.3]},
    "transforms": ["layer_rescaling", "homogeneity_scaling"]})");
  EXPECT_NE(config_digest(a), config_digest(c));
}

TEST(Config, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ull);
}

TEST(Config, MissingFile) {
  try {
    load_config("/nonexistent/equichk.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
  }
}

TEST(ReportIo, CsvQuoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(ReportIo, JsonRoundTripsDoubles) {
  IdentityReport r;
  r.check_name = "first_order";
  r.rel_residual = 0.1 + 0.2;
  r.abs_residual = std::numeric_limits<double>::quiet_NaN();
  r.extras.emplace_back("x", 1.0 / 3.0);
  const std::string j = report_to_json(r);
  EXPECT_NE(j.find("0.30000000000000004"), std::string::npos) << j;
  EXPECT_NE(j.find("\"abs_residual\":\"nan\""), std::string::npos) << j;
  EXPECT_NE(j.find("0.3333333333333333"), std::string::npos) << j;
}

TEST(Experiment, WritesReportsSummaryManifest) {
  const fs::path dir = scratch("suite");
  const RunResult res = run_experiment(parse_config(kSmallSuite), dir);
  EXPECT_TRUE(res.all_pass);
  EXPECT_FALSE(res.reports.empty());
  for (const char* f : {"reports.jsonl", "summary.csv", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string summary = slurp(dir / "summary.csv");
  EXPECT_EQ(summary.rfind("check_name,paper_anchor,rel_residual,tolerance,pass", 0), 0u);
  const std::string manifest = slurp(dir / "manifest.json");
  EXPECT_NE(manifest.find(res.digest), std::string::npos);
  EXPECT_NE(manifest.find("pass_counts"), std::string::npos);
  EXPECT_NE(manifest.find("wall_clock_seconds"), std::string::npos);
}

TEST(Experiment, ReportsAreByteIdenticalAcrossRuns) {
  const ExperimentConfig cfg = parse_config(kSmallSuite);
  const fs::path a = scratch("repro_a"), b = scratch("repro_b");
  run_experiment(cfg, a);
  run_experiment(cfg, b);
  EXPECT_EQ(slurp(a / "reports.jsonl"), slurp(b / "reports.jsonl"));
  EXPECT_EQ(slurp(a / "summary.csv"), slurp(b / "summary.csv"));
}

TEST(Experiment, FlowConservesCharges) {
  const fs::path dir = scratch("flow");
  const RunResult res = run_experiment(parse_config(R"({"experiment": "flow", "seed": 2,
    "model": {"kind": "deep_linear", "widths": [3, 2, 2], "seed": 4},
    "loss": {"kind": "square", "target": [0.5, -0.3]},
    "transforms": ["layer_rescaling", {"name": "linear_reparam", "generator": [[0.7, -0.2], [-0.2, 0.4]]}],
    "dynamics": {"T": 2, "dt": 0.005}})"), dir);
  ASSERT_EQ(res.reports.size(), 2u);
  for (const auto& r : res.reports) {
    EXPECT_EQ(r.check_name, "charge_conservation");
    EXPECT_TRUE(r.pass) << r.rel_residual;
  }
  EXPECT_TRUE(fs::exists(dir / "trajectory.csv"));
}

TEST(Experiment, GdOrthogonality) {
  const RunResult res = run_experiment(parse_config(R"({"experiment": "flow", "seed": 2,
    "model": {"kind": "homogeneous_relu_mlp", "widths": [3, 4, 1], "seed": 3},
    "loss": {"kind": "logistic", "target": 1},
    "transforms": ["layer_rescaling"],
    "dynamics": {"method": "gd", "eta": 0.1, "steps": 50}})"), scratch("gd"));
  ASSERT_EQ(res.reports.size(), 1u);
  EXPECT_EQ(res.reports[0].check_name, "gd_orthogonality");
  EXPECT_TRUE(res.reports[0].pass) << res.reports[0].rel_residual;
}

TEST(Experiment, NonConvergedStationaryFails) {
  const RunResult res = run_experiment(parse_config(R"({"experiment": "stationary_spectrum", "seed": 2,
    "model": {"kind": "deep_linear", "widths": [3, 2, 2], "seed": 4},
    "loss": {"kind": "square", "target": [0, 0]},
    "transforms": ["layer_rescaling"],
    "dataset": {"samples": [{"input": [1, 0, 0.5], "target": [0.3, -0.2]}]},
    "dynamics": {"T": 0.01, "dt": 0.005}})"), scratch("stationary"));
  ASSERT_EQ(res.reports.size(), 1u);
  EXPECT_FALSE(res.reports[0].pass);
  EXPECT_FALSE(res.all_pass);
}
