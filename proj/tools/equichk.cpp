// equichk command-line front end.
//
//   equichk run <config.json> [--output-dir DIR]
//   equichk catalog [--json] [--filter key=value]
//   equichk version
//
// Exit codes: 0 all checks passed, 1 a check failed, 2 configuration error,
// 3 runtime fault.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "equichk/catalog.hpp"
#include "equichk/errors.hpp"
#include "equichk/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int cmd_run(const std::string& path, const std::string& output_dir) {
  equichk::ExperimentConfig cfg;
  try {
    cfg = equichk::load_config(path);
  } catch (const equichk::Error& e) {
    std::cerr << "equichk: config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    std::optional<std::filesystem::path> dir;
    if (!output_dir.empty()) dir = output_dir;
    const equichk::RunResult res = equichk::run_experiment(cfg, dir);
    std::map<std::string, std::pair<int, int>> counts;  // passed, total
    for (const auto& r : res.reports) {
      auto& c = counts[r.check_name];
      c.first += r.pass ? 1 : 0;
      c.second += 1;
    }
    for (const auto& [name, c] : counts) {
      std::cout << (c.first == c.second ? "PASS " : "FAIL ") << name << ' ' << c.first << '/' << c.second << '\n';
    }
    for (const auto& w : res.warnings) std::cerr << "equichk: warning: " << w << '\n';
    std::cout << "reports written to " << res.output_dir.string() << " (digest " << res.digest << ")\n";
    return res.all_pass ? kExitOk : kExitCheckFailure;
  } catch (const equichk::Error& e) {
    if (e.code() == equichk::ErrorCode::ConfigError) {
      std::cerr << "equichk: config error: " << e.what() << '\n';
      return kExitConfig;
    }
    std::cerr << "equichk: runtime fault: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "equichk: runtime fault: " << e.what() << '\n';
    return kExitRuntime;
  }
}

bool matches(const equichk::CatalogEntry& e, const std::string& key, const std::string& value) {
  if (key.empty()) return true;
  if (key == "category") return e.category == value;
  if (key == "name") return e.name == value;
  if (key == "check") return e.category == "check" && e.name == value;
  if (key == "transform") {
    if (e.category == "transform") return e.name == value;
    if (e.category != "check") return false;
    const auto related = equichk::related_checks(value);
    return std::find(related.begin(), related.end(), std::string(e.name)) != related.end();
  }
  return false;
}

int cmd_catalog(bool json, const std::string& filter) {
  std::string key, value;
  if (!filter.empty()) {
    const auto eq = filter.find('=');
    if (eq == std::string::npos) {
      std::cerr << "equichk: --filter expects key=value\n";
      return kExitConfig;
    }
    key = filter.substr(0, eq);
    value = filter.substr(eq + 1);
    if (key != "category" && key != "name" && key != "check" && key != "transform") {
      std::cerr << "equichk: unknown filter key '" << key << "' (category, name, check, transform)\n";
      return kExitConfig;
    }
  }
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& e : equichk::catalog_entries()) {
    if (!matches(e, key, value)) continue;
    if (json) {
      out.push_back({{"category", e.category}, {"name", e.name}, {"paper_anchor", e.paper_anchor},
                     {"summary", e.summary}});
    } else {
      std::cout << e.category << '_' << e.name << " ⇠ " << e.paper_anchor << "    " << e.summary << '\n';
    }
  }
  if (json) std::cout << out.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equichk: equivariance identity checker"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  auto* run = app.add_subcommand("run", "Run an experiment configuration");
  run->add_option("config", config_path, "Experiment JSON file")->required();
  run->add_option("--output-dir", output_dir, "Override the configured output directory");

  bool json = false;
  std::string filter;
  auto* cat = app.add_subcommand("catalog", "List models, losses, transforms and checks");
  cat->add_flag("--json", json, "Machine-readable output");
  cat->add_option("--filter", filter, "key=value with key in category, name, check, transform");

  app.add_subcommand("version", "Print the tool version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (*run) return cmd_run(config_path, output_dir);
  if (*cat) return cmd_catalog(json, filter);
  std::cout << "equichk " << equichk::kToolVersion << '\n';
  return kExitOk;
}
