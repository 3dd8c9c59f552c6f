// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qatlab/config.hpp"
#include "qatlab/error.hpp"
#include "qatlab/experiment.hpp"

using namespace qatlab;

int main(int argc, char** argv) {
  CLI::App app{"qatlab: quantization-aware training oscillation lab"};
  app.allow_extras();
  std::string task;
  std::string config_path;
  bool print_config = false;
  app.add_option("task", task, "toy | train | qc | fold | ablate | eval | report")->required();
  app.add_option("-c,--config", config_path, "JSON config file (a run manifest also works)");
  app.add_flag("--print-config", print_config, "print the effective configuration and exit");
  app.footer(
      "Any --key=value (dotted for nested keys, e.g. --ema.alpha=0.999) overrides the config.\n"
      "For `report`, plain arguments name run directories to aggregate.\n"
      "Exit codes: 0 success, 2 configuration error, 3 runtime failure.");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    nlohmann::ordered_json j = config_path.empty() ? nlohmann::ordered_json::object() : read_config_file(config_path);
    std::vector<std::string> overrides, runs;
    for (const auto& extra : app.remaining()) {
      if (extra.starts_with("--")) {
        overrides.push_back(extra);
      } else if (task == "report") {
        runs.push_back(extra);
      } else {
        throw ConfigError({"unexpected argument '" + extra + "' (overrides need the form --key=value)"});
      }
    }
    apply_overrides(j, overrides);
    j["task"] = task;
    if (!runs.empty()) {
      auto& r = j["runs"];
      if (!r.is_array()) r = nlohmann::ordered_json::array();
      for (const auto& d : runs) r.push_back(d);
    }
    const ExperimentConfig cfg = config_from_json(j);
    if (print_config) {
      std::cout << config_to_json(cfg).dump(2) << '\n';
      return kExitOk;
    }
    return run_experiment(cfg, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
