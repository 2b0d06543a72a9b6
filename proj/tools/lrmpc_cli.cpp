#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lrmpc/scenario.hpp"

namespace {

namespace sc = lrmpc::scenario;
namespace gs = lrmpc::gridsim;

constexpr int kExitClean = 0;
constexpr int kExitUsage = 1;
constexpr int kExitSimulation = 2;
constexpr int kExitMonitor = 3;

void init_logging() {
  const char* env = std::getenv("LRMPC_LOG_LEVEL");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
  spdlog::set_pattern("[%l] %v");
}

int exit_code(const sc::RunReport& report) {
  for (const auto& row : report.rows) {
    spdlog::info("{}: thd {}%, {} steps, {} monitor violations{}", gs::to_string(row.kind),
                 row.thd_percent.empty() ? 0.0 : row.thd_percent.front(), row.counters.steps,
                 row.counters.monitor_violations(), row.failed ? ", failed: " + row.diagnostic : "");
  }
  if (report.any_failed()) return kExitSimulation;
  return report.monitor_violations() > 0 ? kExitMonitor : kExitClean;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Learning tube MPC microgrid simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string controller = "lrmpc";
  std::optional<std::uint64_t> seed;
  std::string out_dir;

  auto* run = app.add_subcommand("run", "Run one controller on a scenario");
  run->add_option("--config", config_path, "Scenario config file")->required();
  run->add_option("--controller", controller, "lrmpc, rmpc, mpc or pi");
  run->add_option("--seed", seed, "Override simulation.seed");
  run->add_option("--out", out_dir, "Output directory for trace and report");

  auto* compare = app.add_subcommand("compare", "Run every configured controller on one scenario");
  compare->add_option("--config", config_path, "Scenario config file")->required();
  compare->add_option("--out", out_dir, "Output directory for traces and tables");

  std::vector<std::string> calib_configs;
  std::vector<std::uint64_t> calib_seeds{101, 102, 103, 104};
  auto* calibrate = app.add_subcommand("calibrate", "Calibrate the l2 bound and rmpc box with the PI baseline");
  calibrate->add_option("--config", calib_configs, "Scenario config files")->required();
  calibrate->add_option("--seeds", calib_seeds, "Calibration seeds")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitClean : kExitUsage;
  }

  try {
    if (run->parsed()) {
      const auto cfg = sc::parse_config(config_path);
      const auto out = sc::cmd_run(cfg, gs::controller_from_string(controller), seed, out_dir);
      std::cout << out.report.to_text();
      return exit_code(out.report);
    }
    if (compare->parsed()) {
      const auto cfg = sc::parse_config(config_path);
      const auto out = sc::cmd_compare(cfg, out_dir);
      std::cout << out.report.thd_table_csv();
      return exit_code(out.report);
    }
    std::vector<gs::SingleDgScenario> scenarios;
    for (const auto& path : calib_configs) {
      const auto cfg = sc::parse_config(path);
      if (cfg.mode != sc::Mode::single_dg)
        throw sc::UsageError("calibrate: " + path + " is not a single_dg scenario");
      scenarios.push_back(cfg.single);
    }
    std::cout << "l2_bound = " << gs::calibrate_l2(scenarios, calib_seeds) << '\n'
              << "rmpc_box = " << gs::calibrate_rmpc_box(scenarios, calib_seeds) << '\n';
    return kExitClean;
  } catch (const sc::ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kExitUsage;
  } catch (const sc::UsageError& e) {
    spdlog::error("usage: {}", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("simulation: {}", e.what());
    return kExitSimulation;
  }
}
