#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrmpc/gridsim.hpp"

namespace lrmpc::scenario {

// Malformed text or an out-of-range field. line is 0 when the error is not
// tied to a line (invariant checks after parsing).
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& msg, int line = 0, std::string field = {});
  int line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  int line_;
  std::string field_;
};

// Invalid command usage, such as comparing a single controller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { single_dg, two_dg };

struct ScenarioConfig {
  std::string name = "scenario";
  Mode mode = Mode::single_dg;
  std::vector<gridsim::ControllerKind> controllers{gridsim::ControllerKind::lrmpc};
  // Plant, uncertainty, controller, learner, loads, duration, seed. In two-DG
  // mode the loads sit on the common bus.
  gridsim::SingleDgScenario single;
  std::array<gridsim::DroopParams, 2> droop = gridsim::TwoDgScenario{}.droop;
  std::array<std::complex<double>, 2> line_z = gridsim::TwoDgScenario{}.line_z;
  double transformer_ratio = gridsim::TwoDgScenario{}.transformer_ratio;

  gridsim::TwoDgScenario two_dg() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// key = value text with [sections]; '#' starts a comment. Missing keys keep
// their defaults; unknown sections or keys are errors. See README for the schema.
ScenarioConfig parse_config_text(const std::string& text);
ScenarioConfig parse_config(const std::filesystem::path& path);
// Writes every field; parse_config_text(serialize(c)) reproduces c exactly.
std::string serialize(const ScenarioConfig& c);

struct ControllerReport {
  gridsim::ControllerKind kind = gridsim::ControllerKind::lrmpc;
  std::vector<double> thd_percent;  // max over phases, one entry per DG
  gridsim::RunCounters counters;
  std::optional<gridsim::TwoDgSummary> two_dg;
  bool failed = false;
  std::string diagnostic;
};

struct RunReport {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<ControllerReport> rows;

  int feasibility_violations() const;  // QP infeasible after a feasible start
  int lyapunov_violations() const;
  int tube_violations() const;
  int monitor_violations() const;
  bool any_failed() const;
  std::string to_text() const;
  // One header row with the controller names and one row of THD values per DG.
  std::string thd_table_csv() const;
};

struct RunOutputs {
  RunReport report;
  std::vector<std::filesystem::path> files;
};

// Runs one controller and writes trace_<kind>.csv and report_<kind>.txt into
// out_dir when it is non-empty. THD is NaN when the run is shorter than the
// analysis window.
RunOutputs cmd_run(const ScenarioConfig& config, gridsim::ControllerKind kind,
                   std::optional<std::uint64_t> seed, const std::filesystem::path& out_dir);

// Runs every configured controller on the same scenario and seed and writes
// per-controller traces plus thd_table.csv and report.txt. Throws UsageError
// with fewer than two controllers.
RunOutputs cmd_compare(const ScenarioConfig& config, const std::filesystem::path& out_dir);

}  // namespace lrmpc::scenario
