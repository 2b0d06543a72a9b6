#pragma once

#include <Eigen/Dense>

#include <array>
#include <complex>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lrmpc/dqplant.hpp"
#include "lrmpc/gpregress.hpp"
#include "lrmpc/tubempc.hpp"

namespace lrmpc::gridsim {

// Phase-peak voltage of a 600 V line-to-line system.
inline const double kBaseVoltagePeak = 600.0 * std::sqrt(2.0 / 3.0);

enum class LoadKind { constant_impedance, constant_power, harmonic };

struct HarmonicOrder {
  int order = 5;
  double magnitude = 0.0;  // relative to the fundamental
};

struct LoadModel {
  LoadKind kind = LoadKind::constant_impedance;
  double s_rated = 0.0;  // VA
  double pf = 1.0;       // lagging
  std::vector<HarmonicOrder> orders;
  double base_current = 0.0;  // fundamental peak current of a harmonic load (A)
  double connect_time = 0.0;  // s
  // Linear ramp of the drawn current from zero after connect_time; 0 is a step.
  double ramp_time = 0.0;  // s
  // Constant-power loads: time constant of the first-order voltage filter the
  // load regulates against; 0 is an ideal instantaneous constant-power load.
  double response_time = 0.0;  // s

  static LoadModel impedance(double s_rated, double pf, double connect_time);
  static LoadModel constant_power(double s_rated, double pf, double connect_time);
  static LoadModel harmonic(std::vector<HarmonicOrder> orders, double base_current, double connect_time);
  // Current THD of a harmonic load in percent.
  double current_thd_percent() const;
  void validate() const;
};

struct LoadState {
  Eigen::Vector2d held_current = Eigen::Vector2d::Zero();
  int floor_events = 0;
  Eigen::Vector2d v_filtered = Eigen::Vector2d::Zero();
  double t_last = 0.0;
  bool started = false;
};

// dq load current drawn at terminal voltage v_dq. The harmonic load is built in
// abc at angle omega0 * t and Park-transformed. A constant-power load below
// 0.1 * v_base holds its last current (state may be null).
Eigen::Vector2d load_current(const LoadModel& load, const Eigen::Vector2d& v_dq, double t, double omega0,
                             double v_base = kBaseVoltagePeak, LoadState* state = nullptr);

// P = 1.5 (vd id + vq iq), Q = 1.5 (vq id - vd iq).
std::pair<double, double> instantaneous_power(const Eigen::Vector2d& v_dq, const Eigen::Vector2d& i_dq);

// First-order low-pass filter discretized by the bilinear transform with
// frequency prewarping. DC gain is exactly 1.
struct LowPassState {
  double x_prev = 0.0;
  double y_prev = 0.0;
};
double lowpass(double sample, LowPassState& state, double cutoff_hz, double ts);

struct ThdReport {
  std::array<double, 3> thd_percent{0.0, 0.0, 0.0};
  double fundamental_rms = 0.0;                     // phase a
  std::vector<std::pair<int, double>> harmonic_table;  // phase a peak magnitudes, orders 1..25
  double max_thd() const;
};

// DFT over the last window_cycles fundamental cycles of abc (n x 3) sampled at
// fs. Throws std::invalid_argument when the window is not an integer number of
// samples or the data is too short.
ThdReport thd(const Eigen::MatrixXd& abc, double f0, double fs, int window_cycles, int max_order = 25);

enum class ControllerKind { lrmpc, rmpc, mpc, pi };
const char* to_string(ControllerKind k);
ControllerKind controller_from_string(const std::string& s);

struct PiGains {
  double kp = 0.0;  // voltage loop, A/V
  double ki = 0.0;  // voltage loop, A/(V s)
  double kc = 2.0;  // current loop, ohm
  // Pole placement of the capacitor voltage loop at the given bandwidth.
  static PiGains from_bandwidth(const dqplant::FilterParams& p, double bandwidth_hz = 1000.0,
                                double integral_corner_hz = 100.0, double kc = 2.0);
};

struct LearnerConfig {
  int window_cap = 200;
  int min_points = 20;
  int refit_every = 40;
  gpregress::HyperGrid grid;  // lambda entries are multiples of Ts
  // Fixed hyperparameters (lambda in multiples of Ts) instead of grid fitting.
  std::optional<gpregress::GpHyperparams> fixed_hp;
  double confidence = 0.95;
  bool additive_radius = false;
};

struct SingleDgScenario {
  dqplant::FilterParams plant;
  dqplant::UncertaintyBounds bounds;
  bool drift = true;
  double drift_period = 0.5;
  std::vector<LoadModel> loads;
  double duration = 0.2;
  std::uint64_t seed = 0;
  double noise_variance = 0.01;
  int substeps = 10;
  bool computational_delay = false;
  Eigen::Vector2d v_ref = Eigen::Vector2d(kBaseVoltagePeak, 0.0);
  tubempc::TubeConfig tube;
  LearnerConfig learner;
  // Per-channel half-width of the fixed load-current box used by rmpc.
  double rmpc_w1_half_width = 20.0;
  PiGains pi = PiGains::from_bandwidth(dqplant::FilterParams{});
  int thd_window_cycles = 6;

  int num_steps() const;
  void validate() const;
};

struct StepRecord {
  int step = 0;
  int dg = 0;
  double t = 0.0;
  Eigen::Vector4d x_true = Eigen::Vector4d::Zero();
  Eigen::Vector4d x_nominal = Eigen::Vector4d::Zero();
  Eigen::Vector2d u = Eigen::Vector2d::Zero();
  Eigen::Vector2d i_load = Eigen::Vector2d::Zero();  // interval average
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  Eigen::Vector2d sigma2 = Eigen::Vector2d::Zero();
  Eigen::Vector4d tube_half_widths = Eigen::Vector4d::Zero();
  Eigen::Vector3d v_abc = Eigen::Vector3d::Zero();
  int qp_status = 0;  // 0 optimal, 1 infeasible, 2 iteration limit, -1 no QP
  bool fallback = false;
  bool lyapunov_checked = false;
  bool lyapunov_ok = true;
  bool tube_checked = false;  // one-step propagation with the disturbance inside the set
  bool tube_ok = true;
  bool candidate_checked = false;
  bool candidate_ok = true;
  bool disturbance_inside = true;
  double w_hat_scale = 1.0;  // 1 unless the disturbance set was reduced
  double p = 0.0;
  double q = 0.0;
  double f = 0.0;
};

struct RunCounters {
  int steps = 0;
  int qp_solves = 0;
  // Every non-optimal QP, and the subset that breaks recursive feasibility
  // (after a feasible start, with the last disturbance inside the set).
  int qp_infeasible_events = 0;
  int qp_infeasible_after_feasible = 0;
  int fallbacks = 0;
  int lyapunov_checked = 0;
  int lyapunov_violations = 0;
  int tube_checked = 0;
  int tube_violations = 0;
  int candidate_checked = 0;
  int candidate_infeasible = 0;
  int disturbance_outside = 0;
  // Steps on which the disturbance set was scaled down about its center
  // because the full set left no room for the tightened constraints.
  int w_hat_reduced = 0;
  double max_l2_realized = 0.0;
  double wall_ms_per_step = 0.0;
  int monitor_violations() const;
};

struct SimTrace {
  std::vector<StepRecord> rows;
  RunCounters counters;
  ControllerKind controller = ControllerKind::lrmpc;
  int num_dgs = 1;
  std::string diagnostic;  // non-empty when the run stopped early
  bool failed = false;
};

// Fixed column order; see README for the schema.
std::string trace_csv_header();
void write_trace_csv(const SimTrace& trace, std::ostream& os);

// abc voltages of one DG as an n x 3 matrix.
Eigen::MatrixXd voltage_abc(const SimTrace& trace, int dg = 0);
ThdReport trace_thd(const SimTrace& trace, double f0, double ts, int window_cycles, int dg = 0);

SimTrace run_single_dg(const SingleDgScenario& sc, ControllerKind kind);

struct DroopParams {
  double f_n = 60.0;
  double v_n = kBaseVoltagePeak;
  double m = 0.6;  // Hz/MW
  double n = 0.5;  // V/MVAr
  double lpf_cutoff = 10.0;
  void validate() const;
};

struct TwoDgScenario {
  SingleDgScenario dg;  // plant, controller, learner, noise and seed shared by both units; dg.loads is unused
  std::array<DroopParams, 2> droop{DroopParams{60.0, kBaseVoltagePeak, 0.6, 0.5, 10.0},
                                   DroopParams{60.0, kBaseVoltagePeak, 0.9, 0.87, 10.0}};
  // Line impedances on the high-voltage side and the transformer ratio that
  // refers them to the inverter side.
  std::array<std::complex<double>, 2> line_z{std::complex<double>(0.35, 1.16), std::complex<double>(0.35, 1.16)};
  double transformer_ratio = 13800.0 / 600.0;
  std::vector<LoadModel> loads;
  double duration = 1.2;
  void validate() const;
};

struct TwoDgSummary {
  std::array<double, 2> p_avg{0.0, 0.0};  // W, steady-state averages of filtered power
  std::array<double, 2> q_avg{0.0, 0.0};
  std::array<double, 2> f_avg{0.0, 0.0};
  double p_load = 0.0;
  double p_line_loss = 0.0;
  double ratio() const { return p_avg[1] != 0.0 ? p_avg[0] / p_avg[1] : 0.0; }
  double balance_error() const;  // |P1 + P2 - load - losses| / (load + losses)
};

SimTrace run_two_dg(const TwoDgScenario& sc, ControllerKind kind = ControllerKind::lrmpc,
                    TwoDgSummary* summary = nullptr);

// Both calibrations run the PI baseline over the given scenarios and
// seeds and skip the samples within settle_s after each load connection, where
// the one-step model is not representative.
// Largest realized |x+ - A x - B u - E i_avg|_inf times inflation.
double calibrate_l2(const std::vector<SingleDgScenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                    double inflation = 1.1, double settle_s = 1.0 / 60.0);
// Largest per-channel gap between the sampled and the interval-average load
// current times inflation.
double calibrate_rmpc_box(const std::vector<SingleDgScenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                          double inflation = 1.1, double settle_s = 1.0 / 60.0);

}  // namespace lrmpc::gridsim
