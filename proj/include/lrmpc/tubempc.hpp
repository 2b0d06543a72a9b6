#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <vector>

#include "lrmpc/convexsets.hpp"
#include "lrmpc/dqplant.hpp"
#include "lrmpc/gpregress.hpp"
#include "lrmpc/qpsolver.hpp"

namespace lrmpc::tubempc {

struct LqrResult {
  Eigen::MatrixXd k;  // policy u = K x, A + B K Schur
  Eigen::MatrixXd p;  // Riccati fixed point
  int iterations = 0;
};

// Fixed point of the discrete algebraic Riccati recursion. Throws
// std::runtime_error on divergence or when the residual stays above tol.
LqrResult lqr_gain(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                   const Eigen::MatrixXd& r, double tol = 1e-10, int max_iter = 200000);

// Solves P = Q + K'RK + A_K' P A_K by a vectorized linear solve.
Eigen::MatrixXd terminal_p_from_lyapunov(const Eigen::MatrixXd& a_k, const Eigen::MatrixXd& q,
                                         const Eigen::MatrixXd& r, const Eigen::MatrixXd& k);
double lyapunov_residual(const Eigen::MatrixXd& p, const Eigen::MatrixXd& a_k, const Eigen::MatrixXd& q,
                         const Eigen::MatrixXd& r, const Eigen::MatrixXd& k);

struct SteadyStateInput {
  Eigen::Vector2d u_r = Eigen::Vector2d::Zero();
  double residual = 0.0;  // |A r + B u_r + c - r|
};

// u_r = pinv(B) (r - A r - c).
SteadyStateInput steady_state_input(const dqplant::DiscreteModel& model, const Eigen::Vector4d& r_target,
                                    const Eigen::Vector4d& affine_drift = Eigen::Vector4d::Zero());

// Equilibrium with the voltages pinned to v_ref and the load current treated as
// a constant disturbance: solves [A - I, B][x_r; u_r] = -E i_load for the
// filter currents and the input.
Eigen::Vector4d compute_reference(const Eigen::Vector2d& v_ref_dq, const dqplant::DiscreteModel& model,
                                  const Eigen::Vector2d& expected_load);

// State-space disturbance set E * outer_box(w1) + w2 box. The center is E mu*.
convexsets::Zonotope disturbance_zonotope(const dqplant::DiscreteModel& model, const gpregress::WHat& w);

struct ControllerWeights {
  Eigen::Matrix4d q = Eigen::Vector4d(1.0, 1.0, 1e-4, 1e-4).asDiagonal();
  Eigen::Matrix2d r = 1e-4 * Eigen::Matrix2d::Identity();
  Eigen::Matrix4d p = Eigen::Matrix4d::Zero();  // derived, never set by hand
};

struct TubeConfig {
  Eigen::Matrix4d q = Eigen::Vector4d(1.0, 1.0, 1e-4, 1e-4).asDiagonal();
  Eigen::Matrix2d r = 1e-4 * Eigen::Matrix2d::Identity();
  // Weights of the LQR problem that yields the ancillary gain K.
  Eigen::Matrix4d q_anc = Eigen::Matrix4d::Identity();
  Eigen::Matrix2d r_anc = 1e-3 * Eigen::Matrix2d::Identity();
  int horizon = 5;
  convexsets::Box x_box{Eigen::Vector4d(-734.85, -734.85, -8164.97, -8164.97),
                        Eigen::Vector4d(734.85, 734.85, 8164.97, 8164.97)};
  convexsets::Box u_box{Eigen::Vector2d(-1000.0, -1000.0), Eigen::Vector2d(1000.0, 1000.0)};
  // false gives plain MPC: no tube, no tightening, x0 pinned to the measurement.
  bool robust = true;
  double mrpi_eps = 1e-3;
  int generator_cap = 24;
  double cache_inflation = 0.01;   // tube computed for a 1% larger disturbance box
  double cache_lower_ratio = 0.98; // recompute when the box shrinks below this fraction
  double terminal_margin = 0.05;   // terminal set computed for offsets shrunk by this fraction
  double qp_tol = 1e-8;
  int qp_max_iter = 2000;
  double xi_regularization = 1e-9;
  double lyapunov_tol = 1e-6;

  void validate() const;
};

struct StepMonitor {
  qpsolver::QpStatus qp_status = qpsolver::QpStatus::infeasible;
  int qp_iterations = 0;
  double kkt_residual = 0.0;
  bool fallback_used = false;
  double lyapunov_value = 0.0;
  // Decrease check against the previous step; only evaluated when the
  // reference and drift are unchanged and the previous step was optimal.
  bool lyapunov_checked = false;
  bool lyapunov_decrease_ok = true;
  double lyapunov_margin = 0.0;  // bound minus actual change
  bool in_region_of_attraction = false;
  // x in x0* + S at the current step.
  bool tube_contains_state = true;
  // x(t) in x1*(t-1) + S(t-1), the one-step tube propagation.
  bool propagation_checked = false;
  bool propagation_ok = true;
  // Feasibility of the shifted previous solution for the current problem.
  bool candidate_checked = false;
  bool candidate_feasible = true;
  bool tube_recomputed = false;
  bool terminal_recomputed = false;
};

struct StepResult {
  Eigen::Vector2d u_applied = Eigen::Vector2d::Zero();
  Eigen::Vector4d x_nominal = Eigen::Vector4d::Zero();
  Eigen::Vector2d u_nominal = Eigen::Vector2d::Zero();
  Eigen::Vector2d u_r = Eigen::Vector2d::Zero();
  Eigen::Vector4d tube_half_widths = Eigen::Vector4d::Zero();
  StepMonitor monitor;
};

struct NominalTrajectory {
  std::vector<Eigen::Vector4d> x;  // N + 1 states
  std::vector<Eigen::Vector2d> u;  // N inputs
};

class InfeasibleSetsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TubeController {
 public:
  TubeController(const dqplant::DiscreteModel& model, const TubeConfig& cfg);

  // One receding-horizon step. w_hat is the state-space disturbance set; its
  // center enters the nominal dynamics as a known drift and the remainder sizes
  // the tube. On an infeasible QP the shifted previous solution is applied.
  StepResult step(const Eigen::Vector4d& x_measured, const convexsets::Zonotope& w_hat,
                  const Eigen::Vector4d& r_target);

  // Previous solution shifted by one step with the terminal input
  // K (x_N - r) + u_r appended. Throws std::logic_error without a stored solution.
  NominalTrajectory shifted_candidate(const Eigen::Vector4d& r_target) const;

  // Checks a nominal trajectory against the current tightened sets and, if x
  // is given, the initial tube constraint.
  bool trajectory_feasible(const NominalTrajectory& tr, const Eigen::Vector4d& r_target,
                           const std::optional<Eigen::Vector4d>& x_measured, double tol = 1e-6) const;

  // Linear terminal weight l = (I - A_K')^{-1} K' R u_r. With it the terminal
  // cost matches the tail cost of the policy K (x - r) + u_r up to a constant,
  // so the shifted candidate costs exactly v + |u_r|^2_R - stage cost.
  Eigen::Vector4d terminal_linear(const Eigen::Vector2d& u_r) const;

  const Eigen::Matrix<double, 2, 4>& k_gain() const { return k_; }
  const Eigen::Matrix4d& a_k() const { return a_k_; }
  const ControllerWeights& weights() const { return weights_; }
  const convexsets::Zonotope& s_hat() const { return s_hat_; }
  const qpsolver::MpcSets& sets() const { return sets_; }
  const dqplant::DiscreteModel& model() const { return model_; }
  const TubeConfig& config() const { return cfg_; }
  double p_residual() const { return p_residual_; }
  const std::optional<NominalTrajectory>& last_nominal() const { return last_; }

  // Recomputes the tube and the tightened sets for a disturbance box with the
  // given half-widths (no caching); exposed for set-monotonicity checks.
  void set_disturbance(const Eigen::Vector4d& half_widths);
  void set_terminal(const Eigen::Vector4d& r_target, const Eigen::Vector2d& u_r);

 private:
  bool update_tube(const Eigen::Vector4d& half_widths);
  bool update_terminal(const Eigen::Vector4d& r_target, const Eigen::Vector2d& u_r);
  void tighten();

  dqplant::DiscreteModel model_;
  TubeConfig cfg_;
  ControllerWeights weights_;
  Eigen::Matrix<double, 2, 4> k_;
  Eigen::Matrix4d a_k_;
  double p_residual_ = 0.0;

  convexsets::Zonotope s_hat_;
  Eigen::Vector4d cached_hw_ = Eigen::Vector4d::Constant(-1.0);
  qpsolver::MpcSets sets_;
  Eigen::VectorXd terminal_offsets_cached_;
  bool terminal_valid_ = false;
  Eigen::MatrixXd terminal_base_normals_;

  std::optional<NominalTrajectory> last_;
  Eigen::Vector4d last_r_ = Eigen::Vector4d::Zero();
  Eigen::Vector4d last_c_ = Eigen::Vector4d::Zero();
  convexsets::Zonotope last_s_;
  double last_v_ = 0.0;
  double last_stage_ = 0.0;
  double last_ur_cost_ = 0.0;
  bool last_optimal_ = false;
};

}  // namespace lrmpc::tubempc
