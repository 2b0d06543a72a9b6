#pragma once

#include <Eigen/Dense>

#include "lrmpc/convexsets.hpp"
#include "lrmpc/dqplant.hpp"

namespace lrmpc::qpsolver {

// minimize 1/2 x'Hx + g'x  subject to  ineq_a x <= ineq_b,  eq_a x = eq_b.
struct Qp {
  Eigen::MatrixXd hess;
  Eigen::VectorXd grad;
  Eigen::MatrixXd ineq_a;
  Eigen::VectorXd ineq_b;
  Eigen::MatrixXd eq_a;
  Eigen::VectorXd eq_b;

  // Throws std::invalid_argument on inconsistent dimensions or a Hessian that is
  // not symmetric positive definite.
  void validate() const;
  int num_vars() const { return static_cast<int>(grad.size()); }
};

enum class QpStatus { optimal, infeasible, iteration_limit };

const char* to_string(QpStatus s);

struct QpSolution {
  Eigen::VectorXd x_opt;
  double objective = 0.0;
  QpStatus status = QpStatus::infeasible;
  double kkt_residual = 0.0;
  Eigen::VectorXd ineq_multipliers;  // >= 0, one per inequality row
  Eigen::VectorXd eq_multipliers;
  int iterations = 0;
};

struct KktResidual {
  double stationarity = 0.0;
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;
  double max() const;
};

// Scaled KKT residual terms for a candidate primal-dual pair. Each term is
// divided by 1 + the magnitude of the quantities it balances.
KktResidual kkt_residual(const Qp& qp, const Eigen::VectorXd& x, const Eigen::VectorXd& lam_ineq,
                         const Eigen::VectorXd& lam_eq);

// Dual active-set method of Goldfarb and Idnani.
QpSolution solve(const Qp& qp, double tol = 1e-8, int max_iter = 1000);

// Layout of the condensed tube-MPC decision vector
// z = [x0 (4); u_0..u_{N-1} (2N); xi (g)], where x_measured - x0 = c_S + G_S xi and |xi| <= 1.
struct CondensedLayout {
  int horizon = 0;
  int num_generators = 0;
  int x0_offset() const { return 0; }
  int u_offset() const { return 4; }
  int xi_offset() const { return 4 + 2 * horizon; }
  int size() const { return 4 + 2 * horizon + num_generators; }
};

struct MpcSets {
  convexsets::HPolytope x_hat;    // state constraint on nominal states
  convexsets::HPolytope u_hat;    // input constraint on nominal inputs
  convexsets::HPolytope x_f_hat;  // terminal constraint on x_N - r
};

struct CondensedMpc {
  Qp qp;
  CondensedLayout layout;
  double constant = 0.0;  // cost terms independent of z
  // Stacked prediction x_k = phi[k] * x0 + gamma[k] * U + affine[k].
  std::vector<Eigen::MatrixXd> phi;
  std::vector<Eigen::MatrixXd> gamma;
  std::vector<Eigen::VectorXd> affine;
};

// Condensed QP for
//   min  sum_{k<N} |x_k - r|^2_Q + |u_k|^2_R + |x_N - r|^2_P + 2 l'(x_N - r)
//   s.t. x_{k+1} = A x_k + B u_k + c,  x_k in X_hat (k < N),  u_k in U_hat,
//        x_N - r in X_f_hat,  x_measured - x_0 in S.
// The affine drift c carries a known disturbance forecast; c = 0 recovers the
// plain nominal dynamics. xi_regularization adds a small strictly convex term on
// the generator coefficients, which are otherwise free inside the tube.
CondensedMpc build_condensed_mpc(const dqplant::DiscreteModel& model, const Eigen::Matrix4d& q,
                                 const Eigen::Matrix2d& r, const Eigen::Matrix4d& p, int horizon,
                                 const MpcSets& sets, const Eigen::Vector4d& r_target,
                                 const convexsets::Zonotope& x_init_set,
                                 const Eigen::Vector4d& x_measured,
                                 const Eigen::Vector4d& affine_drift = Eigen::Vector4d::Zero(),
                                 double xi_regularization = 1e-9,
                                 const Eigen::Vector4d& terminal_linear = Eigen::Vector4d::Zero());

// Tube-MPC cost of a trajectory, computed by explicit rollout.
double rollout_cost(const dqplant::DiscreteModel& model, const Eigen::Matrix4d& q,
                    const Eigen::Matrix2d& r, const Eigen::Matrix4d& p,
                    const Eigen::Vector4d& r_target, const Eigen::Vector4d& x0,
                    const Eigen::VectorXd& u_stack,
                    const Eigen::Vector4d& affine_drift = Eigen::Vector4d::Zero(),
                    const Eigen::Vector4d& terminal_linear = Eigen::Vector4d::Zero());

}  // namespace lrmpc::qpsolver
