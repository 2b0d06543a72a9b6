#include "lrmpc/tubempc.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <string>

namespace lrmpc::tubempc {

using convexsets::Box;
using convexsets::HPolytope;
using convexsets::Zonotope;

namespace {

bool is_schur(const Eigen::MatrixXd& a) { return convexsets::spectral_radius(a) < 1.0; }

Zonotope drop_zero_generators(const Zonotope& z) {
  std::vector<int> keep;
  for (int j = 0; j < z.num_generators(); ++j)
    if (z.generators.col(j).cwiseAbs().maxCoeff() > 0.0) keep.push_back(j);
  Eigen::MatrixXd g(z.dim(), static_cast<int>(keep.size()));
  for (size_t j = 0; j < keep.size(); ++j) g.col(static_cast<int>(j)) = z.generators.col(keep[j]);
  return Zonotope(z.center, g);
}

Zonotope translate(const Zonotope& z, const Eigen::VectorXd& by) { return Zonotope(z.center + by, z.generators); }

}  // namespace

LqrResult lqr_gain(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                   const Eigen::MatrixXd& r, double tol, int max_iter) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(b.cols());
  if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n || r.rows() != m || r.cols() != m)
    throw std::invalid_argument("lqr_gain: dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> r_llt(0.5 * (r + r.transpose()));
  if (r_llt.info() != Eigen::Success) throw std::invalid_argument("lqr_gain: R must be positive definite");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> q_es(0.5 * (q + q.transpose()));
  if (q_es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, q_es.eigenvalues().maxCoeff()))
    throw std::invalid_argument("lqr_gain: Q must be positive semidefinite");

  // A positive definite start reaches the stabilizing solution even when Q is
  // singular; starting from Q = 0 would stay at the non-stabilizing P = 0.
  Eigen::MatrixXd p = q + std::max(1.0, q.cwiseAbs().maxCoeff()) * Eigen::MatrixXd::Identity(n, n);
  LqrResult res;
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::MatrixXd btpb = r + b.transpose() * p * b;
    const Eigen::MatrixXd btpa = b.transpose() * p * a;
    Eigen::MatrixXd next = q + a.transpose() * p * a - btpa.transpose() * btpb.ldlt().solve(btpa);
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw std::runtime_error("lqr_gain: Riccati recursion diverged");
    const double diff = (next - p).cwiseAbs().maxCoeff();
    p = next;
    if (diff <= tol * std::max(1.0, p.cwiseAbs().maxCoeff())) {
      res.iterations = it;
      res.p = p;
      res.k = -(r + b.transpose() * p * b).ldlt().solve(b.transpose() * p * a);
      if (!is_schur(a + b * res.k)) throw std::runtime_error("lqr_gain: closed loop is not Schur");
      return res;
    }
  }
  throw std::runtime_error("lqr_gain: Riccati recursion did not converge");
}

Eigen::MatrixXd terminal_p_from_lyapunov(const Eigen::MatrixXd& a_k, const Eigen::MatrixXd& q,
                                         const Eigen::MatrixXd& r, const Eigen::MatrixXd& k) {
  const int n = static_cast<int>(a_k.rows());
  if (a_k.cols() != n || q.rows() != n || k.cols() != n || r.rows() != k.rows())
    throw std::invalid_argument("terminal_p_from_lyapunov: dimension mismatch");
  if (!is_schur(a_k)) throw std::invalid_argument("terminal_p_from_lyapunov: A_K is not Schur");
  const Eigen::MatrixXd q_eff = q + k.transpose() * r * k;
  // vec(P) = vec(Q_eff) + (A_K' kron A_K') vec(P)
  const int nn = n * n;
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(nn, nn);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < n; ++kk)
        for (int l = 0; l < n; ++l) lhs(i + n * j, kk + n * l) -= a_k(kk, i) * a_k(l, j);
  const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(q_eff.data(), nn);
  const auto lu = lhs.fullPivLu();
  Eigen::VectorXd vp = lu.solve(rhs);
  // One step of iterative refinement.
  vp += lu.solve(rhs - lhs * vp);
  Eigen::MatrixXd p = Eigen::Map<Eigen::MatrixXd>(vp.data(), n, n);
  return 0.5 * (p + p.transpose());
}

double lyapunov_residual(const Eigen::MatrixXd& p, const Eigen::MatrixXd& a_k, const Eigen::MatrixXd& q,
                         const Eigen::MatrixXd& r, const Eigen::MatrixXd& k) {
  const Eigen::MatrixXd res = p - q - k.transpose() * r * k - a_k.transpose() * p * a_k;
  return res.cwiseAbs().maxCoeff() / std::max(1.0, p.cwiseAbs().maxCoeff());
}

SteadyStateInput steady_state_input(const dqplant::DiscreteModel& model, const Eigen::Vector4d& r_target,
                                    const Eigen::Vector4d& affine_drift) {
  if (!r_target.allFinite()) throw std::invalid_argument("steady_state_input: non-finite reference");
  SteadyStateInput out;
  const Eigen::Vector4d rhs = r_target - model.a * r_target - affine_drift;
  out.u_r = model.b.completeOrthogonalDecomposition().solve(rhs);
  out.residual = (model.a * r_target + model.b * out.u_r + affine_drift - r_target).norm();
  return out;
}

Eigen::Vector4d compute_reference(const Eigen::Vector2d& v_ref_dq, const dqplant::DiscreteModel& model,
                                  const Eigen::Vector2d& expected_load) {
  const Eigen::Matrix4d am = model.a - Eigen::Matrix4d::Identity();
  Eigen::Matrix4d m;
  m << am.rightCols<2>(), model.b;
  const Eigen::Vector4d rhs = -model.e * expected_load - am.leftCols<2>() * v_ref_dq;
  const Eigen::FullPivLU<Eigen::Matrix4d> lu(m);
  if (lu.rank() < 4) throw std::runtime_error("compute_reference: singular equilibrium system");
  const Eigen::Vector4d y = lu.solve(rhs);
  return Eigen::Vector4d(v_ref_dq(0), v_ref_dq(1), y(0), y(1));
}

Zonotope disturbance_zonotope(const dqplant::DiscreteModel& model, const gpregress::WHat& w) {
  const Box b1 = convexsets::outer_box(w.w1_set);
  const Zonotope z1 = convexsets::linear_map(model.e, convexsets::to_zonotope(b1));
  return drop_zero_generators(convexsets::minkowski_sum(z1, w.w2_set));
}

void TubeConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("TubeConfig: horizon must be >= 1");
  if (x_box.dim() != 4 || u_box.dim() != 2) throw std::invalid_argument("TubeConfig: constraint box dimension");
  if (!(mrpi_eps > 0.0)) throw std::invalid_argument("TubeConfig: mrpi_eps must be > 0");
  if (generator_cap < 4) throw std::invalid_argument("TubeConfig: generator_cap must be >= 4");
  if (!(cache_inflation >= 0.0)) throw std::invalid_argument("TubeConfig: cache_inflation must be >= 0");
  if (!(cache_lower_ratio > 0.0 && cache_lower_ratio <= 1.0))
    throw std::invalid_argument("TubeConfig: cache_lower_ratio must be in (0,1]");
  if (!(terminal_margin >= 0.0 && terminal_margin < 1.0))
    throw std::invalid_argument("TubeConfig: terminal_margin must be in [0,1)");
  if (!(qp_tol > 0.0) || qp_max_iter < 1) throw std::invalid_argument("TubeConfig: QP settings");
}

TubeController::TubeController(const dqplant::DiscreteModel& model, const TubeConfig& cfg)
    : model_(model), cfg_(cfg) {
  cfg_.validate();
  if (!dqplant::is_controllable(model_)) throw std::invalid_argument("TubeController: (A, B) not controllable");
  const LqrResult lqr = lqr_gain(model_.a, model_.b, cfg_.q_anc, cfg_.r_anc);
  k_ = lqr.k;
  a_k_ = model_.a + model_.b * k_;
  if (!is_schur(a_k_)) throw std::runtime_error("TubeController: A + B K is not Schur");
  weights_.q = cfg_.q;
  weights_.r = cfg_.r;
  weights_.p = terminal_p_from_lyapunov(a_k_, cfg_.q, cfg_.r, k_);
  p_residual_ = lyapunov_residual(weights_.p, a_k_, cfg_.q, cfg_.r, k_);
  if (p_residual_ > 1e-8) throw std::runtime_error("TubeController: Lyapunov residual too large");

  terminal_base_normals_.resize(12, 4);
  terminal_base_normals_ << Eigen::Matrix4d::Identity(), -Eigen::Matrix4d::Identity(), k_, -k_;
  s_hat_ = Zonotope::point(Eigen::Vector4d::Zero());
  last_s_ = s_hat_;
  tighten();
}

void TubeController::tighten() {
  const HPolytope x_poly = convexsets::to_hpolytope(cfg_.x_box);
  const HPolytope u_poly = convexsets::to_hpolytope(cfg_.u_box);
  try {
    sets_.x_hat = convexsets::pontryagin_diff(x_poly, s_hat_);
    sets_.u_hat = convexsets::pontryagin_diff(u_poly, convexsets::linear_map(k_, s_hat_));
  } catch (const convexsets::EmptySetError& e) {
    throw InfeasibleSetsError(std::string("tube larger than constraints: ") + e.what());
  }
  terminal_valid_ = false;
}

bool TubeController::update_tube(const Eigen::Vector4d& half_widths) {
  if (!cfg_.robust) return false;
  if (cached_hw_(0) >= 0.0 && (half_widths.array() <= cached_hw_.array()).all() &&
      (half_widths.array() * (1.0 + cfg_.cache_inflation) >= cfg_.cache_lower_ratio * cached_hw_.array()).all())
    return false;
  set_disturbance(half_widths);
  return true;
}

void TubeController::set_disturbance(const Eigen::Vector4d& half_widths) {
  if ((half_widths.array() < 0.0).any()) throw std::invalid_argument("set_disturbance: negative half width");
  if (!cfg_.robust) return;
  cached_hw_ = (1.0 + cfg_.cache_inflation) * half_widths;
  if (cached_hw_.maxCoeff() == 0.0) {
    s_hat_ = Zonotope::point(Eigen::Vector4d::Zero());
  } else {
    const Zonotope w = convexsets::to_zonotope(Box::symmetric(cached_hw_));
    const double eps = cfg_.mrpi_eps * cached_hw_.maxCoeff();
    s_hat_ = drop_zero_generators(convexsets::mrpi_outer(a_k_, w, eps, 5000, cfg_.generator_cap));
  }
  tighten();
}

bool TubeController::update_terminal(const Eigen::Vector4d& r_target, const Eigen::Vector2d& u_r) {
  Eigen::VectorXd b(12);
  b.head(8) = sets_.x_hat.offsets - sets_.x_hat.normals * r_target;
  b.tail(4) = sets_.u_hat.offsets - sets_.u_hat.normals * u_r;
  if (terminal_valid_ && (b.array() >= terminal_offsets_cached_.array()).all()) return false;
  set_terminal(r_target, u_r);
  return true;
}

void TubeController::set_terminal(const Eigen::Vector4d& r_target, const Eigen::Vector2d& u_r) {
  Eigen::VectorXd b(12);
  b.head(8) = sets_.x_hat.offsets - sets_.x_hat.normals * r_target;
  b.tail(4) = sets_.u_hat.offsets - sets_.u_hat.normals * u_r;
  if ((b.array() <= 0.0).any())
    throw InfeasibleSetsError("reference or steady-state input outside the tightened constraints");
  const Eigen::VectorXd shrunk = (1.0 - cfg_.terminal_margin) * b;
  sets_.x_f_hat = convexsets::max_positive_invariant(a_k_, HPolytope(terminal_base_normals_, shrunk));
  terminal_offsets_cached_ = shrunk;
  terminal_valid_ = true;
}

NominalTrajectory TubeController::shifted_candidate(const Eigen::Vector4d& r_target) const {
  if (!last_) throw std::logic_error("shifted_candidate: no stored solution");
  const int n = cfg_.horizon;
  const Eigen::Vector2d u_r = steady_state_input(model_, r_target, last_c_).u_r;
  NominalTrajectory out;
  out.x.resize(n + 1);
  out.u.resize(n);
  out.x[0] = last_->x[1];
  for (int k = 0; k + 1 < n; ++k) out.u[k] = last_->u[k + 1];
  for (int k = 0; k < n; ++k) {
    if (k == n - 1) out.u[k] = k_ * (out.x[k] - r_target) + u_r;
    out.x[k + 1] = model_.a * out.x[k] + model_.b * out.u[k] + last_c_;
  }
  return out;
}

bool TubeController::trajectory_feasible(const NominalTrajectory& tr, const Eigen::Vector4d& r_target,
                                         const std::optional<Eigen::Vector4d>& x_measured, double tol) const {
  const int n = cfg_.horizon;
  if (static_cast<int>(tr.x.size()) != n + 1 || static_cast<int>(tr.u.size()) != n)
    throw std::invalid_argument("trajectory_feasible: wrong trajectory length");
  for (int k = 0; k < n; ++k) {
    if (!convexsets::contains(sets_.x_hat, Eigen::VectorXd(tr.x[k]), tol)) return false;
    if (!convexsets::contains(sets_.u_hat, Eigen::VectorXd(tr.u[k]), tol)) return false;
  }
  if (!convexsets::contains(sets_.x_f_hat, Eigen::VectorXd(tr.x[n] - r_target), tol)) return false;
  if (x_measured && !convexsets::contains(translate(s_hat_, tr.x[0]), Eigen::VectorXd(*x_measured), tol))
    return false;
  return true;
}

Eigen::Vector4d TubeController::terminal_linear(const Eigen::Vector2d& u_r) const {
  const Eigen::Matrix4d m = Eigen::Matrix4d::Identity() - a_k_.transpose();
  return m.partialPivLu().solve(k_.transpose() * (weights_.r * u_r));
}

StepResult TubeController::step(const Eigen::Vector4d& x_measured, const Zonotope& w_hat,
                                 const Eigen::Vector4d& r_target) {
  if (w_hat.dim() != 4) throw std::invalid_argument("TubeController::step: disturbance set must be 4-D");
  if (!x_measured.allFinite() || !r_target.allFinite())
    throw std::invalid_argument("TubeController::step: non-finite input");
  StepResult res;
  StepMonitor& mon = res.monitor;
  const Eigen::Vector4d c = w_hat.center;
  const Eigen::Vector4d hw = w_hat.generators.cwiseAbs().rowwise().sum();
  const SteadyStateInput ss = steady_state_input(model_, r_target, c);
  res.u_r = ss.u_r;
  const Eigen::Vector4d lin = terminal_linear(ss.u_r);
  try {
    mon.tube_recomputed = update_tube(hw);
    mon.terminal_recomputed = update_terminal(r_target, ss.u_r);
  } catch (const InfeasibleSetsError&) {
    cached_hw_ = Eigen::Vector4d::Constant(-1.0);
    terminal_valid_ = false;
    throw;
  }
  res.tube_half_widths = s_hat_.generators.cwiseAbs().rowwise().sum();

  const bool same_problem = last_ && last_optimal_ && r_target == last_r_ && c == last_c_;
  if (last_ && cfg_.robust) {
    mon.propagation_checked = true;
    mon.propagation_ok = convexsets::contains(translate(last_s_, last_->x[1]), Eigen::VectorXd(x_measured), 1e-7);
  }
  if (same_problem) {
    mon.candidate_checked = true;
    mon.candidate_feasible = trajectory_feasible(shifted_candidate(r_target), r_target, x_measured, 1e-6);
  }

  const auto mpc = qpsolver::build_condensed_mpc(model_, weights_.q, weights_.r, weights_.p, cfg_.horizon, sets_,
                                                 r_target, s_hat_, x_measured, c, cfg_.xi_regularization,
                                                 lin);
  const auto sol = qpsolver::solve(mpc.qp, cfg_.qp_tol, cfg_.qp_max_iter);
  mon.qp_status = sol.status;
  mon.qp_iterations = sol.iterations;
  mon.kkt_residual = sol.kkt_residual;
  const int n = cfg_.horizon;
  const bool optimal = sol.status == qpsolver::QpStatus::optimal;

  NominalTrajectory tr;
  if (optimal) {
    tr.x.resize(n + 1);
    tr.u.resize(n);
    tr.x[0] = sol.x_opt.head<4>();
    for (int k = 0; k < n; ++k) {
      tr.u[k] = sol.x_opt.segment<2>(mpc.layout.u_offset() + 2 * k);
      tr.x[k + 1] = model_.a * tr.x[k] + model_.b * tr.u[k] + c;
    }
  } else {
    mon.fallback_used = true;
    if (last_) {
      tr = shifted_candidate(r_target);
    } else {
      tr.x.assign(n + 1, r_target);
      tr.u.assign(n, ss.u_r);
    }
  }

  const Eigen::Vector4d e0 = tr.x[0] - r_target;
  res.x_nominal = tr.x[0];
  res.u_nominal = tr.u[0];
  Eigen::Vector2d u = tr.u[0] + k_ * (x_measured - tr.x[0]);
  res.u_applied = u.cwiseMax(cfg_.u_box.lower).cwiseMin(cfg_.u_box.upper);

  Eigen::VectorXd u_stack(2 * n);
  for (int k = 0; k < n; ++k) u_stack.segment<2>(2 * k) = tr.u[k];
  const double v = qpsolver::rollout_cost(model_, weights_.q, weights_.r, weights_.p, r_target, tr.x[0], u_stack, c, lin);
  mon.lyapunov_value = v;
  const double ur_cost = ss.u_r.dot(weights_.r * ss.u_r);
  mon.in_region_of_attraction = e0.dot(weights_.q * e0) <= ur_cost;
  if (same_problem && optimal) {
    mon.lyapunov_checked = true;
    const double bound = last_ur_cost_ - last_stage_;
    mon.lyapunov_margin = bound - (v - last_v_);
    mon.lyapunov_decrease_ok = mon.lyapunov_margin >= -cfg_.lyapunov_tol * std::max(1.0, std::abs(last_v_));
  }
  mon.tube_contains_state = !cfg_.robust ? (x_measured - tr.x[0]).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + x_measured.cwiseAbs().maxCoeff())
                                         : convexsets::contains(translate(s_hat_, tr.x[0]), Eigen::VectorXd(x_measured), 1e-7);

  last_ = tr;
  last_r_ = r_target;
  last_c_ = c;
  last_s_ = s_hat_;
  last_v_ = v;
  last_stage_ = e0.dot(weights_.q * e0) + tr.u[0].dot(weights_.r * tr.u[0]);
  last_ur_cost_ = ur_cost;
  last_optimal_ = optimal;
  return res;
}

}  // namespace lrmpc::tubempc
