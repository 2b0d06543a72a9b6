#include "lrmpc/qpsolver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace lrmpc::qpsolver {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// State of the Goldfarb-Idnani iteration. Constraints are stored as columns n_i
// with n_i'x >= b_i (inequalities) or n_i'x = b_i (equalities).
class DualActiveSet {
 public:
  DualActiveSet(const Eigen::MatrixXd& g, const Eigen::VectorXd& g0, const Eigen::MatrixXd& ce,
                const Eigen::VectorXd& be, const Eigen::MatrixXd& ci, const Eigen::VectorXd& bi)
      : n_(static_cast<int>(g.rows())),
        p_(static_cast<int>(ce.cols())),
        m_(static_cast<int>(ci.cols())),
        ce_(ce),
        be_(be),
        ci_(ci),
        bi_(bi),
        g0_(g0),
        llt_(g) {
    if (llt_.info() != Eigen::Success) throw std::invalid_argument("qp: Hessian is not positive definite");
    const Eigen::MatrixXd l = llt_.matrixL();
    // J = L^{-T}, so that J J' = G^{-1}.
    j0_ = l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n_, n_)).transpose();
  }

  QpStatus run(int max_iter, int& iterations) {
    iterations = 0;
    std::vector<char> excluded(m_, 0);
  restart:
    j_ = j0_;
    r_ = Eigen::MatrixXd::Zero(n_, n_);
    x_ = llt_.solve(-g0_);
    u_ = Eigen::VectorXd::Zero(n_ + 1);
    active_.assign(n_ + 1, 0);
    iq_ = 0;
    r_norm_ = 1.0;
    for (int i = 0; i < p_; ++i) {
      Eigen::VectorXd np = ce_.col(i);
      compute_d(np);
      update_z();
      update_r();
      double t2 = 0.0;
      const double zn = z_.dot(np);
      if (z_.squaredNorm() > kEps) t2 = (be_(i) - np.dot(x_)) / zn;
      x_ += t2 * z_;
      u_(iq_) = t2;
      for (int k = 0; k < iq_; ++k) u_(k) -= t2 * r_vec_(k);
      active_[iq_] = -i - 1;
      if (!add_constraint()) return QpStatus::infeasible;  // dependent equalities
    }

    std::vector<char> in_active(m_, 0);
    Eigen::VectorXd s(m_);
    const double x_scale = 1.0 + x_.cwiseAbs().maxCoeff();
    feas_tol_ = Eigen::VectorXd(m_);
    for (int i = 0; i < m_; ++i)
      feas_tol_(i) = 1e-13 * (1.0 + std::abs(bi_(i)) + ci_.col(i).cwiseAbs().sum() * x_scale);

    while (true) {
      if (++iterations > max_iter) return QpStatus::iteration_limit;
      std::fill(in_active.begin(), in_active.end(), 0);
      for (int i = p_; i < iq_; ++i) in_active[active_[i]] = 1;
      for (int i = 0; i < m_; ++i) s(i) = ci_.col(i).dot(x_) - bi_(i);

      int ip = -1;
      double ss = 0.0;
      for (int i = 0; i < m_; ++i) {
        if (s(i) < ss && s(i) < -feas_tol_(i) && !in_active[i] && !excluded[i]) {
          ss = s(i);
          ip = i;
        }
      }
      if (ip < 0) return QpStatus::optimal;
      Eigen::VectorXd np = ci_.col(ip);
      u_(iq_) = 0.0;
      active_[iq_] = ip;

      while (true) {
        if (++iterations > max_iter) return QpStatus::iteration_limit;
        compute_d(np);
        update_z();
        update_r();
        int l = -1;
        double t1 = kInf;
        for (int k = p_; k < iq_; ++k) {
          if (r_vec_(k) > 0.0) {
            const double ratio = u_(k) / r_vec_(k);
            if (ratio < t1) {
              t1 = ratio;
              l = active_[k];
            }
          }
        }
        double t2 = kInf;
        if (z_.squaredNorm() > kEps) t2 = -s(ip) / z_.dot(np);
        const double t = std::min(t1, t2);
        if (!(t < kInf)) return QpStatus::infeasible;
        if (!(t2 < kInf)) {
          for (int k = 0; k < iq_; ++k) u_(k) -= t * r_vec_(k);
          u_(iq_) += t;
          in_active[l] = 0;
          delete_constraint(l);
          continue;
        }
        x_ += t * z_;
        for (int k = 0; k < iq_; ++k) u_(k) -= t * r_vec_(k);
        u_(iq_) += t;
        if (t == t2) {
          if (!add_constraint()) {
            // Linearly dependent on the active set: drop it and start over.
            excluded[ip] = 1;
            goto restart;
          }
          in_active[ip] = 1;
          break;
        }
        in_active[l] = 0;
        delete_constraint(l);
        s(ip) = ci_.col(ip).dot(x_) - bi_(ip);
      }
    }
  }

  const Eigen::VectorXd& x() const { return x_; }

  // Multipliers such that G x + g0 = sum_i u_i n_i over the active set.
  void multipliers(Eigen::VectorXd& u_eq, Eigen::VectorXd& u_in) const {
    u_eq = Eigen::VectorXd::Zero(p_);
    u_in = Eigen::VectorXd::Zero(m_);
    for (int i = 0; i < iq_; ++i) {
      const int a = active_[i];
      if (a < 0)
        u_eq(-a - 1) = u_(i);
      else
        u_in(a) = u_(i);
    }
  }

 private:
  static constexpr double kEps = std::numeric_limits<double>::epsilon();

  void compute_d(const Eigen::VectorXd& np) { d_ = j_.transpose() * np; }

  void update_z() { z_ = j_.rightCols(n_ - iq_) * d_.tail(n_ - iq_); }

  void update_r() {
    r_vec_ = Eigen::VectorXd::Zero(n_ + 1);
    for (int i = iq_ - 1; i >= 0; --i) {
      double sum = d_(i);
      for (int k = i + 1; k < iq_; ++k) sum -= r_(i, k) * r_vec_(k);
      r_vec_(i) = sum / r_(i, i);
    }
  }

  bool add_constraint() {
    for (int j = n_ - 1; j >= iq_ + 1; --j) {
      double cc = d_(j - 1);
      double ss = d_(j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d_(j) = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d_(j - 1) = -h;
      } else {
        d_(j - 1) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < n_; ++k) {
        const double t1 = j_(k, j - 1);
        const double t2 = j_(k, j);
        j_(k, j - 1) = t1 * cc + t2 * ss;
        j_(k, j) = xny * (t1 + j_(k, j - 1)) - t2;
      }
    }
    ++iq_;
    for (int i = 0; i < iq_; ++i) r_(i, iq_ - 1) = d_(i);
    if (std::abs(d_(iq_ - 1)) <= kEps * r_norm_) return false;
    r_norm_ = std::max(r_norm_, std::abs(d_(iq_ - 1)));
    return true;
  }

  void delete_constraint(int l) {
    int qq = -1;
    for (int i = p_; i < iq_; ++i) {
      if (active_[i] == l) {
        qq = i;
        break;
      }
    }
    if (qq < 0) return;
    for (int i = qq; i < iq_ - 1; ++i) {
      active_[i] = active_[i + 1];
      u_(i) = u_(i + 1);
      r_.col(i) = r_.col(i + 1);
    }
    active_[iq_ - 1] = active_[iq_];
    u_(iq_ - 1) = u_(iq_);
    active_[iq_] = 0;
    u_(iq_) = 0.0;
    for (int j = 0; j < iq_; ++j) r_(j, iq_ - 1) = 0.0;
    --iq_;
    if (iq_ == 0) return;
    for (int j = qq; j < iq_; ++j) {
      double cc = r_(j, j);
      double ss = r_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      r_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        r_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        r_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq_; ++k) {
        const double t1 = r_(j, k);
        const double t2 = r_(j + 1, k);
        r_(j, k) = t1 * cc + t2 * ss;
        r_(j + 1, k) = xny * (t1 + r_(j, k)) - t2;
      }
      for (int k = 0; k < n_; ++k) {
        const double t1 = j_(k, j);
        const double t2 = j_(k, j + 1);
        j_(k, j) = t1 * cc + t2 * ss;
        j_(k, j + 1) = xny * (j_(k, j) + t1) - t2;
      }
    }
  }

  int n_, p_, m_;
  const Eigen::MatrixXd& ce_;
  const Eigen::VectorXd& be_;
  const Eigen::MatrixXd& ci_;
  const Eigen::VectorXd& bi_;
  Eigen::VectorXd g0_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd j0_;
  Eigen::MatrixXd j_;
  Eigen::MatrixXd r_;
  Eigen::VectorXd x_, u_, d_, z_, r_vec_, feas_tol_;
  std::vector<int> active_;
  int iq_ = 0;
  double r_norm_ = 1.0;
};

}  // namespace

void Qp::validate() const {
  const auto n = grad.size();
  if (hess.rows() != n || hess.cols() != n) throw std::invalid_argument("qp: Hessian dimension mismatch");
  if (ineq_a.rows() != ineq_b.size() || (ineq_a.rows() > 0 && ineq_a.cols() != n))
    throw std::invalid_argument("qp: inequality dimension mismatch");
  if (eq_a.rows() != eq_b.size() || (eq_a.rows() > 0 && eq_a.cols() != n))
    throw std::invalid_argument("qp: equality dimension mismatch");
  if (!hess.allFinite() || !grad.allFinite()) throw std::invalid_argument("qp: non-finite objective");
  const double asym = (hess - hess.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * std::max(1.0, hess.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("qp: Hessian is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(hess);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("qp: Hessian is not positive definite");
}

const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::iteration_limit: return "iteration_limit";
  }
  return "unknown";
}

double KktResidual::max() const { return std::max({stationarity, primal, dual, complementarity}); }

KktResidual kkt_residual(const Qp& qp, const Eigen::VectorXd& x, const Eigen::VectorXd& lam_ineq,
                         const Eigen::VectorXd& lam_eq) {
  KktResidual res;
  const Eigen::VectorXd hx = qp.hess * x;
  Eigen::VectorXd at_in = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd at_eq = Eigen::VectorXd::Zero(x.size());
  if (qp.ineq_a.rows() > 0) at_in = qp.ineq_a.transpose() * lam_ineq;
  if (qp.eq_a.rows() > 0) at_eq = qp.eq_a.transpose() * lam_eq;
  const Eigen::VectorXd grad_l = hx + qp.grad + at_in + at_eq;
  const double scale_s =
      1.0 + std::max({inf_norm(hx), inf_norm(qp.grad), inf_norm(at_in), inf_norm(at_eq)});
  res.stationarity = inf_norm(grad_l) / scale_s;
  for (int i = 0; i < qp.ineq_a.rows(); ++i) {
    const double ax = qp.ineq_a.row(i).dot(x);
    const double row_scale = 1.0 + std::max(std::abs(ax), std::abs(qp.ineq_b(i)));
    const double slack = qp.ineq_b(i) - ax;
    res.primal = std::max(res.primal, std::max(0.0, -slack) / row_scale);
    res.dual = std::max(res.dual, std::max(0.0, -lam_ineq(i)));
    res.complementarity =
        std::max(res.complementarity, std::abs(lam_ineq(i) * slack) / (row_scale * (1.0 + std::abs(lam_ineq(i)))));
  }
  for (int i = 0; i < qp.eq_a.rows(); ++i) {
    const double ax = qp.eq_a.row(i).dot(x);
    const double row_scale = 1.0 + std::max(std::abs(ax), std::abs(qp.eq_b(i)));
    res.primal = std::max(res.primal, std::abs(ax - qp.eq_b(i)) / row_scale);
  }
  return res;
}

QpSolution solve(const Qp& qp, double tol, int max_iter) {
  qp.validate();
  const int n = qp.num_vars();
  // n_i'x >= b_i form: -A_in x >= -b_in.
  const Eigen::MatrixXd ce = qp.eq_a.rows() > 0 ? Eigen::MatrixXd(qp.eq_a.transpose()) : Eigen::MatrixXd(n, 0);
  const Eigen::VectorXd be = qp.eq_b;
  const Eigen::MatrixXd ci =
      qp.ineq_a.rows() > 0 ? Eigen::MatrixXd(-qp.ineq_a.transpose()) : Eigen::MatrixXd(n, 0);
  const Eigen::VectorXd bi = -qp.ineq_b;

  DualActiveSet solver(qp.hess, qp.grad, ce, be, ci, bi);
  QpSolution sol;
  sol.status = solver.run(max_iter, sol.iterations);
  sol.x_opt = solver.x();
  Eigen::VectorXd u_eq, u_in;
  solver.multipliers(u_eq, u_in);
  sol.ineq_multipliers = u_in;
  sol.eq_multipliers = -u_eq;
  sol.objective = 0.5 * sol.x_opt.dot(qp.hess * sol.x_opt) + qp.grad.dot(sol.x_opt);
  sol.kkt_residual = kkt_residual(qp, sol.x_opt, sol.ineq_multipliers, sol.eq_multipliers).max();
  if (sol.status == QpStatus::optimal && sol.kkt_residual > tol) {
    // One Newton refinement on the final active set usually recovers the last digits.
    std::vector<int> act;
    for (int i = 0; i < u_in.size(); ++i)
      if (u_in(i) > 0.0) act.push_back(i);
    const int p = static_cast<int>(qp.eq_a.rows());
    const int k = p + static_cast<int>(act.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
    Eigen::VectorXd rhs(n + k);
    kkt.topLeftCorner(n, n) = qp.hess;
    rhs.head(n) = -qp.grad;
    for (int i = 0; i < p; ++i) {
      kkt.block(n + i, 0, 1, n) = qp.eq_a.row(i);
      kkt.block(0, n + i, n, 1) = qp.eq_a.row(i).transpose();
      rhs(n + i) = qp.eq_b(i);
    }
    for (size_t a = 0; a < act.size(); ++a) {
      const int row = n + p + static_cast<int>(a);
      kkt.block(row, 0, 1, n) = qp.ineq_a.row(act[a]);
      kkt.block(0, row, n, 1) = qp.ineq_a.row(act[a]).transpose();
      rhs(row) = qp.ineq_b(act[a]);
    }
    const Eigen::VectorXd sol_kkt = kkt.fullPivLu().solve(rhs);
    if (sol_kkt.allFinite()) {
      Eigen::VectorXd x_ref = sol_kkt.head(n);
      Eigen::VectorXd lam_in = Eigen::VectorXd::Zero(u_in.size());
      Eigen::VectorXd lam_eq = sol_kkt.segment(n, p);
      for (size_t a = 0; a < act.size(); ++a) lam_in(act[a]) = sol_kkt(n + p + static_cast<int>(a));
      const double res = kkt_residual(qp, x_ref, lam_in, lam_eq).max();
      if (res < sol.kkt_residual) {
        sol.x_opt = x_ref;
        sol.ineq_multipliers = lam_in;
        sol.eq_multipliers = lam_eq;
        sol.kkt_residual = res;
        sol.objective = 0.5 * x_ref.dot(qp.hess * x_ref) + qp.grad.dot(x_ref);
      }
    }
  }
  return sol;
}

CondensedMpc build_condensed_mpc(const dqplant::DiscreteModel& model, const Eigen::Matrix4d& q,
                                 const Eigen::Matrix2d& r, const Eigen::Matrix4d& p, int horizon,
                                 const MpcSets& sets, const Eigen::Vector4d& r_target,
                                 const convexsets::Zonotope& x_init_set,
                                 const Eigen::Vector4d& x_measured,
                                 const Eigen::Vector4d& affine_drift, double xi_regularization,
                                 const Eigen::Vector4d& terminal_linear) {
  if (horizon < 1) throw std::invalid_argument("build_condensed_mpc: horizon must be >= 1");
  if (x_init_set.dim() != 4) throw std::invalid_argument("build_condensed_mpc: initial set must be 4-D");
  if (sets.x_hat.dim() != 4 || sets.u_hat.dim() != 2 || sets.x_f_hat.dim() != 4)
    throw std::invalid_argument("build_condensed_mpc: constraint set dimension mismatch");
  const int n_steps = horizon;
  const int g = x_init_set.num_generators();
  CondensedMpc out;
  out.layout.horizon = n_steps;
  out.layout.num_generators = g;
  const int nz = out.layout.size();
  const int uo = out.layout.u_offset();
  const int xo = out.layout.xi_offset();

  // Prediction matrices over z.
  out.phi.resize(n_steps + 1);
  out.gamma.resize(n_steps + 1);
  out.affine.resize(n_steps + 1);
  std::vector<Eigen::MatrixXd> big(n_steps + 1, Eigen::MatrixXd::Zero(4, nz));
  out.phi[0] = Eigen::Matrix4d::Identity();
  out.gamma[0] = Eigen::MatrixXd::Zero(4, 2 * n_steps);
  out.affine[0] = Eigen::Vector4d::Zero();
  for (int k = 0; k < n_steps; ++k) {
    out.phi[k + 1] = model.a * out.phi[k];
    out.gamma[k + 1] = model.a * out.gamma[k];
    out.gamma[k + 1].block(0, 2 * k, 4, 2) += model.b;
    out.affine[k + 1] = model.a * out.affine[k] + affine_drift;
  }
  for (int k = 0; k <= n_steps; ++k) {
    big[k].block(0, 0, 4, 4) = out.phi[k];
    big[k].block(0, uo, 4, 2 * n_steps) = out.gamma[k];
  }

  Qp& qp = out.qp;
  qp.hess = Eigen::MatrixXd::Zero(nz, nz);
  qp.grad = Eigen::VectorXd::Zero(nz);
  out.constant = 0.0;
  for (int k = 0; k <= n_steps; ++k) {
    const Eigen::Matrix4d& w = (k < n_steps) ? q : p;
    const Eigen::Vector4d off = out.affine[k] - r_target;
    qp.hess += 2.0 * big[k].transpose() * w * big[k];
    qp.grad += 2.0 * big[k].transpose() * w * off;
    out.constant += off.dot(w * off);
  }
  qp.grad += 2.0 * big[n_steps].transpose() * terminal_linear;
  out.constant += 2.0 * terminal_linear.dot(out.affine[n_steps] - r_target);
  for (int k = 0; k < n_steps; ++k) qp.hess.block(uo + 2 * k, uo + 2 * k, 2, 2) += 2.0 * r;
  for (int i = 0; i < g; ++i) qp.hess(xo + i, xo + i) += 2.0 * xi_regularization;
  qp.hess = 0.5 * (qp.hess + qp.hess.transpose());

  const int mx = sets.x_hat.num_rows();
  const int mu = sets.u_hat.num_rows();
  const int mf = sets.x_f_hat.num_rows();
  const int m = n_steps * (mx + mu) + mf + 2 * g;
  qp.ineq_a = Eigen::MatrixXd::Zero(m, nz);
  qp.ineq_b = Eigen::VectorXd::Zero(m);
  int row = 0;
  for (int k = 0; k < n_steps; ++k) {
    qp.ineq_a.middleRows(row, mx) = sets.x_hat.normals * big[k];
    qp.ineq_b.segment(row, mx) = sets.x_hat.offsets - sets.x_hat.normals * out.affine[k];
    row += mx;
  }
  for (int k = 0; k < n_steps; ++k) {
    qp.ineq_a.block(row, uo + 2 * k, mu, 2) = sets.u_hat.normals;
    qp.ineq_b.segment(row, mu) = sets.u_hat.offsets;
    row += mu;
  }
  qp.ineq_a.middleRows(row, mf) = sets.x_f_hat.normals * big[n_steps];
  qp.ineq_b.segment(row, mf) =
      sets.x_f_hat.offsets - sets.x_f_hat.normals * (out.affine[n_steps] - r_target);
  row += mf;
  for (int i = 0; i < g; ++i) {
    qp.ineq_a(row, xo + i) = 1.0;
    qp.ineq_b(row) = 1.0;
    ++row;
    qp.ineq_a(row, xo + i) = -1.0;
    qp.ineq_b(row) = 1.0;
    ++row;
  }

  // x_measured - x0 = c_S + G xi  <=>  x0 + G xi = x_measured - c_S.
  qp.eq_a = Eigen::MatrixXd::Zero(4, nz);
  qp.eq_a.block(0, 0, 4, 4) = Eigen::Matrix4d::Identity();
  if (g > 0) qp.eq_a.block(0, xo, 4, g) = x_init_set.generators;
  qp.eq_b = x_measured - x_init_set.center;
  return out;
}

double rollout_cost(const dqplant::DiscreteModel& model, const Eigen::Matrix4d& q,
                    const Eigen::Matrix2d& r, const Eigen::Matrix4d& p,
                    const Eigen::Vector4d& r_target, const Eigen::Vector4d& x0,
                    const Eigen::VectorXd& u_stack, const Eigen::Vector4d& affine_drift,
                    const Eigen::Vector4d& terminal_linear) {
  if (u_stack.size() % 2 != 0) throw std::invalid_argument("rollout_cost: odd input stack");
  const int n_steps = static_cast<int>(u_stack.size() / 2);
  Eigen::Vector4d x = x0;
  double cost = 0.0;
  for (int k = 0; k < n_steps; ++k) {
    const Eigen::Vector2d u = u_stack.segment<2>(2 * k);
    const Eigen::Vector4d e = x - r_target;
    cost += e.dot(q * e) + u.dot(r * u);
    x = model.a * x + model.b * u + affine_drift;
  }
  const Eigen::Vector4d e = x - r_target;
  return cost + e.dot(p * e) + 2.0 * terminal_linear.dot(e);
}

}  // namespace lrmpc::qpsolver
