#include "lrmpc/linprog.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace lrmpc::linprog {

namespace {

struct Tableau {
  Eigen::MatrixXd t;       // rows: constraints then the reduced-cost row; last column: rhs
  std::vector<int> basis;  // basic column per constraint row
  int rows() const { return static_cast<int>(basis.size()); }
  int cols() const { return static_cast<int>(t.cols()) - 1; }
};

void pivot(Tableau& tb, int p, int q) {
  tb.t.row(p) /= tb.t(p, q);
  for (int i = 0; i < tb.t.rows(); ++i) {
    if (i == p) continue;
    const double f = tb.t(i, q);
    if (f != 0.0) tb.t.row(i) -= f * tb.t.row(p);
  }
  tb.basis[p] = q;
}

void set_costs(Tableau& tb, const Eigen::VectorXd& cost) {
  const int m = tb.rows();
  const int n = tb.cols();
  for (int j = 0; j < n; ++j) tb.t(m, j) = cost(j);
  tb.t(m, n) = 0.0;
  for (int i = 0; i < m; ++i) {
    const double cb = cost(tb.basis[i]);
    if (cb != 0.0) tb.t.row(m) -= cb * tb.t.row(i);
  }
}

enum class RunStatus { optimal, unbounded };

RunStatus run_simplex(Tableau& tb, int allowed_cols, double tol) {
  const int m = tb.rows();
  const int rhs = tb.cols();
  const int max_pivots = 50 * (rhs + m) + 1000;
  for (int it = 0; it < max_pivots; ++it) {
    int q = -1;
    for (int j = 0; j < allowed_cols; ++j) {
      if (tb.t(m, j) < -tol) {
        q = j;
        break;
      }
    }
    if (q < 0) return RunStatus::optimal;
    int p = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
      const double a = tb.t(i, q);
      if (a > tol) {
        const double ratio = tb.t(i, rhs) / a;
        if (ratio < best - 1e-14 ||
            (std::abs(ratio - best) <= 1e-14 && p >= 0 && tb.basis[i] < tb.basis[p])) {
          best = ratio;
          p = i;
        }
      }
    }
    if (p < 0) return RunStatus::unbounded;
    pivot(tb, p, q);
  }
  throw std::runtime_error("linprog: pivot limit reached");
}

}  // namespace

LpResult maximize(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c) {
  const int m = static_cast<int>(a.rows());
  const int n = static_cast<int>(a.cols());
  if (b.size() != m || c.size() != n) throw std::invalid_argument("linprog: dimension mismatch");
  LpResult res;
  res.x = Eigen::VectorXd::Zero(n);
  if (m == 0) {
    res.status = c.isZero(0.0) ? LpStatus::optimal : LpStatus::unbounded;
    res.value = c.isZero(0.0) ? 0.0 : std::numeric_limits<double>::infinity();
    return res;
  }
  const double scale = std::max({1.0, a.cwiseAbs().maxCoeff(), c.cwiseAbs().maxCoeff()});
  const double tol = 1e-11 * scale;

  Tableau tb;
  tb.t = Eigen::MatrixXd::Zero(n + 1, m + n + 1);
  tb.basis.resize(n);
  std::vector<double> sign(n, 1.0);
  for (int i = 0; i < n; ++i) {
    sign[i] = c(i) < 0.0 ? -1.0 : 1.0;
    tb.t.row(i).head(m) = sign[i] * a.col(i).transpose();
    tb.t(i, m + i) = 1.0;
    tb.t(i, m + n) = sign[i] * c(i);
    tb.basis[i] = m + i;
  }

  Eigen::VectorXd cost1 = Eigen::VectorXd::Zero(m + n);
  cost1.tail(n).setOnes();
  set_costs(tb, cost1);
  run_simplex(tb, m + n, tol);
  const double phase1 = -tb.t(n, m + n);
  if (phase1 > 1e-9 * std::max(1.0, c.cwiseAbs().sum())) {
    // The dual has no feasible point, so the primal is unbounded or empty.
    res.status = LpStatus::unbounded;
    res.value = std::numeric_limits<double>::infinity();
    return res;
  }
  for (int i = 0; i < n; ++i) {
    if (tb.basis[i] < m) continue;
    for (int j = 0; j < m; ++j) {
      if (std::abs(tb.t(i, j)) > tol) {
        pivot(tb, i, j);
        break;
      }
    }
  }

  Eigen::VectorXd cost2 = Eigen::VectorXd::Zero(m + n);
  cost2.head(m) = b;
  set_costs(tb, cost2);
  if (run_simplex(tb, m, tol) == RunStatus::unbounded) {
    res.status = LpStatus::infeasible;
    res.value = -std::numeric_limits<double>::infinity();
    return res;
  }
  res.status = LpStatus::optimal;
  res.value = -tb.t(n, m + n);
  for (int i = 0; i < n; ++i) res.x(i) = -sign[i] * tb.t(n, m + i);
  return res;
}

}  // namespace lrmpc::linprog
