#include "lrmpc/convexsets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lrmpc/linprog.hpp"
#include "lrmpc/qpsolver.hpp"

namespace lrmpc::convexsets {

namespace {

void require_dim(int a, int b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

bool contains_polytope_rows(const HPolytope& p, const Eigen::VectorXd& x, double tol) {
  for (int i = 0; i < p.num_rows(); ++i) {
    const double scale = 1.0 + std::abs(p.offsets(i));
    if (p.normals.row(i).dot(x) > p.offsets(i) + tol * scale) return false;
  }
  return true;
}

}  // namespace

Box::Box(Eigen::VectorXd lo, Eigen::VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
  require_dim(static_cast<int>(lower.size()), static_cast<int>(upper.size()), "Box");
  if ((lower.array() > upper.array()).any()) throw std::invalid_argument("Box: lower > upper");
}

Box Box::symmetric(const Eigen::VectorXd& half_widths) {
  if ((half_widths.array() < 0.0).any()) throw std::invalid_argument("Box: negative half width");
  return Box(-half_widths, half_widths);
}

Zonotope::Zonotope(Eigen::VectorXd c, Eigen::MatrixXd g) : center(std::move(c)), generators(std::move(g)) {
  if (generators.cols() > 0) require_dim(static_cast<int>(generators.rows()), dim(), "Zonotope");
  if (generators.cols() == 0) generators.resize(dim(), 0);
  if (!center.allFinite() || !generators.allFinite()) throw std::invalid_argument("Zonotope: non-finite entries");
}

Zonotope Zonotope::point(const Eigen::VectorXd& c) { return Zonotope(c, Eigen::MatrixXd(c.size(), 0)); }

HPolytope::HPolytope(Eigen::MatrixXd h, Eigen::VectorXd k) : normals(std::move(h)), offsets(std::move(k)) {
  require_dim(static_cast<int>(normals.rows()), static_cast<int>(offsets.size()), "HPolytope");
  for (int i = 0; i < normals.rows(); ++i)
    if (normals.row(i).isZero(0.0)) throw std::invalid_argument("HPolytope: zero normal row");
}

Ellipsoid::Ellipsoid(Eigen::VectorXd c, Eigen::MatrixXd s, double r2)
    : center(std::move(c)), shape(std::move(s)), radius2(r2) {
  require_dim(static_cast<int>(shape.rows()), dim(), "Ellipsoid");
  require_dim(static_cast<int>(shape.cols()), dim(), "Ellipsoid");
  if (!(radius2 >= 0.0)) throw std::invalid_argument("Ellipsoid: negative radius2");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (shape + shape.transpose()));
  if (dim() > 0 && es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, es.eigenvalues().maxCoeff()))
    throw std::invalid_argument("Ellipsoid: shape is not PSD");
}

Zonotope to_zonotope(const Box& b) {
  return Zonotope(b.center(), Eigen::MatrixXd(b.half_widths().asDiagonal()));
}

HPolytope to_hpolytope(const Box& b) {
  const int n = b.dim();
  Eigen::MatrixXd h(2 * n, n);
  h << Eigen::MatrixXd::Identity(n, n), -Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd k(2 * n);
  k << b.upper, -b.lower;
  return HPolytope(h, k);
}

Box interval_hull(const Zonotope& z) {
  const Eigen::VectorXd r = z.generators.cwiseAbs().rowwise().sum();
  return Box(z.center - r, z.center + r);
}

Box outer_box(const Ellipsoid& e) {
  const Eigen::VectorXd r = (e.radius2 * e.shape.diagonal().cwiseMax(0.0)).cwiseSqrt();
  return Box(e.center - r, e.center + r);
}

Zonotope minkowski_sum(const Zonotope& a, const Zonotope& b) {
  require_dim(a.dim(), b.dim(), "minkowski_sum");
  Eigen::MatrixXd g(a.dim(), a.num_generators() + b.num_generators());
  g << a.generators, b.generators;
  return Zonotope(a.center + b.center, g);
}

Zonotope minkowski_sum(const Box& a, const Box& b) { return minkowski_sum(to_zonotope(a), to_zonotope(b)); }
Zonotope minkowski_sum(const Zonotope& a, const Box& b) { return minkowski_sum(a, to_zonotope(b)); }
Zonotope minkowski_sum(const Box& a, const Zonotope& b) { return minkowski_sum(to_zonotope(a), b); }

Zonotope linear_map(const Eigen::MatrixXd& m, const Zonotope& z) {
  require_dim(static_cast<int>(m.cols()), z.dim(), "linear_map");
  return Zonotope(m * z.center, m * z.generators);
}

Zonotope scale(const Zonotope& z, double factor) { return Zonotope(factor * z.center, factor * z.generators); }

HPolytope pontryagin_diff(const HPolytope& p, const Zonotope& s) {
  require_dim(p.dim(), s.dim(), "pontryagin_diff");
  HPolytope out = p;
  for (int i = 0; i < p.num_rows(); ++i) out.offsets(i) -= support(s, p.normals.row(i).transpose());
  if (is_empty(out)) throw EmptySetError("pontryagin_diff: result is empty");
  return out;
}

Zonotope reduce_order(const Zonotope& z, int cap) {
  const int n = z.dim();
  const int g = z.num_generators();
  if (cap < n) throw std::invalid_argument("reduce_order: cap smaller than dimension");
  if (g <= cap) return z;
  // The smallest generators by Euclidean norm go into the box.
  std::vector<int> idx(g);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> score(g);
  for (int j = 0; j < g; ++j)
    score[j] = z.generators.col(j).norm();
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] < score[b]; });
  const int keep = cap - n;
  const int boxed = g - keep;
  Eigen::VectorXd box_r = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < boxed; ++j) box_r += z.generators.col(idx[j]).cwiseAbs();
  Eigen::MatrixXd out(n, cap);
  for (int j = 0; j < keep; ++j) out.col(j) = z.generators.col(idx[boxed + j]);
  out.rightCols(n) = box_r.asDiagonal();
  return Zonotope(z.center, out);
}

double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.rows() == 0) return 0.0;
  return Eigen::EigenSolver<Eigen::MatrixXd>(a, false).eigenvalues().cwiseAbs().maxCoeff();
}

MrpiResult mrpi_outer_detailed(const Eigen::MatrixXd& a_k, const Zonotope& w, double eps,
                               int max_terms, int generator_cap) {
  const int n = w.dim();
  require_dim(static_cast<int>(a_k.rows()), n, "mrpi_outer");
  require_dim(static_cast<int>(a_k.cols()), n, "mrpi_outer");
  if (!(eps > 0.0)) throw std::invalid_argument("mrpi_outer: eps must be > 0");
  if (!(spectral_radius(a_k) < 1.0)) throw std::invalid_argument("mrpi_outer: A_K is not Schur");

  // Disturbance about its center; the center contributes (I - A)^{-1} c exactly.
  const Eigen::VectorXd c_sum = (Eigen::MatrixXd::Identity(n, n) - a_k).lu().solve(w.center);
  const Eigen::MatrixXd gw = w.generators;

  MrpiResult res;
  // Nilpotent case: the finite sum is exact.
  {
    Eigen::MatrixXd pw = Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd acc(n, 0);
    for (int j = 0; j <= n; ++j) {
      if (gw.cols() == 0 || (pw * gw).cwiseAbs().maxCoeff() == 0.0) {
        Zonotope z(c_sum, acc);
        res.set = reduce_order(z, std::max(generator_cap, n));
        res.terms = j;
        res.alpha = 0.0;
        return res;
      }
      Eigen::MatrixXd next(n, acc.cols() + gw.cols());
      next << acc, pw * gw;
      acc = next;
      pw = a_k * pw;
    }
  }

  // Rakovic-style truncation on the interval hull of W.
  const Eigen::VectorXd hw = gw.cwiseAbs().rowwise().sum();
  const double floor_w = 1e-12 * std::max(1.0, hw.maxCoeff());
  const Eigen::VectorXd hw_safe = hw.cwiseMax(floor_w);
  const Eigen::MatrixXd box_g = hw_safe.asDiagonal();

  Eigen::MatrixXd pw = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd sum_support = Eigen::VectorXd::Zero(n);  // support of F_s along +-e_i
  std::vector<Eigen::MatrixXd> terms;
  for (int s = 1; s <= max_terms; ++s) {
    const Eigen::MatrixXd term = pw * box_g;
    terms.push_back(term);
    sum_support += term.cwiseAbs().rowwise().sum();
    pw = a_k * pw;
    const Eigen::VectorXd next_support = (pw * box_g).cwiseAbs().rowwise().sum();
    const double alpha = (next_support.array() / hw_safe.array()).maxCoeff();
    if (alpha < 1.0 && alpha / (1.0 - alpha) * sum_support.maxCoeff() <= eps) {
      Eigen::MatrixXd g(n, n * static_cast<int>(terms.size()));
      for (size_t j = 0; j < terms.size(); ++j) g.middleCols(static_cast<int>(j) * n, n) = terms[j];
      Zonotope f(Eigen::VectorXd::Zero(n), g / (1.0 - alpha));
      f = reduce_order(f, std::max(generator_cap, n));
      res.set = Zonotope(f.center + c_sum, f.generators);
      res.terms = s;
      res.alpha = alpha;
      return res;
    }
  }
  throw std::runtime_error("mrpi_outer: no convergence within max_terms");
}

Zonotope mrpi_outer(const Eigen::MatrixXd& a_k, const Zonotope& w, double eps, int max_terms,
                    int generator_cap) {
  return mrpi_outer_detailed(a_k, w, eps, max_terms, generator_cap).set;
}

HPolytope remove_redundant(const HPolytope& p, double tol) {
  const int m = p.num_rows();
  std::vector<char> keep(m, 1);
  for (int i = 0; i < m; ++i) {
    // Row i is redundant if maximizing its normal over the remaining rows stays
    // within its offset.
    std::vector<int> others;
    for (int j = 0; j < m; ++j)
      if (j != i && keep[j]) others.push_back(j);
    Eigen::MatrixXd a(others.size(), p.dim());
    Eigen::VectorXd b(others.size());
    for (size_t r = 0; r < others.size(); ++r) {
      a.row(static_cast<int>(r)) = p.normals.row(others[r]);
      b(static_cast<int>(r)) = p.offsets(others[r]);
    }
    const auto lp = linprog::maximize(a, b, p.normals.row(i).transpose());
    if (lp.status == linprog::LpStatus::optimal &&
        lp.value <= p.offsets(i) + tol * (1.0 + std::abs(p.offsets(i))))
      keep[i] = 0;
  }
  std::vector<int> rows;
  for (int i = 0; i < m; ++i)
    if (keep[i]) rows.push_back(i);
  Eigen::MatrixXd h(rows.size(), p.dim());
  Eigen::VectorXd k(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    h.row(static_cast<int>(r)) = p.normals.row(rows[r]);
    k(static_cast<int>(r)) = p.offsets(rows[r]);
  }
  return HPolytope(h, k);
}

HPolytope max_positive_invariant(const Eigen::MatrixXd& a_k, const HPolytope& x_constraint, int max_iter) {
  const int n = x_constraint.dim();
  require_dim(static_cast<int>(a_k.rows()), n, "max_positive_invariant");
  require_dim(static_cast<int>(a_k.cols()), n, "max_positive_invariant");
  if (!(spectral_radius(a_k) < 1.0)) throw std::invalid_argument("max_positive_invariant: A_K is not Schur");
  if (!contains_polytope_rows(x_constraint, Eigen::VectorXd::Zero(n), 0.0))
    throw std::invalid_argument("max_positive_invariant: constraint set must contain the origin");

  HPolytope omega = remove_redundant(x_constraint);
  const Eigen::MatrixXd h0 = omega.normals;
  const Eigen::VectorXd k0 = omega.offsets;
  Eigen::MatrixXd pw = a_k;
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::MatrixXd cand = h0 * pw;
    std::vector<int> added;
    for (int i = 0; i < cand.rows(); ++i) {
      if (cand.row(i).isZero(0.0)) {
        if (k0(i) < 0.0) throw EmptySetError("max_positive_invariant: empty set");
        continue;
      }
      const auto lp = linprog::maximize(omega.normals, omega.offsets, cand.row(i).transpose());
      if (lp.status == linprog::LpStatus::infeasible) throw EmptySetError("max_positive_invariant: empty set");
      if (lp.status == linprog::LpStatus::unbounded ||
          lp.value > k0(i) + 1e-10 * (1.0 + std::abs(k0(i))))
        added.push_back(i);
    }
    if (added.empty()) return omega;
    const int m_old = omega.num_rows();
    Eigen::MatrixXd h(m_old + static_cast<int>(added.size()), n);
    Eigen::VectorXd k(h.rows());
    h.topRows(m_old) = omega.normals;
    k.head(m_old) = omega.offsets;
    for (size_t r = 0; r < added.size(); ++r) {
      h.row(m_old + static_cast<int>(r)) = cand.row(added[r]);
      k(m_old + static_cast<int>(r)) = k0(added[r]);
    }
    omega = HPolytope(h, k);
    pw = a_k * pw;
  }
  throw std::runtime_error("max_positive_invariant: no convergence after " + std::to_string(max_iter) +
                           " iterations");
}

double support(const Box& b, const Eigen::VectorXd& d) {
  require_dim(b.dim(), static_cast<int>(d.size()), "support");
  return b.center().dot(d) + b.half_widths().dot(d.cwiseAbs());
}

double support(const Zonotope& z, const Eigen::VectorXd& d) {
  require_dim(z.dim(), static_cast<int>(d.size()), "support");
  return z.center.dot(d) + (z.generators.transpose() * d).cwiseAbs().sum();
}

double support(const Ellipsoid& e, const Eigen::VectorXd& d) {
  require_dim(e.dim(), static_cast<int>(d.size()), "support");
  return e.center.dot(d) + std::sqrt(std::max(0.0, e.radius2 * d.dot(e.shape * d)));
}

double support(const HPolytope& p, const Eigen::VectorXd& d) {
  require_dim(p.dim(), static_cast<int>(d.size()), "support");
  const auto lp = linprog::maximize(p.normals, p.offsets, d);
  if (lp.status == linprog::LpStatus::infeasible) throw EmptySetError("support: empty polytope");
  if (lp.status == linprog::LpStatus::unbounded) return std::numeric_limits<double>::infinity();
  return lp.value;
}

bool contains(const Box& b, const Eigen::VectorXd& x, double tol) {
  require_dim(b.dim(), static_cast<int>(x.size()), "contains");
  for (int i = 0; i < b.dim(); ++i) {
    const double s = tol * (1.0 + std::max(std::abs(b.lower(i)), std::abs(b.upper(i))));
    if (x(i) < b.lower(i) - s || x(i) > b.upper(i) + s) return false;
  }
  return true;
}

bool contains(const HPolytope& p, const Eigen::VectorXd& x, double tol) {
  require_dim(p.dim(), static_cast<int>(x.size()), "contains");
  return contains_polytope_rows(p, x, tol);
}

bool contains(const Ellipsoid& e, const Eigen::VectorXd& x, double tol) {
  require_dim(e.dim(), static_cast<int>(x.size()), "contains");
  const Eigen::VectorXd d = x - e.center;
  if (d.isZero(0.0)) return true;
  // Work in the range of the shape matrix; components outside it are excluded.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (e.shape + e.shape.transpose()));
  const Eigen::VectorXd y = es.eigenvectors().transpose() * d;
  const double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
  double m2 = 0.0;
  for (int i = 0; i < e.dim(); ++i) {
    const double lam = es.eigenvalues()(i);
    if (lam <= 1e-14 * std::max(1.0, lmax)) {
      if (std::abs(y(i)) > tol * (1.0 + d.norm())) return false;
      continue;
    }
    m2 += y(i) * y(i) / lam;
  }
  return m2 <= e.radius2 * (1.0 + tol) + tol;
}

bool contains(const Zonotope& z, const Eigen::VectorXd& x, double tol) {
  require_dim(z.dim(), static_cast<int>(x.size()), "contains");
  const Eigen::VectorXd d = x - z.center;
  const int g = z.num_generators();
  if (g == 0) return d.cwiseAbs().maxCoeff() <= tol * (1.0 + z.center.cwiseAbs().maxCoeff());
  // Quick accept through the least-norm coefficients.
  const Eigen::VectorXd xi_ls = z.generators.completeOrthogonalDecomposition().solve(d);
  if ((z.generators * xi_ls - d).cwiseAbs().maxCoeff() <= tol * (1.0 + d.cwiseAbs().maxCoeff()) &&
      xi_ls.cwiseAbs().maxCoeff() <= 1.0 + tol)
    return true;
  // Otherwise minimize |xi|^2 subject to G xi = d and |xi| <= 1 + tol.
  qpsolver::Qp qp;
  qp.hess = Eigen::MatrixXd::Identity(g, g);
  qp.grad = Eigen::VectorXd::Zero(g);
  qp.ineq_a.resize(2 * g, g);
  qp.ineq_a << Eigen::MatrixXd::Identity(g, g), -Eigen::MatrixXd::Identity(g, g);
  qp.ineq_b = Eigen::VectorXd::Constant(2 * g, 1.0 + tol);
  // Drop equality rows that are linearly dependent to keep the QP well posed.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(z.generators.transpose());
  const int rank = static_cast<int>(qr.rank());
  if (rank < z.dim()) {
    // Project onto the generator range; reject if d has a component outside it.
    const Eigen::MatrixXd range =
        Eigen::JacobiSVD<Eigen::MatrixXd>(z.generators, Eigen::ComputeThinU).matrixU().leftCols(rank);
    const Eigen::VectorXd resid = d - range * (range.transpose() * d);
    if (resid.cwiseAbs().maxCoeff() > tol * (1.0 + d.cwiseAbs().maxCoeff())) return false;
    qp.eq_a = range.transpose() * z.generators;
    qp.eq_b = range.transpose() * d;
  } else {
    qp.eq_a = z.generators;
    qp.eq_b = d;
  }
  const auto sol = qpsolver::solve(qp, 1e-9, 10000);
  if (sol.status != qpsolver::QpStatus::optimal) return false;
  const double eq_err = (z.generators * sol.x_opt - d).cwiseAbs().maxCoeff();
  return eq_err <= 1e-7 * (1.0 + d.cwiseAbs().maxCoeff()) && sol.x_opt.cwiseAbs().maxCoeff() <= 1.0 + 2.0 * tol;
}

bool is_empty(const HPolytope& p) {
  if (p.num_rows() == 0) return false;
  const auto lp = linprog::maximize(p.normals, p.offsets, Eigen::VectorXd::Zero(p.dim()));
  return lp.status == linprog::LpStatus::infeasible;
}

}  // namespace lrmpc::convexsets
