#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lrmpc/qpsolver.hpp"

namespace cs = lrmpc::convexsets;
namespace dq = lrmpc::dqplant;
namespace qp = lrmpc::qpsolver;

namespace {

Eigen::MatrixXd random_spd(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = g(rng);
  return m * m.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

// Box-constrained QP as a general inequality QP.
qp::Qp box_qp(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  const int n = static_cast<int>(g.size());
  qp::Qp q;
  q.hess = h;
  q.grad = g;
  q.ineq_a.resize(2 * n, n);
  q.ineq_a << Eigen::MatrixXd::Identity(n, n), -Eigen::MatrixXd::Identity(n, n);
  q.ineq_b.resize(2 * n);
  q.ineq_b << hi, -lo;
  q.eq_a.resize(0, n);
  q.eq_b.resize(0);
  return q;
}

// Accelerated projected gradient run to convergence.
Eigen::VectorXd projected_gradient(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi) {
  const double lip = h.eigenvalues().real().maxCoeff();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(g.size()).cwiseMax(lo).cwiseMin(hi);
  Eigen::VectorXd y = x;
  double t = 1.0;
  for (int it = 0; it < 200000; ++it) {
    const Eigen::VectorXd xn = (y - (h * y + g) / lip).cwiseMax(lo).cwiseMin(hi);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = xn + ((t - 1.0) / tn) * (xn - x);
    if ((xn - x).norm() < 1e-15 * (1.0 + x.norm())) {
      x = xn;
      break;
    }
    x = xn;
    t = tn;
  }
  return x;
}

double objective(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& x) {
  return 0.5 * x.dot(h * x) + g.dot(x);
}

qp::MpcSets wide_sets(double v) {
  qp::MpcSets s;
  s.x_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector4d::Constant(v)));
  s.u_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector2d::Constant(v)));
  s.x_f_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector4d::Constant(v)));
  return s;
}

}  // namespace

TEST(QpSolver, UnconstrainedMatchesLinearSolve) {
  std::mt19937_64 rng(1);
  const auto h = random_spd(rng, 5);
  const auto g = random_vec(rng, 5);
  qp::Qp q;
  q.hess = h;
  q.grad = g;
  q.ineq_a.resize(0, 5);
  q.ineq_b.resize(0);
  q.eq_a.resize(0, 5);
  q.eq_b.resize(0);
  const auto sol = qp::solve(q);
  ASSERT_EQ(sol.status, qp::QpStatus::optimal);
  EXPECT_LT((sol.x_opt + h.ldlt().solve(g)).norm(), 1e-10);
}

TEST(QpSolver, RandomBoxQpsMatchProjectedGradient) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 7;
    const auto h = random_spd(rng, n);
    const auto g = random_vec(rng, n, 3.0);
    const Eigen::VectorXd lo = -Eigen::VectorXd::Constant(n, 0.5) - random_vec(rng, n).cwiseAbs();
    const Eigen::VectorXd hi = Eigen::VectorXd::Constant(n, 0.5) + random_vec(rng, n).cwiseAbs();
    const auto q = box_qp(h, g, lo, hi);
    const auto sol = qp::solve(q);
    ASSERT_EQ(sol.status, qp::QpStatus::optimal) << "trial " << trial;
    EXPECT_LE(sol.kkt_residual, 1e-8);
    const auto ref = projected_gradient(h, g, lo, hi);
    EXPECT_NEAR(sol.objective, objective(h, g, ref), 1e-6) << "trial " << trial;
    EXPECT_NEAR(sol.objective, objective(h, g, sol.x_opt), 1e-9);
  }
}

TEST(QpSolver, RandomGeneralQpsSatisfyKkt) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + trial % 5;
    const int m = 2 * n;
    qp::Qp q;
    q.hess = random_spd(rng, n);
    q.grad = random_vec(rng, n, 2.0);
    q.ineq_a = Eigen::MatrixXd(m, n);
    for (int i = 0; i < m; ++i) q.ineq_a.row(i) = random_vec(rng, n).transpose();
    q.ineq_b = random_vec(rng, m).cwiseAbs() + Eigen::VectorXd::Constant(m, 0.1);
    q.eq_a = random_vec(rng, n).transpose();
    q.eq_b = Eigen::VectorXd::Constant(1, 0.05);
    const auto sol = qp::solve(q);
    ASSERT_EQ(sol.status, qp::QpStatus::optimal) << "trial " << trial;
    const auto kkt = qp::kkt_residual(q, sol.x_opt, sol.ineq_multipliers, sol.eq_multipliers);
    EXPECT_LE(kkt.max(), 1e-8);
    EXPECT_LE(sol.kkt_residual, 1e-8);
    EXPECT_GE(sol.ineq_multipliers.minCoeff(), 0.0);
  }
}

TEST(QpSolver, InfeasibleConstraintsReported) {
  qp::Qp q;
  q.hess = Eigen::Matrix2d::Identity();
  q.grad = Eigen::Vector2d::Zero();
  q.ineq_a.resize(2, 2);
  q.ineq_a << 1, 0, -1, 0;
  q.ineq_b = Eigen::Vector2d(-1.0, -1.0);  // x <= -1 and x >= 1
  q.eq_a.resize(0, 2);
  q.eq_b.resize(0);
  EXPECT_EQ(qp::solve(q).status, qp::QpStatus::infeasible);
}

TEST(QpSolver, InvalidProblemsThrow) {
  qp::Qp q;
  q.hess = Eigen::Matrix2d::Identity();
  q.hess(0, 1) = 0.5;
  q.grad = Eigen::Vector2d::Zero();
  q.ineq_a.resize(0, 2);
  q.ineq_b.resize(0);
  q.eq_a.resize(0, 2);
  q.eq_b.resize(0);
  EXPECT_THROW(qp::solve(q), std::invalid_argument);
  q.hess = -Eigen::Matrix2d::Identity();
  EXPECT_THROW(qp::solve(q), std::invalid_argument);
  q.hess = Eigen::Matrix3d::Identity();
  EXPECT_THROW(qp::solve(q), std::invalid_argument);
}

TEST(QpSolver, OneStepCondensedProblemHasClosedForm) {
  dq::DiscreteModel m;
  m.a = Eigen::Matrix4d::Identity();
  m.b.setZero();
  m.b.topRows(2) = Eigen::Matrix2d::Identity();
  m.e.setZero();
  m.c.setZero();
  const Eigen::Vector4d r(1.0, -2.0, 0.5, 0.3);
  const Eigen::Vector4d x(0.2, 0.4, -0.1, 0.6);
  const auto mpc = qp::build_condensed_mpc(m, Eigen::Matrix4d::Identity(), Eigen::Matrix2d::Identity(),
                                           Eigen::Matrix4d::Identity(), 1, wide_sets(100.0), r,
                                           cs::Zonotope::point(Eigen::Vector4d::Zero()), x);
  const auto sol = qp::solve(mpc.qp);
  ASSERT_EQ(sol.status, qp::QpStatus::optimal);
  // min |u|^2 + |x + B u - r|^2 gives (I + B'B) u = B'(r - x).
  const Eigen::Vector2d u_expected = 0.5 * (r - x).head<2>();
  EXPECT_LT((sol.x_opt.segment<2>(mpc.layout.u_offset()) - u_expected).norm(), 1e-10);
  EXPECT_LT((sol.x_opt.head<4>() - x).norm(), 1e-10);
}

TEST(QpSolver, CondensedObjectiveEqualsRollout) {
  std::mt19937_64 rng(4);
  const auto m = dq::nominal_model(dq::FilterParams{});
  const Eigen::Matrix4d q = Eigen::Vector4d(1.0, 1.0, 1e-4, 1e-4).asDiagonal();
  const Eigen::Matrix2d r = 1e-4 * Eigen::Matrix2d::Identity();
  const Eigen::Matrix4d p = random_spd(rng, 4);
  const Eigen::Vector4d target(489.9, 0.0, 0.0, 18.5);
  const Eigen::Vector4d drift(1.0, -2.0, 0.5, 0.1);
  const cs::Zonotope s(Eigen::Vector4d(0.1, 0.0, -0.2, 0.0), Eigen::MatrixXd(Eigen::Vector4d(2, 2, 5, 5).asDiagonal()));
  const Eigen::Vector4d xm(470.0, 10.0, 5.0, -3.0);
  const int n = 5;
  const Eigen::Vector4d lin(3.0, -1.0, 0.2, 0.7);
  const auto mpc = qp::build_condensed_mpc(m, q, r, p, n, wide_sets(1e4), target, s, xm, drift, 0.0, lin);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(mpc.layout.size());
    const Eigen::VectorXd xi = random_vec(rng, 4).cwiseMax(-1.0).cwiseMin(1.0);
    z.segment(mpc.layout.xi_offset(), 4) = xi;
    const Eigen::Vector4d x0 = xm - s.center - s.generators * xi;
    z.head<4>() = x0;
    const Eigen::VectorXd u = random_vec(rng, 2 * n, 200.0);
    z.segment(mpc.layout.u_offset(), 2 * n) = u;
    const double condensed = 0.5 * z.dot(mpc.qp.hess * z) + mpc.qp.grad.dot(z) + mpc.constant;
    const double rolled = qp::rollout_cost(m, q, r, p, target, x0, u, drift, lin);
    EXPECT_NEAR(condensed, rolled, 1e-9 * (1.0 + std::abs(rolled)));
    EXPECT_LT((mpc.qp.eq_a * z - mpc.qp.eq_b).norm(), 1e-9);
  }
}

TEST(QpSolver, CondensedMpcSolutionIsOptimalAndFeasible) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  const Eigen::Matrix4d q = Eigen::Vector4d(1.0, 1.0, 1e-4, 1e-4).asDiagonal();
  const Eigen::Matrix2d r = 1e-4 * Eigen::Matrix2d::Identity();
  qp::MpcSets sets;
  sets.x_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector4d(700.0, 700.0, 8000.0, 8000.0)));
  sets.u_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector2d(1000.0, 1000.0)));
  sets.x_f_hat = cs::to_hpolytope(cs::Box::symmetric(Eigen::Vector4d(50.0, 50.0, 500.0, 500.0)));
  const Eigen::Vector4d target(489.9, 0.0, 0.0, 18.5);
  const auto mpc = qp::build_condensed_mpc(m, q, r, Eigen::Matrix4d::Identity(), 5, sets, target,
                                           cs::Zonotope::point(Eigen::Vector4d::Zero()), Eigen::Vector4d::Zero());
  const auto sol = qp::solve(mpc.qp);
  ASSERT_EQ(sol.status, qp::QpStatus::optimal);
  EXPECT_LE(sol.kkt_residual, 1e-8);
  EXPECT_LE((mpc.qp.ineq_a * sol.x_opt - mpc.qp.ineq_b).maxCoeff(), 1e-6);
}
