#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lrmpc/tubempc.hpp"

namespace cs = lrmpc::convexsets;
namespace dq = lrmpc::dqplant;
namespace tmpc = lrmpc::tubempc;

namespace {

const Eigen::Vector2d kVref(600.0 * std::sqrt(2.0 / 3.0), 0.0);

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int r, int c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

cs::Zonotope box_zonotope(const Eigen::Vector4d& hw) { return cs::to_zonotope(cs::Box::symmetric(hw)); }

}  // namespace

TEST(TubeMpc, ScalarLqrMatchesFixedPointOracle) {
  Eigen::MatrixXd a(1, 1), b(1, 1), q(1, 1), r(1, 1);
  a << 0.5;
  b << 1.0;
  q << 1.0;
  r << 1.0;
  const auto res = tmpc::lqr_gain(a, b, q, r);
  // Fixed point of P = Q + A^2 P - A^2 P^2 / (R + P), iterated independently.
  EXPECT_NEAR(res.p(0, 0), 1.1327822185373186, 1e-9);
  EXPECT_NEAR(res.k(0, 0), -0.2655644370746374, 1e-9);
  const double p = res.p(0, 0);
  EXPECT_NEAR(p, 1.0 + 0.25 * p - 0.25 * p * p / (1.0 + p), 1e-10);
}

TEST(TubeMpc, LqrWithZeroStateWeightStabilizes) {
  Eigen::MatrixXd a(2, 2), b(2, 1);
  a << 1.2, 1.0, 0.0, 0.9;
  b << 0.0, 1.0;
  const auto res = tmpc::lqr_gain(a, b, Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(1, 1));
  EXPECT_LT(cs::spectral_radius(a + b * res.k), 1.0);
}

TEST(TubeMpc, LqrRejectsBadWeights) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::MatrixXd b = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_THROW(tmpc::lqr_gain(a, b, Eigen::MatrixXd::Identity(2, 2), -Eigen::MatrixXd::Identity(2, 2)),
               std::invalid_argument);
  EXPECT_THROW(tmpc::lqr_gain(a, b, -Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)),
               std::invalid_argument);
}

TEST(TubeMpc, TerminalLyapunovResidualOnRandomSchurSystems) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = random_matrix(rng, 4, 4);
    const Eigen::MatrixXd b = random_matrix(rng, 4, 2);
    const Eigen::MatrixXd k = random_matrix(rng, 2, 4);
    Eigen::MatrixXd ak = a + b * k;
    const double rho = cs::spectral_radius(ak);
    ak *= 0.9 / rho;
    const Eigen::MatrixXd q = Eigen::Vector4d(1.0, 2.0, 0.5, 0.1).asDiagonal();
    const Eigen::MatrixXd r = Eigen::Matrix2d::Identity();
    const auto p = tmpc::terminal_p_from_lyapunov(ak, q, r, k);
    EXPECT_LT(tmpc::lyapunov_residual(p, ak, q, r, k), 1e-8);
    const Eigen::MatrixXd direct = q + k.transpose() * r * k + ak.transpose() * p * ak;
    EXPECT_LT((p - direct).cwiseAbs().maxCoeff() / (1.0 + p.cwiseAbs().maxCoeff()), 1e-10);
  }
}

TEST(TubeMpc, SteadyStateInputIsLeastSquares) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  const Eigen::Vector4d r(480.0, 5.0, 40.0, 20.0);
  const Eigen::Vector4d c(1.0, -3.0, 0.2, 0.0);
  const auto ss = tmpc::steady_state_input(m, r, c);
  const Eigen::Vector4d rhs = r - m.a * r - c;
  const Eigen::Vector2d normal = (m.b.transpose() * m.b).ldlt().solve(m.b.transpose() * rhs);
  EXPECT_LT((ss.u_r - normal).norm(), 1e-9 * (1.0 + normal.norm()));
  EXPECT_NEAR(ss.residual, (m.a * r + m.b * ss.u_r + c - r).norm(), 1e-9);
}

TEST(TubeMpc, ZeroLoadReferenceMatchesHandSolvedEquilibrium) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  EXPECT_NEAR(r(0), kVref(0), 1e-9);
  EXPECT_NEAR(r(1), 0.0, 1e-9);
  EXPECT_NEAR(r(2), 0.0, 1e-9);
  // Capacitor current C w0 V carried by Ifq (solved 4x4 system).
  EXPECT_NEAR(r(3), 18.468717554330848, 1e-9);
  const auto ss = tmpc::steady_state_input(m, r);
  EXPECT_LT(ss.residual, 1e-8);
  EXPECT_NEAR(ss.u_r(0), 482.93540606984629, 1e-7);
}

TEST(TubeMpc, ReferenceWithLoadIsAnEquilibrium) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  const Eigen::Vector2d i_load(400.0, -150.0);
  const auto r = tmpc::compute_reference(kVref, m, i_load);
  const auto ss = tmpc::steady_state_input(m, r, m.e * i_load);
  EXPECT_LT(ss.residual, 1e-8);
}

TEST(TubeMpc, AncillaryGainIsSchurAndPSolvesLyapunov) {
  const tmpc::TubeController c(dq::nominal_model(dq::FilterParams{}), tmpc::TubeConfig{});
  EXPECT_LT(cs::spectral_radius(c.a_k()), 1.0);
  EXPECT_LT(c.p_residual(), 1e-8);
}

TEST(TubeMpc, AncillaryGainStaysSchurAcrossParameterBox) {
  const dq::FilterParams p;
  const tmpc::TubeController c(dq::nominal_model(p), tmpc::TubeConfig{});
  for (double fr : {-0.1, 0.1})
    for (double fc : {-0.1, 0.1})
      for (double fl : {-0.2, 0.0, 0.2}) {
        const auto pert = dq::apply_uncertainty(p, {fr * p.r_f, fc * p.c_f, fl * p.l_f});
        EXPECT_LT(cs::spectral_radius(pert.a + pert.b * c.k_gain()), 1.0);
      }
}

TEST(TubeMpc, BoundedDisturbanceKeepsErrorBounded) {
  const tmpc::TubeController c(dq::nominal_model(dq::FilterParams{}), tmpc::TubeConfig{});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Vector4d e = Eigen::Vector4d::Zero();
  const Eigen::Vector4d hw(5.0, 5.0, 2.0, 2.0);
  const auto s = cs::mrpi_outer(c.a_k(), box_zonotope(hw), 1e-3);
  for (int k = 0; k < 10000; ++k) {
    e = c.a_k() * e + hw.cwiseProduct(Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)));
    ASSERT_TRUE(e.allFinite());
    ASSERT_TRUE(cs::contains(s, Eigen::VectorXd(e), 1e-7));
  }
}

// The stage cost penalizes the full input, so the closed loop settles at a
// fixed point near r rather than on it. At a fixed point the cost stops
// changing, which with the decrease bound gives stage cost <= |u_r|^2_R.
TEST(TubeMpc, ZeroDisturbanceLoopSettlesAtBoundedOffset) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  tmpc::TubeController c(m, tmpc::TubeConfig{});
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  const auto w0 = cs::Zonotope::point(Eigen::Vector4d::Zero());
  const auto& wt = c.weights();
  Eigen::Vector4d x = r;
  Eigen::Vector4d x_prev = x;
  tmpc::StepResult res;
  for (int k = 0; k < 400; ++k) {
    res = c.step(x, w0, r);
    ASSERT_EQ(res.monitor.qp_status, lrmpc::qpsolver::QpStatus::optimal) << "step " << k;
    EXPECT_FALSE(res.monitor.fallback_used);
    EXPECT_TRUE(res.monitor.tube_contains_state);
    EXPECT_TRUE(res.monitor.lyapunov_decrease_ok) << "step " << k;
    EXPECT_TRUE(res.monitor.candidate_feasible) << "step " << k;
    x_prev = x;
    x = m.a * x + m.b * res.u_applied;
  }
  EXPECT_LT((x - x_prev).norm(), 1e-8);
  EXPECT_LT((res.x_nominal - x_prev).norm(), 1e-6);
  const Eigen::Vector4d e = res.x_nominal - r;
  const double stage = e.dot(wt.q * e) + res.u_nominal.dot(wt.r * res.u_nominal);
  EXPECT_LE(stage, res.u_r.dot(wt.r * res.u_r) + 1e-6);
  EXPECT_GT((x - r).norm(), 0.0);
}

TEST(TubeMpc, WiderDisturbanceGrowsTubeAndShrinksConstraints) {
  tmpc::TubeController c(dq::nominal_model(dq::FilterParams{}), tmpc::TubeConfig{});
  c.set_disturbance(Eigen::Vector4d(2.0, 2.0, 1.0, 1.0));
  const auto s_small = c.s_hat();
  const auto x_small = c.sets().x_hat;
  c.set_disturbance(Eigen::Vector4d(6.0, 6.0, 3.0, 3.0));
  const auto s_big = c.s_hat();
  const auto x_big = c.sets().x_hat;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Vector4d d = Eigen::Vector4d(g(rng), g(rng), g(rng), g(rng)).normalized();
    EXPECT_GE(cs::support(s_big, d), cs::support(s_small, d) - 1e-9);
  }
  ASSERT_EQ(x_small.num_rows(), x_big.num_rows());
  for (int i = 0; i < x_small.num_rows(); ++i) EXPECT_LE(x_big.offsets(i), x_small.offsets(i) + 1e-9);
}

TEST(TubeMpc, ShiftedCandidateNeedsAPreviousSolution) {
  const tmpc::TubeController c(dq::nominal_model(dq::FilterParams{}), tmpc::TubeConfig{});
  EXPECT_THROW(c.shifted_candidate(Eigen::Vector4d::Zero()), std::logic_error);
}

// Outside the set where the stage cost is below |u_r|^2_R the cost must fall.
TEST(TubeMpc, NominalClosedLoopLyapunovDecrease) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  tmpc::TubeController c(m, tmpc::TubeConfig{});
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  const auto w0 = cs::Zonotope::point(Eigen::Vector4d::Zero());
  const auto& wt = c.weights();
  Eigen::Vector4d x = Eigen::Vector4d::Zero();
  bool prev_outside = false;
  bool inside = false;
  double v_prev = 0.0;
  int checked = 0;
  int decreases = 0;
  for (int k = 0; k < 300; ++k) {
    const auto res = c.step(x, w0, r);
    ASSERT_EQ(res.monitor.qp_status, lrmpc::qpsolver::QpStatus::optimal) << "step " << k;
    if (res.monitor.lyapunov_checked) {
      ++checked;
      EXPECT_TRUE(res.monitor.lyapunov_decrease_ok) << "step " << k;
      EXPECT_TRUE(res.monitor.candidate_feasible) << "step " << k;
    }
    if (prev_outside) {
      EXPECT_LE(res.monitor.lyapunov_value, v_prev + 1e-6 * std::max(1.0, v_prev)) << "step " << k;
      ++decreases;
    }
    const Eigen::Vector4d e = res.x_nominal - r;
    const double stage = e.dot(wt.q * e) + res.u_nominal.dot(wt.r * res.u_nominal);
    prev_outside = stage > res.u_r.dot(wt.r * res.u_r);
    inside = inside || res.monitor.in_region_of_attraction;
    v_prev = res.monitor.lyapunov_value;
    x = m.a * x + m.b * res.u_applied;
  }
  EXPECT_GT(checked, 290);
  EXPECT_GT(decreases, 0);
  EXPECT_TRUE(inside);
  // Settles within the offset allowed by the input penalty.
  EXPECT_LT((x - r).head<2>().norm(), 1.0);
}

TEST(TubeMpc, ShiftedCandidateCostChain) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  tmpc::TubeController c(m, tmpc::TubeConfig{});
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  const auto w0 = cs::Zonotope::point(Eigen::Vector4d::Zero());
  const auto& wt = c.weights();
  Eigen::Vector4d x(400.0, 30.0, 0.0, 0.0);
  for (int k = 0; k < 40; ++k) {
    const auto res = c.step(x, w0, r);
    const auto& prev = *c.last_nominal();
    const auto cand = c.shifted_candidate(r);
    // The candidate obeys the nominal dynamics exactly.
    for (size_t j = 0; j + 1 < cand.x.size(); ++j)
      EXPECT_LT((m.a * cand.x[j] + m.b * cand.u[j] - cand.x[j + 1]).norm(), 1e-8);
    const int n = static_cast<int>(prev.u.size());
    Eigen::VectorXd up(2 * n), uc(2 * n);
    for (int j = 0; j < n; ++j) {
      up.segment<2>(2 * j) = prev.u[j];
      uc.segment<2>(2 * j) = cand.u[j];
    }
    const Eigen::Vector4d lin = c.terminal_linear(res.u_r);
    const Eigen::Vector4d zero = Eigen::Vector4d::Zero();
    const double v_prev = lrmpc::qpsolver::rollout_cost(m, wt.q, wt.r, wt.p, r, prev.x[0], up, zero, lin);
    const double v_cand = lrmpc::qpsolver::rollout_cost(m, wt.q, wt.r, wt.p, r, cand.x[0], uc, zero, lin);
    EXPECT_NEAR(v_prev, res.monitor.lyapunov_value, 1e-9 * std::max(1.0, v_prev));
    const Eigen::Vector4d e0 = prev.x[0] - r;
    const double stage = e0.dot(wt.q * e0) + prev.u[0].dot(wt.r * prev.u[0]);
    const double ur = res.u_r.dot(wt.r * res.u_r);
    // Equality: the terminal cost is the exact tail cost of the terminal policy.
    EXPECT_NEAR(v_cand, v_prev + ur - stage, 1e-7 * std::max(1.0, std::abs(v_prev))) << "step " << k;
    x = m.a * x + m.b * res.u_applied;
  }
}

TEST(TubeMpc, ContainmentAndFeasibilityWithDisturbancesInsideTheSet) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  tmpc::TubeController c(m, tmpc::TubeConfig{});
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  const Eigen::Vector4d hw(4.0, 4.0, 2.0, 2.0);
  const auto w = box_zonotope(hw);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Vector4d x = r;
  for (int k = 0; k < 300; ++k) {
    const auto res = c.step(x, w, r);
    ASSERT_EQ(res.monitor.qp_status, lrmpc::qpsolver::QpStatus::optimal) << "step " << k;
    EXPECT_TRUE(res.monitor.tube_contains_state) << "step " << k;
    EXPECT_TRUE(res.monitor.propagation_ok) << "step " << k;
    EXPECT_TRUE(res.monitor.candidate_feasible) << "step " << k;
    x = m.a * x + m.b * res.u_applied + hw.cwiseProduct(Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)));
  }
}

TEST(TubeMpc, PlainMpcPinsInitialState) {
  const auto m = dq::nominal_model(dq::FilterParams{});
  tmpc::TubeConfig cfg;
  cfg.robust = false;
  tmpc::TubeController c(m, cfg);
  const auto r = tmpc::compute_reference(kVref, m, Eigen::Vector2d::Zero());
  const Eigen::Vector4d x(450.0, 10.0, 3.0, 5.0);
  const auto res = c.step(x, cs::Zonotope::point(Eigen::Vector4d::Zero()), r);
  EXPECT_LT((res.x_nominal - x).norm(), 1e-6);
  EXPECT_TRUE(res.monitor.tube_contains_state);
}

TEST(TubeMpc, InvalidConfigurationThrows) {
  tmpc::TubeConfig cfg;
  cfg.horizon = 0;
  EXPECT_THROW(tmpc::TubeController(dq::nominal_model(dq::FilterParams{}), cfg), std::invalid_argument);
}
