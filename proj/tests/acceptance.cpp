// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails.
#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "lrmpc/convexsets.hpp"
#include "lrmpc/dqplant.hpp"
#include "lrmpc/gpregress.hpp"
#include "lrmpc/gridsim.hpp"
#include "lrmpc/qpsolver.hpp"
#include "lrmpc/scenario.hpp"
#include "lrmpc/tubempc.hpp"

namespace cs = lrmpc::convexsets;
namespace dq = lrmpc::dqplant;
namespace gp = lrmpc::gpregress;
namespace gs = lrmpc::gridsim;
namespace qp = lrmpc::qpsolver;
namespace sc = lrmpc::scenario;
namespace tmpc = lrmpc::tubempc;
namespace fs = std::filesystem;

namespace {

constexpr double kThdLimit = 5.0;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

int g_failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

sc::ScenarioConfig load(const std::string& name) {
  return sc::parse_config(fs::path(LRMPC_SCENARIO_DIR) / (name + ".cfg"));
}

struct ThdRun {
  double thd = std::nan("");
  double seconds = 0.0;
  int violations = 0;
  bool failed = false;
};

ThdRun run_thd(const sc::ScenarioConfig& cfg, gs::ControllerKind kind, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = sc::cmd_run(cfg, kind, seed, {});
  ThdRun r;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.thd = out.report.rows[0].thd_percent[0];
  r.violations = out.report.monitor_violations();
  r.failed = out.report.any_failed();
  return r;
}

// THD per controller and seed for one scenario class.
using ClassResults = std::map<gs::ControllerKind, std::vector<ThdRun>>;

ClassResults run_class(const std::string& name) {
  const auto cfg = load(name);
  ClassResults res;
  for (auto kind : {gs::ControllerKind::lrmpc, gs::ControllerKind::rmpc, gs::ControllerKind::mpc,
                    gs::ControllerKind::pi})
    for (auto seed : kSeeds) res[kind].push_back(run_thd(cfg, kind, seed));
  return res;
}

std::string thd_list(const std::vector<ThdRun>& runs) {
  std::string s;
  for (const auto& r : runs) s += (s.empty() ? "" : "/") + fmt("%.2f", r.thd);
  return s;
}

// ---------------------------------------------------------------- criteria 1-3

void criterion_1(const ClassResults& a) {
  const auto& runs = a.at(gs::ControllerKind::lrmpc);
  bool hard = true;
  bool soft = true;
  double worst_time = 0.0;
  for (const auto& r : runs) {
    hard = hard && !r.failed && r.thd < kThdLimit;
    soft = soft && r.thd >= 1.0 && r.thd <= 4.0;
    worst_time = std::max(worst_time, r.seconds);
  }
  const bool fast = worst_time < 60.0;
  verdict(1, hard && fast,
          "LRMPC THD % over seeds 1-5: " + thd_list(runs) + " (limit 5), soft band [1,4] " +
              (soft ? "met" : "missed") + ", slowest run " + fmt("%.2f", worst_time) + " s");
}

struct Ordering {
  int lr_le_r = 0;
  int r_le_m = 0;
  int lr_lt_pi = 0;
  int all = 0;
};

Ordering ordering(const ClassResults& res) {
  Ordering o;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const double lr = res.at(gs::ControllerKind::lrmpc)[i].thd;
    const double r = res.at(gs::ControllerKind::rmpc)[i].thd;
    const double m = res.at(gs::ControllerKind::mpc)[i].thd;
    const double pi = res.at(gs::ControllerKind::pi)[i].thd;
    const bool a = lr <= r;
    const bool b = r <= m;
    const bool c = lr < pi;
    o.lr_le_r += a;
    o.r_le_m += b;
    o.lr_lt_pi += c;
    o.all += a && b && c;
  }
  return o;
}

double mean_thd(const std::vector<ThdRun>& runs) {
  double s = 0.0;
  for (const auto& r : runs) s += r.thd;
  return s / static_cast<double>(runs.size());
}

void criterion_2(const std::map<std::string, ClassResults>& classes) {
  const int majority = static_cast<int>(kSeeds.size()) / 2 + 1;
  bool pass = true;
  for (const auto& [name, res] : classes) {
    const auto o = ordering(res);
    const bool ok = o.all >= majority;
    pass = pass && ok;
    std::printf("  %-28s mean THD lrmpc %.2f rmpc %.2f mpc %.2f pi %.2f | seeds with lrmpc<=rmpc %d, rmpc<=mpc %d, lrmpc<pi %d, all %d/5\n",
                name.c_str(), mean_thd(res.at(gs::ControllerKind::lrmpc)), mean_thd(res.at(gs::ControllerKind::rmpc)),
                mean_thd(res.at(gs::ControllerKind::mpc)), mean_thd(res.at(gs::ControllerKind::pi)), o.lr_le_r,
                o.r_le_m, o.lr_lt_pi, o.all);
  }
  verdict(2, pass, "ordering LRMPC <= RMPC <= MPC and LRMPC < PI on a majority of seeds in every class");
}

void criterion_3(const ClassResults& cpl) {
  const auto& lr = cpl.at(gs::ControllerKind::lrmpc);
  const auto& r = cpl.at(gs::ControllerKind::rmpc);
  bool below = true;
  int ordered = 0;
  for (std::size_t i = 0; i < lr.size(); ++i) {
    below = below && !lr[i].failed && lr[i].thd < kThdLimit;
    ordered += lr[i].thd <= r[i].thd;
  }
  const bool pass = below && ordered >= 3;
  verdict(3, pass,
          "LRMPC THD % " + thd_list(lr) + ", RMPC " + thd_list(r) + ", LRMPC <= RMPC on " +
              std::to_string(ordered) + "/5 seeds");
}

// ---------------------------------------------------------------- criteria 4-6

// Uniform sample in the ellipsoid {c + L z : |z| <= sqrt(radius2)}.
Eigen::Vector2d sample_ellipsoid(std::mt19937_64& rng, const cs::Ellipsoid& e) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::Vector2d z(g(rng), g(rng));
  z *= std::sqrt(u(rng)) / z.norm();
  const Eigen::Matrix2d l = e.shape.llt().matrixL();
  return e.center + std::sqrt(e.radius2) * (l * z);
}

struct SyntheticStats {
  int steps = 0;
  int contained = 0;
  int propagation_checked = 0;
  int propagation_ok = 0;
  int qp_infeasible_after_feasible = 0;
  int candidates = 0;
  int candidate_infeasible = 0;
  int lyapunov_checked = 0;
  int lyapunov_violations = 0;
  double worst_lyapunov_margin = 1e300;
  double p_residual = 0.0;
};

// Closed loop on the nominal model with a fixed disturbance set built from a
// representative learner prediction; each step draws the load current inside
// the confidence ellipsoid and the parametric term inside its box.
SyntheticStats synthetic_runs() {
  const dq::FilterParams params;
  const auto model = dq::nominal_model(params);
  const Eigen::Vector2d v_ref(gs::kBaseVoltagePeak, 0.0);

  gp::GpPrediction pred;
  pred.mu_star = Eigen::Vector2d(300.0, -120.0);
  pred.sigma2_star = Eigen::Vector2d(4.0, 4.0).asDiagonal();
  auto sp = gp::DisturbanceSetParams::with_confidence(0.95);
  sp.l2_bound = 2.0;
  const auto w = gp::build_w_hat(pred, sp);
  const auto w_hat = tmpc::disturbance_zonotope(model, w);
  const Eigen::Vector4d r = tmpc::compute_reference(v_ref, model, pred.mu_star);

  SyntheticStats st;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    tmpc::TubeController ctrl(model, tmpc::TubeConfig{});
    st.p_residual = std::max(st.p_residual, ctrl.p_residual());
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::Vector4d x = tmpc::compute_reference(v_ref, model, Eigen::Vector2d::Zero());
    bool had_feasible = false;
    for (int k = 0; k < 1000; ++k) {
      const auto res = ctrl.step(x, w_hat, r);
      const auto& m = res.monitor;
      ++st.steps;
      st.contained += m.tube_contains_state;
      if (m.propagation_checked) {
        ++st.propagation_checked;
        st.propagation_ok += m.propagation_ok;
      }
      if (m.qp_status == qp::QpStatus::optimal) {
        had_feasible = true;
      } else if (had_feasible) {
        ++st.qp_infeasible_after_feasible;
      }
      if (m.candidate_checked) {
        ++st.candidates;
        st.candidate_infeasible += !m.candidate_feasible;
      }
      if (m.lyapunov_checked) {
        ++st.lyapunov_checked;
        st.lyapunov_violations += !m.lyapunov_decrease_ok;
        st.worst_lyapunov_margin = std::min(st.worst_lyapunov_margin, m.lyapunov_margin);
      }
      const Eigen::Vector2d w1 = sample_ellipsoid(rng, w.w1_set);
      const Eigen::Vector4d w2 = w.w2_set.center() +
                                 w.w2_set.half_widths().cwiseProduct(Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)));
      x = model.a * x + model.b * res.u_applied + model.e * w1 + w2;
    }
  }
  return st;
}

void criteria_4_to_6() {
  const auto st = synthetic_runs();
  verdict(4, st.contained == st.steps && st.propagation_ok == st.propagation_checked,
          "x in nominal + tube on " + std::to_string(st.contained) + "/" + std::to_string(st.steps) +
              " steps, one-step propagation " + std::to_string(st.propagation_ok) + "/" +
              std::to_string(st.propagation_checked));
  verdict(5, st.qp_infeasible_after_feasible == 0 && st.candidate_infeasible == 0 && st.candidates > 0,
          std::to_string(st.qp_infeasible_after_feasible) + " infeasible QPs after a feasible start, shifted candidate feasible on " +
              std::to_string(st.candidates - st.candidate_infeasible) + "/" + std::to_string(st.candidates) + " steps");
  verdict(6, st.lyapunov_violations == 0 && st.lyapunov_checked > 0 && st.p_residual < 1e-8,
          "decrease bound held on " + std::to_string(st.lyapunov_checked - st.lyapunov_violations) + "/" +
              std::to_string(st.lyapunov_checked) + " steps (tol 1e-6, worst margin " +
              fmt("%.3g", st.worst_lyapunov_margin) + "), P residual " + fmt("%.2e", st.p_residual));
}

// ---------------------------------------------------------------- criterion 7

Eigen::MatrixXd gram(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const gp::GpHyperparams& hp) {
  Eigen::MatrixXd k(a.size(), b.size());
  for (int i = 0; i < a.size(); ++i)
    for (int j = 0; j < b.size(); ++j) {
      const double d = (a(i) - b(j)) / hp.lambda;
      k(i, j) = hp.h * hp.h * std::exp(-d * d);
    }
  return k;
}

Eigen::VectorXd sample_prior(std::mt19937_64& rng, const Eigen::VectorXd& t, const gp::GpHyperparams& hp) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd k = gram(t, t, hp);
  k.diagonal().array() += hp.sigma_n2;
  const Eigen::MatrixXd l = k.llt().matrixL();
  Eigen::VectorXd z(t.size());
  for (int i = 0; i < z.size(); ++i) z(i) = g(rng);
  return l * z;
}

void criterion_7() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + trial;
    const gp::GpHyperparams hp{0.5 + 5.0 * u(rng), 0.5 + 2.0 * u(rng), 0.01 + 0.1 * u(rng)};
    Eigen::VectorXd t(n), y(n);
    double tk = 0.0;
    for (int i = 0; i < n; ++i) {
      tk += 0.2 + u(rng);
      t(i) = tk;
      y(i) = 4.0 * u(rng) - 2.0;
    }
    const double t_next = tk + 1.0;
    const Eigen::MatrixXd k = gram(t, t, hp);
    Eigen::MatrixXd ky = k;
    ky.diagonal().array() += hp.sigma_n2;
    const Eigen::MatrixXd inv = ky.inverse();
    const Eigen::VectorXd mu_ref = k * inv * y;
    const Eigen::MatrixXd sig_ref = k - k * inv * k;
    const Eigen::VectorXd ks = gram(t, Eigen::VectorXd::Constant(1, t_next), hp).col(0);
    const double m_ref = ks.dot(inv * y);
    const double v_ref = hp.h * hp.h - ks.dot(inv * ks) + hp.sigma_n2;

    const auto post = gp::posterior(t, y, hp);
    const auto pred = gp::predict_channel(t, y, hp, t_next);
    worst = std::max({worst, (post.mu_bar - mu_ref).cwiseAbs().maxCoeff(),
                      (post.sigma_bar - sig_ref).cwiseAbs().maxCoeff(), std::abs(pred.mean - m_ref),
                      std::abs(pred.variance - v_ref)});
  }

  const gp::GpHyperparams hp{3.0, 1.5, 0.01};
  const auto sp = gp::DisturbanceSetParams::with_confidence(0.95);
  Eigen::VectorXd t(41);
  for (int i = 0; i < 41; ++i) t(i) = i;
  int inside = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto yd = sample_prior(rng, t, hp);
    const auto yq = sample_prior(rng, t, hp);
    gp::GpDataset ds(200);
    for (int i = 0; i < 40; ++i) ds.update(t(i), Eigen::Vector2d(yd(i), yq(i)));
    const auto w = gp::build_w_hat(gp::predict(ds, hp, t(40)), sp);
    inside += cs::contains(w.w1_set, Eigen::Vector2d(yd(40), yq(40)));
  }
  verdict(7, worst <= 1e-8 && inside >= 900,
          "max deviation from dense-inverse oracle " + fmt("%.2e", worst) + " on 20 datasets, coverage " +
              std::to_string(inside) + "/1000");
}

// ---------------------------------------------------------------- criterion 8

Eigen::VectorXd random_vec(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

void criterion_8() {
  std::mt19937_64 rng(8);
  // Box identities.
  bool boxes = true;
  double box_error = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::VectorXd c1 = random_vec(rng, 4), c2 = random_vec(rng, 4);
    const Eigen::VectorXd h1 = random_vec(rng, 4).cwiseAbs(), h2 = random_vec(rng, 4).cwiseAbs() * 0.5;
    const cs::Box a(c1 - h1 - h2 - Eigen::VectorXd::Constant(4, 0.1), c1 + h1 + h2 + Eigen::VectorXd::Constant(4, 0.1));
    const cs::Box b(c2 - h2, c2 + h2);
    const auto hull = cs::interval_hull(cs::minkowski_sum(a, b));
    const auto diff = cs::pontryagin_diff(cs::to_hpolytope(a), cs::to_zonotope(b));
    const auto expect = cs::to_hpolytope(cs::Box(a.lower - b.lower, a.upper - b.upper));
    box_error = std::max({box_error, (hull.lower - (a.lower + b.lower)).cwiseAbs().maxCoeff(),
                          (hull.upper - (a.upper + b.upper)).cwiseAbs().maxCoeff(),
                          (diff.offsets - expect.offsets).cwiseAbs().maxCoeff()});
    boxes = boxes && diff.normals == expect.normals;
  }

  // mRPI outer approximation against the 50-term truncated sum.
  const auto model = dq::nominal_model(dq::FilterParams{});
  const tmpc::TubeController ctrl(model, tmpc::TubeConfig{});
  const Eigen::MatrixXd a_k = ctrl.a_k();
  const auto w = cs::to_zonotope(cs::Box::symmetric(Eigen::Vector4d(4.0, 4.0, 2.0, 2.0)));
  const auto s = cs::mrpi_outer(a_k, w, 1e-3);
  bool mrpi = true;
  for (int d = 0; d < 100; ++d) {
    const Eigen::VectorXd dir = random_vec(rng, 4).normalized();
    double truncated = 0.0;
    Eigen::MatrixXd pw = Eigen::MatrixXd::Identity(4, 4);
    for (int j = 0; j < 50; ++j) {
      truncated += cs::support(w, pw.transpose() * dir);
      pw = a_k * pw;
    }
    mrpi = mrpi && cs::support(s, dir) >= truncated * (1.0 - 1e-12);
  }

  // Maximal positive invariant set under A_K.
  const cs::Box xb = cs::Box::symmetric(Eigen::Vector4d(50.0, 50.0, 200.0, 200.0));
  const auto o = cs::max_positive_invariant(a_k, cs::to_hpolytope(xb));
  Eigen::Vector4d reach;
  for (int i = 0; i < 4; ++i) reach(i) = cs::support(o, Eigen::Vector4d::Unit(i));
  int sampled = 0;
  int invariant = 0;
  while (sampled < 10000) {
    const Eigen::Vector4d x = reach.cwiseProduct(Eigen::Vector4d(random_vec(rng, 4)));
    if (!cs::contains(o, x)) continue;
    ++sampled;
    invariant += cs::contains(o, Eigen::Vector4d(a_k * x), 1e-7);
  }
  // Exact up to floating-point rounding of the endpoint sums.
  boxes = boxes && box_error <= 1e-12;
  verdict(8, boxes && mrpi && invariant == sampled,
          "box identities max error " + fmt("%.1e", box_error) + ", mRPI contains truncated sum in " +
              (mrpi ? "100/100" : "fewer than 100") + " directions, invariance on " + std::to_string(invariant) + "/" +
              std::to_string(sampled) + " samples");
}

// ---------------------------------------------------------------- criterion 9

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

void criterion_9() {
  std::mt19937_64 rng(9);
  double worst_gap = 0.0;
  double worst_kkt = 0.0;
  int optimal = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 7;
    const Eigen::MatrixXd m = Eigen::MatrixXd(random_vec(rng, n * n).reshaped(n, n));
    const Eigen::MatrixXd h = m * m.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
    const Eigen::VectorXd g = random_vec(rng, n, 3.0);
    const Eigen::VectorXd lo = -random_vec(rng, n).cwiseAbs() - Eigen::VectorXd::Constant(n, 0.05);
    const Eigen::VectorXd hi = random_vec(rng, n).cwiseAbs() + Eigen::VectorXd::Constant(n, 0.05);
    qp::Qp q;
    q.hess = h;
    q.grad = g;
    q.ineq_a.resize(2 * n, n);
    q.ineq_a << Eigen::MatrixXd::Identity(n, n), -Eigen::MatrixXd::Identity(n, n);
    q.ineq_b.resize(2 * n);
    q.ineq_b << hi, -lo;
    q.eq_a.resize(0, n);
    q.eq_b.resize(0);
    const auto sol = qp::solve(q);
    if (sol.status != qp::QpStatus::optimal) continue;
    ++optimal;
    const auto ref = projected_gradient(h, g, lo, hi);
    const double f_ref = 0.5 * ref.dot(h * ref) + g.dot(ref);
    worst_gap = std::max(worst_gap, std::abs(sol.objective - f_ref));
    worst_kkt = std::max({worst_kkt, sol.kkt_residual,
                          qp::kkt_residual(q, sol.x_opt, sol.ineq_multipliers, sol.eq_multipliers).max()});
  }
  verdict(9, optimal == 50 && worst_gap <= 1e-6 && worst_kkt <= 1e-8,
          std::to_string(optimal) + "/50 optimal, max objective gap to projected gradient " + fmt("%.2e", worst_gap) +
              ", max KKT residual " + fmt("%.2e", worst_kkt));
}

// ---------------------------------------------------------------- criterion 10

void criterion_10() {
  const auto cfg = load("two_dg");
  const auto out = sc::cmd_run(cfg, gs::ControllerKind::lrmpc, std::nullopt, {});
  const auto& row = out.report.rows[0];
  if (row.failed || !row.two_dg) {
    verdict(10, false, "two-DG run failed: " + row.diagnostic);
    return;
  }
  const auto& s = *row.two_dg;
  const double expected = cfg.droop[1].m / cfg.droop[0].m;
  const double ratio = s.ratio();
  const double balance = s.balance_error();
  verdict(10, std::abs(ratio - expected) <= 0.1 * expected && balance <= 0.01,
          "P1/P2 = " + fmt("%.4f", ratio) + " (target " + fmt("%.2f", expected) + " +/- 10%), P1 = " +
              fmt("%.1f", s.p_avg[0] / 1e3) + " kW, P2 = " + fmt("%.1f", s.p_avg[1] / 1e3) +
              " kW, balance error " + fmt("%.3f", 100.0 * balance) + " %");
}

}  // namespace

int main() {
  const std::vector<std::string> classes{"harmonic_5_7",
                                         "harmonic_5_7_11_thd31",
                                         "harmonic_5_7_11_thd42",
                                         "harmonic_5_7_11_thd51",
                                         "harmonic_5_11_13_thd31",
                                         "harmonic_5_11_13_thd45",
                                         "harmonic_5_11_13_thd53",
                                         "harmonic_5_7_11_thd38",
                                         "constant_power"};
  std::map<std::string, ClassResults> results;
  for (const auto& name : classes) results[name] = run_class(name);

  criterion_1(results.at("harmonic_5_7"));
  criterion_2(results);
  criterion_3(results.at("constant_power"));
  criteria_4_to_6();
  criterion_7();
  criterion_8();
  criterion_9();
  criterion_10();
  std::printf("%d criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
