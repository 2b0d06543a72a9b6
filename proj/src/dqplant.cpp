#include "lrmpc/dqplant.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace lrmpc::dqplant {

namespace {

constexpr double kTwoPiOver3 = 2.0 * std::numbers::pi / 3.0;

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::runtime_error(std::string(what) + ": non-finite entries");
}

}  // namespace

void FilterParams::validate() const {
  if (!(r_f >= 0.0)) throw std::invalid_argument("r_f must be >= 0");
  if (!(l_f > 0.0)) throw std::invalid_argument("l_f must be > 0");
  if (!(c_f > 0.0)) throw std::invalid_argument("c_f must be > 0");
  if (!(ts > 0.0)) throw std::invalid_argument("ts must be > 0");
  if (!(omega0 >= 0.0)) throw std::invalid_argument("omega0 must be >= 0");
}

void UncertaintyBounds::validate() const {
  auto frac_ok = [](double f) { return f >= 0.0 && f < 1.0; };
  if (!frac_ok(delta_r_frac)) throw std::invalid_argument("delta_r_frac must be in [0, 1)");
  if (!frac_ok(delta_c_frac)) throw std::invalid_argument("delta_c_frac must be in [0, 1)");
  if (!frac_ok(delta_l_frac)) throw std::invalid_argument("delta_l_frac must be in [0, 1)");
  if (!(l2_inf_bound >= 0.0)) throw std::invalid_argument("l2_inf_bound must be >= 0");
}

ContinuousModel continuous_matrices(const FilterParams& p) {
  p.validate();
  const double w = p.omega0;
  ContinuousModel cm;
  cm.ac << 0.0, w, 1.0 / p.c_f, 0.0,
           -w, 0.0, 0.0, 1.0 / p.c_f,
           -1.0 / p.l_f, 0.0, -p.r_f / p.l_f, w,
           0.0, -1.0 / p.l_f, -w, -p.r_f / p.l_f;
  cm.bc.setZero();
  cm.bc(2, 0) = 1.0 / p.l_f;
  cm.bc(3, 1) = 1.0 / p.l_f;
  cm.ec.setZero();
  cm.ec(0, 0) = -1.0 / p.c_f;
  cm.ec(1, 1) = -1.0 / p.c_f;
  cm.c.setZero();
  cm.c(0, 0) = 1.0;
  cm.c(1, 1) = 1.0;
  return cm;
}

DiscreteModel discretize_zoh(const ContinuousModel& cm, double ts) {
  if (!(ts > 0.0)) throw std::invalid_argument("ts must be > 0");
  Eigen::Matrix<double, 8, 8> aug = Eigen::Matrix<double, 8, 8>::Zero();
  aug.block<4, 4>(0, 0) = cm.ac * ts;
  aug.block<4, 2>(0, 4) = cm.bc * ts;
  aug.block<4, 2>(0, 6) = cm.ec * ts;
  const Eigen::Matrix<double, 8, 8> ex = aug.exp();
  DiscreteModel dm;
  dm.a = ex.block<4, 4>(0, 0);
  dm.b = ex.block<4, 2>(0, 4);
  dm.e = ex.block<4, 2>(0, 6);
  dm.c = cm.c;
  require_finite(dm.a, "discretize_zoh A");
  require_finite(dm.b, "discretize_zoh B");
  require_finite(dm.e, "discretize_zoh E");
  return dm;
}

DiscreteModel nominal_model(const FilterParams& p) {
  return discretize_zoh(continuous_matrices(p), p.ts);
}

bool is_controllable(const DiscreteModel& m, double tol) {
  Eigen::Matrix<double, 4, 8> ctrb;
  Mat42 blk = m.b;
  for (int i = 0; i < 4; ++i) {
    ctrb.block<4, 2>(0, 2 * i) = blk;
    blk = m.a * blk;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 4, 8>> svd(ctrb);
  const auto& sv = svd.singularValues();
  return sv(3) > tol * sv(0);
}

DiscreteModel apply_uncertainty(const FilterParams& p, const Deltas& d,
                                const UncertaintyBounds& bounds) {
  bounds.validate();
  const double slack = 1e-12;
  if (std::abs(d.dr) > bounds.delta_r_frac * p.r_f * (1.0 + slack) + slack)
    throw std::invalid_argument("dr outside uncertainty bounds");
  if (std::abs(d.dc) > bounds.delta_c_frac * p.c_f * (1.0 + slack))
    throw std::invalid_argument("dc outside uncertainty bounds");
  if (std::abs(d.dl) > bounds.delta_l_frac * p.l_f * (1.0 + slack))
    throw std::invalid_argument("dl outside uncertainty bounds");
  return apply_uncertainty(p, d);
}

DiscreteModel apply_uncertainty(const FilterParams& p, const Deltas& d) {
  FilterParams q = p;
  q.r_f += d.dr;
  q.l_f += d.dl;
  q.c_f += d.dc;
  if (!(q.l_f > 0.0)) throw std::invalid_argument("perturbed l_f must be > 0");
  if (!(q.c_f > 0.0)) throw std::invalid_argument("perturbed c_f must be > 0");
  if (!(q.r_f >= 0.0)) throw std::invalid_argument("perturbed r_f must be >= 0");
  return nominal_model(q);
}

PlantState step_true_plant(const DiscreteModel& nominal, const DiscreteModel& perturbed,
                           const PlantState& s, const Eigen::Vector2d& u,
                           const Eigen::Vector2d& i_load) {
  if (!s.x.allFinite() || !u.allFinite() || !i_load.allFinite())
    throw std::invalid_argument("step_true_plant: non-finite input");
  PlantState next = s;
  next.x = nominal.a * s.x + nominal.b * u + nominal.e * i_load +
           realized_w2(nominal, perturbed, s.x, u, i_load);
  return next;
}

StateVec4 realized_w2(const DiscreteModel& nominal, const DiscreteModel& perturbed,
                      const StateVec4& x, const Eigen::Vector2d& u,
                      const Eigen::Vector2d& i_load) {
  return (perturbed.a - nominal.a) * x + (perturbed.b - nominal.b) * u +
         (perturbed.e - nominal.e) * i_load;
}

Eigen::Vector2d park(const Eigen::Vector3d& abc, double theta) {
  const double k = 2.0 / 3.0;
  const double d = k * (abc(0) * std::cos(theta) + abc(1) * std::cos(theta - kTwoPiOver3) +
                        abc(2) * std::cos(theta + kTwoPiOver3));
  const double q = -k * (abc(0) * std::sin(theta) + abc(1) * std::sin(theta - kTwoPiOver3) +
                         abc(2) * std::sin(theta + kTwoPiOver3));
  return {d, q};
}

Eigen::Vector3d inverse_park(const Eigen::Vector2d& dq, double theta) {
  auto phase = [&](double shift) {
    return dq(0) * std::cos(theta + shift) - dq(1) * std::sin(theta + shift);
  };
  return {phase(0.0), phase(-kTwoPiOver3), phase(kTwoPiOver3)};
}

ParameterDrift::ParameterDrift(const FilterParams& p, const UncertaintyBounds& b,
                               std::uint64_t seed, double period_s)
    : r_amp_(b.delta_r_frac * p.r_f),
      c_amp_(b.delta_c_frac * p.c_f),
      l_amp_(b.delta_l_frac * p.l_f),
      period_(period_s) {
  b.validate();
  if (!(period_s > 0.0)) throw std::invalid_argument("drift period must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  phase_r_ = phase(rng);
  phase_c_ = phase(rng);
  phase_l_ = phase(rng);
}

Deltas ParameterDrift::at(double t) const {
  const double w = 2.0 * std::numbers::pi / period_;
  return {r_amp_ * std::sin(w * t + phase_r_), c_amp_ * std::sin(w * t + phase_c_),
          l_amp_ * std::sin(w * t + phase_l_)};
}

}  // namespace lrmpc::dqplant
