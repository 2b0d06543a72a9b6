#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numbers>

namespace lrmpc::dqplant {

using StateVec4 = Eigen::Vector4d;  // [Vd, Vq, Ifd, Ifq]
using Mat4 = Eigen::Matrix4d;
using Mat42 = Eigen::Matrix<double, 4, 2>;
using Mat24 = Eigen::Matrix<double, 2, 4>;

struct FilterParams {
  double r_f = 1.5e-3;
  double l_f = 1.0e-3;
  double c_f = 100.0e-6;
  double omega0 = 2.0 * std::numbers::pi * 60.0;
  double ts = 250.0e-6;

  void validate() const;
};

struct UncertaintyBounds {
  double delta_r_frac = 0.1;
  double delta_c_frac = 0.1;
  double delta_l_frac = 0.2;
  double l2_inf_bound = 0.0;

  void validate() const;
};

// Realized parameter deviations in physical units (ohm, farad, henry).
struct Deltas {
  double dr = 0.0;
  double dc = 0.0;
  double dl = 0.0;
};

struct ContinuousModel {
  Mat4 ac;
  Mat42 bc;
  Mat42 ec;
  Mat24 c;
};

struct DiscreteModel {
  Mat4 a;
  Mat42 b;
  Mat42 e;
  Mat24 c;
};

struct PlantState {
  StateVec4 x = StateVec4::Zero();
  Deltas deltas;
};

ContinuousModel continuous_matrices(const FilterParams& p);

// Exact zero-order-hold discretization through the augmented matrix exponential.
DiscreteModel discretize_zoh(const ContinuousModel& cm, double ts);

DiscreteModel nominal_model(const FilterParams& p);

bool is_controllable(const DiscreteModel& m, double tol = 1e-9);

// Model built from R_f + dr, L_f + dl, C_f + dc. Throws if deltas leave the
// bounds or make L_f or C_f non-positive.
DiscreteModel apply_uncertainty(const FilterParams& p, const Deltas& d,
                                const UncertaintyBounds& bounds);
DiscreteModel apply_uncertainty(const FilterParams& p, const Deltas& d);

// x+ = A x + B u + E i + dA x + dB u + dE i, where dA, dB, dE are the
// perturbed-minus-nominal matrices.
PlantState step_true_plant(const DiscreteModel& nominal, const DiscreteModel& perturbed,
                           const PlantState& s, const Eigen::Vector2d& u,
                           const Eigen::Vector2d& i_load);

// w2 realized by a perturbed model relative to the nominal one.
StateVec4 realized_w2(const DiscreteModel& nominal, const DiscreteModel& perturbed,
                      const StateVec4& x, const Eigen::Vector2d& u,
                      const Eigen::Vector2d& i_load);

// Amplitude-invariant Park transform: d + jq = 2/3 (a + alpha b + alpha^2 c) e^{-j theta}.
Eigen::Vector2d park(const Eigen::Vector3d& abc, double theta);
Eigen::Vector3d inverse_park(const Eigen::Vector2d& dq, double theta);

// Slow, seeded sinusoidal drift of the filter parameters inside the bounds.
class ParameterDrift {
 public:
  ParameterDrift(const FilterParams& p, const UncertaintyBounds& b, std::uint64_t seed,
                 double period_s = 0.5);
  Deltas at(double t) const;

 private:
  double r_amp_, c_amp_, l_amp_;
  double period_;
  double phase_r_, phase_c_, phase_l_;
};

}  // namespace lrmpc::dqplant
