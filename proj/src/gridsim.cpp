#include "lrmpc/gridsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <locale>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lrmpc::gridsim {

using cplx = std::complex<double>;
using convexsets::Box;
using convexsets::Zonotope;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

cplx to_c(const Eigen::Vector2d& v) { return {v(0), v(1)}; }
Eigen::Vector2d from_c(cplx c) { return {c.real(), c.imag()}; }

cplx rated_power(double s_rated, double pf) { return {s_rated * pf, s_rated * std::sqrt(std::max(0.0, 1.0 - pf * pf))}; }

bool active(const LoadModel& l, double t) { return t >= l.connect_time; }

double ramp_factor(const LoadModel& l, double t) {
  if (l.ramp_time <= 0.0) return 1.0;
  return std::clamp((t - l.connect_time) / l.ramp_time, 0.0, 1.0);
}

Eigen::Vector2d total_load(const std::vector<LoadModel>& loads, std::vector<LoadState>& states,
                           const Eigen::Vector2d& v, double t, double omega0) {
  Eigen::Vector2d i = Eigen::Vector2d::Zero();
  for (size_t j = 0; j < loads.size(); ++j)
    if (active(loads[j], t))
      i += ramp_factor(loads[j], t) * load_current(loads[j], v, t, omega0, kBaseVoltagePeak, &states[j]);
  return i;
}

// Windowed GP on the gap between the interval-average and the sampled load
// current. The forecast of the average current is the sample plus this gap.
class ResidualForecaster {
 public:
  ResidualForecaster(const LearnerConfig& cfg, double ts) : cfg_(cfg), ts_(ts), ds_(cfg.window_cap) {
    grid_ = cfg.grid;
    for (double& l : grid_.lambda) l *= ts;
    for (int c = 0; c < 2; ++c) hp_[c] = gpregress::GpHyperparams{grid_.h.front(), grid_.lambda.front(), grid_.sigma_n2};
    if (cfg.fixed_hp) {
      gpregress::GpHyperparams hp = *cfg.fixed_hp;
      hp.lambda *= ts;
      hp_ = {hp, hp};
      fitted_ = true;
    }
  }

  void add(double t, const Eigen::Vector2d& gap) { ds_.update(t, gap); }

  gpregress::GpPrediction predict(double t_now, int step) {
    gpregress::GpPrediction out;
    const int n = ds_.size();
    if (n < std::max(cfg_.min_points, 8)) {
      for (int c = 0; c < 2; ++c) {
        double var = cfg_.fixed_hp ? cfg_.fixed_hp->sigma_n2 : grid_.sigma_n2;
        if (n >= 2) {
          const Eigen::VectorXd y = ds_.channel(c);
          const double m = y.mean();
          var += (y.array() - m).square().sum() / (n - 1);
          out.mu_star(c) = m;
        }
        out.sigma2_star(c, c) = var;
      }
      return out;
    }
    const Eigen::VectorXd t = ds_.times();
    if (!cfg_.fixed_hp && (!fitted_ || step - last_fit_ >= cfg_.refit_every)) {
      for (int c = 0; c < 2; ++c) {
        const Eigen::VectorXd y = ds_.channel(c);
        hp_[c] = gpregress::fit_hyperparams(t, y, grid_, y.mean()).hp;
      }
      fitted_ = true;
      last_fit_ = step;
    }
    for (int c = 0; c < 2; ++c) {
      const Eigen::VectorXd y = ds_.channel(c);
      const auto p = models_[c].predict(t, y, hp_[c], t_now, y.mean());
      out.mu_star(c) = p.mean;
      out.sigma2_star(c, c) = p.variance;
      if (p.variance_clamped) ++out.clamped_channels;
    }
    return out;
  }

  void record_mean(const Eigen::Vector2d& mu) { ds_.record_mean(mu); }
  double delta_mu() const { return ds_.delta_mu(); }

 private:
  LearnerConfig cfg_;
  double ts_;
  gpregress::GpDataset ds_;
  gpregress::HyperGrid grid_;
  std::array<gpregress::GpHyperparams, 2> hp_;
  std::array<gpregress::GpModel, 2> models_;
  bool fitted_ = false;
  int last_fit_ = 0;
};

constexpr double kMinSetScale = 1e-3;

struct Unit {
  dqplant::PlantState plant;
  std::optional<tubempc::TubeController> ctrl;
  std::optional<ResidualForecaster> fc;
  std::optional<dqplant::ParameterDrift> drift;
  Eigen::Vector2d pi_integral = Eigen::Vector2d::Zero();
  Eigen::Vector2d u_prev = Eigen::Vector2d::Zero();
  Eigen::Vector4d xm_prev = Eigen::Vector4d::Zero();
  Zonotope w_prev;
  bool have_prev = false;
  bool had_feasible = false;
  Eigen::Vector2d i_s_last = Eigen::Vector2d::Zero();
  double w_scale = 1.0;
};

struct ControlOutput {
  Eigen::Vector2d u;
  tubempc::StepResult step;
  bool has_step = false;
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  Eigen::Vector2d sigma2 = Eigen::Vector2d::Zero();
  double w_scale = 1.0;
};

Zonotope point_set(const Eigen::Vector4d& c) { return Zonotope::point(c); }

// One controller evaluation for a unit given the measured state and sampled load current.
ControlOutput control(Unit& unit, const SingleDgScenario& sc, ControllerKind kind,
                      const dqplant::DiscreteModel& nominal, const Eigen::Vector4d& x_m, const Eigen::Vector2d& i_s,
                      const Eigen::Vector2d& v_ref, double t, int step, Zonotope& w_hat_out) {
  ControlOutput out;
  const auto& p = sc.plant;
  if (kind == ControllerKind::pi) {
    const Eigen::Vector2d v = x_m.head<2>();
    const Eigen::Vector2d i = x_m.tail<2>();
    const Eigen::Vector2d ev = v_ref - v;
    unit.pi_integral += sc.pi.ki * p.ts * ev;
    const Eigen::Vector2d i_ref = i_s - p.omega0 * p.c_f * Eigen::Vector2d(v(1), -v(0)) + sc.pi.kp * ev + unit.pi_integral;
    Eigen::Vector2d u = v + p.r_f * i - p.l_f * p.omega0 * Eigen::Vector2d(i(1), -i(0)) + sc.pi.kc * (i_ref - i);
    out.u = u.cwiseMax(sc.tube.u_box.lower).cwiseMin(sc.tube.u_box.upper);
    out.mu = i_s;
    w_hat_out = point_set(nominal.e * i_s);
    return out;
  }
  Zonotope w_hat;
  if (kind == ControllerKind::lrmpc) {
    const auto gap = unit.fc->predict(t, step);
    gpregress::GpPrediction pred = gap;
    pred.mu_star = i_s + gap.mu_star;
    unit.fc->record_mean(pred.mu_star);
    gpregress::DisturbanceSetParams sp = gpregress::DisturbanceSetParams::with_confidence(sc.learner.confidence);
    sp.delta_mu = unit.fc->delta_mu();
    sp.l2_bound = sc.bounds.l2_inf_bound;
    sp.additive_radius = sc.learner.additive_radius;
    w_hat = tubempc::disturbance_zonotope(nominal, gpregress::build_w_hat(pred, sp));
    out.mu = pred.mu_star;
    out.sigma2 = pred.sigma2_star.diagonal();
  } else if (kind == ControllerKind::rmpc) {
    gpregress::WHat wh{convexsets::Ellipsoid(i_s, Eigen::Matrix2d::Identity() * sc.rmpc_w1_half_width * sc.rmpc_w1_half_width, 1.0),
                       Box::symmetric(Eigen::Vector4d::Constant(sc.bounds.l2_inf_bound))};
    w_hat = tubempc::disturbance_zonotope(nominal, wh);
    out.mu = i_s;
  } else {
    w_hat = point_set(nominal.e * i_s);
    out.mu = i_s;
  }
  const Eigen::Vector4d r = tubempc::compute_reference(v_ref, nominal, out.mu);
  // Largest scale of the set about its center for which the tube fits, searched
  // downward from slightly above the last accepted scale.
  double scale = std::min(1.0, unit.w_scale * 1.05);
  for (;;) {
    Zonotope trial = w_hat;
    trial.generators *= scale;
    try {
      out.step = unit.ctrl->step(x_m, trial, r);
      w_hat = trial;
      break;
    } catch (const tubempc::InfeasibleSetsError&) {
      if (kind == ControllerKind::mpc || scale < kMinSetScale) throw;
      scale = scale < 1e-2 ? 0.0 : scale * 0.7;
    }
  }
  unit.w_scale = std::max(scale, kMinSetScale);
  out.w_scale = scale;
  out.has_step = true;
  out.u = out.step.u_applied;
  w_hat_out = w_hat;
  return out;
}

int status_code(qpsolver::QpStatus s) {
  switch (s) {
    case qpsolver::QpStatus::optimal: return 0;
    case qpsolver::QpStatus::infeasible: return 1;
    case qpsolver::QpStatus::iteration_limit: return 2;
  }
  return -1;
}

void fill_monitor(StepRecord& rec, RunCounters& cnt, Unit& unit, const ControlOutput& co, bool inside_prev,
                  bool assumption_applicable) {
  if (!co.has_step) return;
  rec.w_hat_scale = co.w_scale;
  if (co.w_scale < 1.0) ++cnt.w_hat_reduced;
  const auto& m = co.step.monitor;
  ++cnt.qp_solves;
  rec.qp_status = status_code(m.qp_status);
  rec.fallback = m.fallback_used;
  if (m.fallback_used) ++cnt.fallbacks;
  // The recursive-feasibility and decrease guarantees assume the last
  // disturbance was inside the set, so they are only scored when it was.
  const bool hypothesis = inside_prev && assumption_applicable;
  if (m.qp_status == qpsolver::QpStatus::optimal) {
    unit.had_feasible = true;
  } else {
    ++cnt.qp_infeasible_events;
    if (unit.had_feasible && hypothesis) ++cnt.qp_infeasible_after_feasible;
  }
  rec.lyapunov_checked = m.lyapunov_checked && hypothesis;
  rec.lyapunov_ok = m.lyapunov_decrease_ok;
  if (rec.lyapunov_checked) {
    ++cnt.lyapunov_checked;
    if (!m.lyapunov_decrease_ok) ++cnt.lyapunov_violations;
  }
  rec.tube_checked = m.propagation_checked && hypothesis;
  rec.tube_ok = m.propagation_ok;
  if (rec.tube_checked) {
    ++cnt.tube_checked;
    if (!m.propagation_ok) ++cnt.tube_violations;
  }
  rec.candidate_checked = m.candidate_checked && hypothesis;
  rec.candidate_ok = m.candidate_feasible;
  if (rec.candidate_checked) {
    ++cnt.candidate_checked;
    if (!m.candidate_feasible) ++cnt.candidate_infeasible;
  }
  rec.x_nominal = co.step.x_nominal;
  rec.tube_half_widths = co.step.tube_half_widths;
}

Unit make_unit(const SingleDgScenario& sc, ControllerKind kind, const dqplant::DiscreteModel& nominal,
               std::uint64_t seed_offset) {
  Unit u;
  if (kind != ControllerKind::pi) {
    tubempc::TubeConfig cfg = sc.tube;
    if (kind == ControllerKind::mpc) cfg.robust = false;
    u.ctrl.emplace(nominal, cfg);
  }
  if (kind == ControllerKind::lrmpc) u.fc.emplace(sc.learner, sc.plant.ts);
  if (sc.drift) u.drift.emplace(sc.plant, sc.bounds, sc.seed * 7919 + 17 + seed_offset, sc.drift_period);
  return u;
}

dqplant::DiscreteModel substep_model(const Unit& u, const SingleDgScenario& sc, double t) {
  dqplant::FilterParams pp = sc.plant;
  if (u.drift) {
    const dqplant::Deltas d = u.drift->at(t);
    pp.r_f += d.dr;
    pp.c_f += d.dc;
    pp.l_f += d.dl;
  }
  return dqplant::discretize_zoh(dqplant::continuous_matrices(pp), sc.plant.ts / sc.substeps);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

LoadModel LoadModel::impedance(double s_rated, double pf, double connect_time) {
  LoadModel l;
  l.kind = LoadKind::constant_impedance;
  l.s_rated = s_rated;
  l.pf = pf;
  l.connect_time = connect_time;
  l.validate();
  return l;
}

LoadModel LoadModel::constant_power(double s_rated, double pf, double connect_time) {
  LoadModel l = impedance(s_rated, pf, connect_time);
  l.kind = LoadKind::constant_power;
  return l;
}

LoadModel LoadModel::harmonic(std::vector<HarmonicOrder> orders, double base_current, double connect_time) {
  LoadModel l;
  l.kind = LoadKind::harmonic;
  l.orders = std::move(orders);
  l.base_current = base_current;
  l.connect_time = connect_time;
  l.validate();
  return l;
}

double LoadModel::current_thd_percent() const {
  double s = 0.0;
  for (const auto& o : orders) s += o.magnitude * o.magnitude;
  return 100.0 * std::sqrt(s);
}

void LoadModel::validate() const {
  if (kind == LoadKind::harmonic) {
    if (!(base_current >= 0.0)) throw std::invalid_argument("LoadModel: base_current must be >= 0");
    for (const auto& o : orders) {
      if (o.order < 2) throw std::invalid_argument("LoadModel: harmonic order must be >= 2");
      if (!(o.magnitude >= 0.0)) throw std::invalid_argument("LoadModel: harmonic magnitude must be >= 0");
    }
  } else {
    if (!(s_rated > 0.0)) throw std::invalid_argument("LoadModel: s_rated must be > 0");
    if (!(pf > 0.0 && pf <= 1.0)) throw std::invalid_argument("LoadModel: pf must be in (0,1]");
  }
  if (!(connect_time >= 0.0)) throw std::invalid_argument("LoadModel: connect_time must be >= 0");
  if (!(ramp_time >= 0.0)) throw std::invalid_argument("LoadModel: ramp_time must be >= 0");
  if (!(response_time >= 0.0)) throw std::invalid_argument("LoadModel: response_time must be >= 0");
}

Eigen::Vector2d load_current(const LoadModel& load, const Eigen::Vector2d& v_dq, double t, double omega0,
                             double v_base, LoadState* state) {
  switch (load.kind) {
    case LoadKind::constant_impedance: {
      const cplx y = std::conj(rated_power(load.s_rated, load.pf)) / (1.5 * v_base * v_base);
      return from_c(y * to_c(v_dq));
    }
    case LoadKind::constant_power: {
      cplx v = to_c(v_dq);
      if (state && load.response_time > 0.0) {
        if (!state->started) {
          state->v_filtered = v_dq;
        } else {
          const double a = 1.0 - std::exp(-std::max(0.0, t - state->t_last) / load.response_time);
          state->v_filtered += a * (v_dq - state->v_filtered);
        }
        state->t_last = t;
        state->started = true;
        v = to_c(state->v_filtered);
      }
      if (std::abs(v) < 0.1 * v_base) {
        if (state) {
          ++state->floor_events;
          return state->held_current;
        }
        return Eigen::Vector2d::Zero();
      }
      const Eigen::Vector2d i = from_c(std::conj(rated_power(load.s_rated, load.pf)) / (1.5 * std::conj(v)));
      if (state) state->held_current = i;
      return i;
    }
    case LoadKind::harmonic: {
      const double th = omega0 * t;
      Eigen::Vector3d abc;
      const double shifts[3] = {0.0, -kTwoPi / 3.0, kTwoPi / 3.0};
      for (int ph = 0; ph < 3; ++ph) {
        const double a = th + shifts[ph];
        double s = std::cos(a);
        for (const auto& o : load.orders) s += o.magnitude * std::cos(o.order * a);
        abc(ph) = load.base_current * s;
      }
      return dqplant::park(abc, th);
    }
  }
  return Eigen::Vector2d::Zero();
}

std::pair<double, double> instantaneous_power(const Eigen::Vector2d& v, const Eigen::Vector2d& i) {
  return {1.5 * (v(0) * i(0) + v(1) * i(1)), 1.5 * (v(1) * i(0) - v(0) * i(1))};
}

double lowpass(double sample, LowPassState& st, double cutoff_hz, double ts) {
  if (!(cutoff_hz > 0.0) || !(ts > 0.0) || !(cutoff_hz < 0.5 / ts))
    throw std::invalid_argument("lowpass: cutoff must be in (0, 1/(2 ts))");
  const double wa = std::tan(std::numbers::pi * cutoff_hz * ts);
  const double b0 = wa / (1.0 + wa);
  const double a1 = (wa - 1.0) / (1.0 + wa);
  const double y = b0 * (sample + st.x_prev) - a1 * st.y_prev;
  st.x_prev = sample;
  st.y_prev = y;
  return y;
}

double ThdReport::max_thd() const { return *std::max_element(thd_percent.begin(), thd_percent.end()); }

ThdReport thd(const Eigen::MatrixXd& abc, double f0, double fs, int window_cycles, int max_order) {
  if (abc.cols() != 3) throw std::invalid_argument("thd: expected three phase columns");
  if (window_cycles < 1 || !(f0 > 0.0) || !(fs > 0.0)) throw std::invalid_argument("thd: invalid window");
  const double n_real = window_cycles * fs / f0;
  const int n = static_cast<int>(std::llround(n_real));
  if (std::abs(n_real - n) > 1e-9 * n_real)
    throw std::invalid_argument("thd: window is not an integer number of samples");
  if (fs < 2.0 * max_order * f0) throw std::invalid_argument("thd: sample rate too low for the highest order");
  if (abc.rows() < n) throw std::invalid_argument("thd: waveform shorter than the window");
  const int start = static_cast<int>(abc.rows()) - n;
  ThdReport rep;
  for (int ph = 0; ph < 3; ++ph) {
    std::vector<double> mag(max_order + 1, 0.0);
    for (int h = 1; h <= max_order; ++h) {
      const int bin = h * window_cycles;
      double re = 0.0, im = 0.0;
      for (int k = 0; k < n; ++k) {
        const double a = kTwoPi * bin * k / n;
        re += abc(start + k, ph) * std::cos(a);
        im -= abc(start + k, ph) * std::sin(a);
      }
      mag[h] = 2.0 * std::hypot(re, im) / n;
    }
    double hs = 0.0;
    for (int h = 2; h <= max_order; ++h) hs += mag[h] * mag[h];
    rep.thd_percent[ph] = mag[1] > 0.0 ? 100.0 * std::sqrt(hs) / mag[1] : 0.0;
    if (ph == 0) {
      rep.fundamental_rms = mag[1] / std::sqrt(2.0);
      for (int h = 1; h <= max_order; ++h) rep.harmonic_table.emplace_back(h, mag[h]);
    }
  }
  return rep;
}

const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::lrmpc: return "lrmpc";
    case ControllerKind::rmpc: return "rmpc";
    case ControllerKind::mpc: return "mpc";
    case ControllerKind::pi: return "pi";
  }
  return "?";
}

ControllerKind controller_from_string(const std::string& s) {
  if (s == "lrmpc") return ControllerKind::lrmpc;
  if (s == "rmpc") return ControllerKind::rmpc;
  if (s == "mpc") return ControllerKind::mpc;
  if (s == "pi") return ControllerKind::pi;
  throw std::invalid_argument("unknown controller kind: " + s);
}

PiGains PiGains::from_bandwidth(const dqplant::FilterParams& p, double bandwidth_hz, double integral_corner_hz,
                                double kc) {
  PiGains g;
  g.kp = p.c_f * kTwoPi * bandwidth_hz;
  g.ki = g.kp * kTwoPi * integral_corner_hz;
  g.kc = kc;
  return g;
}

int SingleDgScenario::num_steps() const { return static_cast<int>(std::llround(duration / plant.ts)); }

void SingleDgScenario::validate() const {
  plant.validate();
  bounds.validate();
  tube.validate();
  for (const auto& l : loads) l.validate();
  if (!(duration >= 0.0)) throw std::invalid_argument("duration must be >= 0");
  const double steps = duration / plant.ts;
  if (std::abs(steps - std::llround(steps)) > 1e-6) throw std::invalid_argument("duration must be a multiple of ts");
  if (!(noise_variance >= 0.0)) throw std::invalid_argument("noise_variance must be >= 0");
  if (substeps < 1) throw std::invalid_argument("substeps must be >= 1");
  if (!(drift_period > 0.0)) throw std::invalid_argument("drift_period must be > 0");
  if (!(rmpc_w1_half_width >= 0.0)) throw std::invalid_argument("rmpc_w1_half_width must be >= 0");
  if (thd_window_cycles < 1) throw std::invalid_argument("thd_window_cycles must be >= 1");
  if (learner.window_cap < 8 || learner.min_points < 1 || learner.refit_every < 1)
    throw std::invalid_argument("learner settings out of range");
  if (learner.fixed_hp) learner.fixed_hp->validate();
  if (!(learner.confidence > 0.0 && learner.confidence < 1.0))
    throw std::invalid_argument("learner confidence must be in (0,1)");
}

int RunCounters::monitor_violations() const {
  return qp_infeasible_after_feasible + lyapunov_violations + tube_violations + candidate_infeasible;
}

std::string trace_csv_header() {
  return "step,dg,t,vd,vq,ifd,ifq,xn_vd,xn_vq,xn_ifd,xn_ifq,ud,uq,iod,ioq,mu_d,mu_q,s2_d,s2_q,"
         "tube_vd,tube_vq,tube_ifd,tube_ifq,va,vb,vc,qp_status,fallback,lyap_checked,lyap_ok,"
         "tube_checked,tube_ok,cand_checked,cand_ok,w_inside,w_scale,p,q,f";
}

void write_trace_csv(const SimTrace& tr, std::ostream& os) {
  os << trace_csv_header() << '\n';
  for (const auto& r : tr.rows) {
    std::ostringstream line;
    line.imbue(std::locale::classic());
    line << r.step << ',' << r.dg << ',' << fmt(r.t);
    auto put = [&](const auto& v) {
      for (int i = 0; i < v.size(); ++i) line << ',' << fmt(v(i));
    };
    put(r.x_true);
    put(r.x_nominal);
    put(r.u);
    put(r.i_load);
    put(r.mu);
    put(r.sigma2);
    put(r.tube_half_widths);
    put(r.v_abc);
    line << ',' << r.qp_status << ',' << int(r.fallback) << ',' << int(r.lyapunov_checked) << ','
         << int(r.lyapunov_ok) << ',' << int(r.tube_checked) << ',' << int(r.tube_ok) << ','
         << int(r.candidate_checked) << ',' << int(r.candidate_ok) << ',' << int(r.disturbance_inside) << ','
         << fmt(r.w_hat_scale) << ',' << fmt(r.p) << ',' << fmt(r.q) << ',' << fmt(r.f);
    os << line.str() << '\n';
  }
}

Eigen::MatrixXd voltage_abc(const SimTrace& tr, int dg) {
  std::vector<Eigen::Vector3d> v;
  for (const auto& r : tr.rows)
    if (r.dg == dg) v.push_back(r.v_abc);
  Eigen::MatrixXd out(static_cast<int>(v.size()), 3);
  for (size_t i = 0; i < v.size(); ++i) out.row(static_cast<int>(i)) = v[i].transpose();
  return out;
}

ThdReport trace_thd(const SimTrace& tr, double f0, double ts, int window_cycles, int dg) {
  return thd(voltage_abc(tr, dg), f0, 1.0 / ts, window_cycles);
}

SimTrace run_single_dg(const SingleDgScenario& sc, ControllerKind kind) {
  sc.validate();
  SimTrace tr;
  tr.controller = kind;
  const auto& p = sc.plant;
  const dqplant::DiscreteModel nominal = dqplant::nominal_model(p);
  const int n_steps = sc.num_steps();
  std::mt19937_64 rng(sc.seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(sc.noise_variance));
  auto n2 = [&]() { return Eigen::Vector2d(noise(rng), noise(rng)); };
  auto n4 = [&]() { return Eigen::Vector4d(noise(rng), noise(rng), noise(rng), noise(rng)); };

  std::vector<LoadState> load_states(sc.loads.size());
  Unit unit;
  try {
    unit = make_unit(sc, kind, nominal, 0);
  } catch (const std::exception& e) {
    tr.failed = true;
    tr.diagnostic = std::string("controller construction failed: ") + e.what();
    return tr;
  }
  unit.plant.x = tubempc::compute_reference(sc.v_ref, nominal, Eigen::Vector2d::Zero());
  unit.u_prev = tubempc::steady_state_input(nominal, unit.plant.x, Eigen::Vector4d::Zero()).u_r;
  Eigen::Vector2d mu_delay = Eigen::Vector2d::Zero();
  const auto t_start = std::chrono::steady_clock::now();
  tr.rows.reserve(n_steps);

  for (int k = 0; k < n_steps; ++k) {
    const double t = k * p.ts;
    const Eigen::Vector4d x = unit.plant.x;
    const Eigen::Vector2d i_s = total_load(sc.loads, load_states, x.head<2>(), t, p.omega0) + n2();
    Eigen::Vector4d x_m = x + n4();

    bool inside_prev = false;
    if (unit.have_prev && sc.tube.robust && (kind == ControllerKind::lrmpc || kind == ControllerKind::rmpc) &&
        !sc.computational_delay) {
      const Eigen::Vector4d w_eff = x_m - nominal.a * unit.xm_prev - nominal.b * unit.u_prev;
      inside_prev = convexsets::contains(unit.w_prev, Eigen::VectorXd(w_eff), 1e-9);
      if (!inside_prev) ++tr.counters.disturbance_outside;
    }
    if (sc.computational_delay) x_m = nominal.a * x_m + nominal.b * unit.u_prev + nominal.e * mu_delay;

    StepRecord rec;
    ControlOutput co;
    Zonotope w_hat;
    try {
      co = control(unit, sc, kind, nominal, x_m, i_s, sc.v_ref, t, k, w_hat);
    } catch (const tubempc::InfeasibleSetsError& e) {
      tr.failed = true;
      tr.diagnostic = "step " + std::to_string(k) + ": " + e.what();
      break;
    }
    fill_monitor(rec, tr.counters, unit, co, inside_prev, !sc.computational_delay);
    if (!tr.rows.empty()) tr.rows.back().disturbance_inside = inside_prev;

    const Eigen::Vector2d u_apply = sc.computational_delay ? unit.u_prev : co.u;
    const dqplant::DiscreteModel sub = substep_model(unit, sc, t);
    Eigen::Vector2d acc = Eigen::Vector2d::Zero();
    Eigen::Vector4d xs = x;
    for (int q = 0; q < sc.substeps; ++q) {
      const double tq = t + (q + 0.5) * p.ts / sc.substeps;
      const Eigen::Vector2d i = total_load(sc.loads, load_states, xs.head<2>(), tq, p.omega0);
      xs = sub.a * xs + sub.b * u_apply + sub.e * i;
      acc += i / sc.substeps;
    }
    if (!xs.allFinite()) {
      tr.failed = true;
      tr.diagnostic = "step " + std::to_string(k) + ": plant state diverged";
      break;
    }
    unit.plant.x = xs;
    const Eigen::Vector4d w2 = xs - (nominal.a * x + nominal.b * u_apply + nominal.e * acc);
    tr.counters.max_l2_realized = std::max(tr.counters.max_l2_realized, w2.cwiseAbs().maxCoeff());
    if (unit.fc) unit.fc->add(t, acc + n2() - i_s);

    unit.xm_prev = x_m;
    unit.u_prev = co.u;
    unit.w_prev = w_hat;
    unit.have_prev = true;
    mu_delay = co.mu;

    rec.step = k;
    rec.dg = 0;
    rec.t = t + p.ts;
    rec.x_true = xs;
    rec.u = u_apply;
    rec.i_load = acc;
    rec.mu = co.mu;
    rec.sigma2 = co.sigma2;
    rec.v_abc = dqplant::inverse_park(xs.head<2>(), p.omega0 * (t + p.ts));
    const auto pq = instantaneous_power(xs.head<2>(), acc);
    rec.p = pq.first;
    rec.q = pq.second;
    rec.f = p.omega0 / kTwoPi;
    tr.rows.push_back(rec);
    ++tr.counters.steps;
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
  tr.counters.wall_ms_per_step = tr.counters.steps > 0 ? ms / tr.counters.steps : 0.0;
  return tr;
}

void DroopParams::validate() const {
  if (!(m > 0.0) || !(n > 0.0)) throw std::invalid_argument("DroopParams: m and n must be > 0");
  if (!(lpf_cutoff > 0.0)) throw std::invalid_argument("DroopParams: lpf_cutoff must be > 0");
  if (!(f_n > 0.0) || !(v_n > 0.0)) throw std::invalid_argument("DroopParams: f_n and v_n must be > 0");
}

void TwoDgScenario::validate() const {
  dg.validate();
  for (const auto& d : droop) d.validate();
  for (const auto& z : line_z)
    if (!(z.real() >= 0.0) || std::abs(z) == 0.0) throw std::invalid_argument("TwoDgScenario: invalid line impedance");
  if (!(transformer_ratio > 0.0)) throw std::invalid_argument("TwoDgScenario: transformer_ratio must be > 0");
  for (const auto& l : loads) {
    l.validate();
    if (l.kind == LoadKind::harmonic) throw std::invalid_argument("TwoDgScenario: harmonic loads are not supported");
  }
  if (!(duration > 0.0)) throw std::invalid_argument("TwoDgScenario: duration must be > 0");
}

double TwoDgSummary::balance_error() const {
  const double ref = p_load + p_line_loss;
  return ref != 0.0 ? std::abs(p_avg[0] + p_avg[1] - ref) / std::abs(ref) : 0.0;
}

namespace {

struct NetworkSolution {
  cplx v_bus;
  std::array<cplx, 2> i_line;
  cplx i_load;
};

NetworkSolution solve_network(const std::array<cplx, 2>& emf, const std::array<cplx, 2>& z,
                              const std::vector<LoadModel>& loads, double t, cplx v_guess) {
  cplx y_load = 0.0;
  cplx s_cpl = 0.0;
  for (const auto& l : loads) {
    if (!active(l, t)) continue;
    const double g = ramp_factor(l, t);
    if (l.kind == LoadKind::constant_impedance)
      y_load += g * std::conj(rated_power(l.s_rated, l.pf)) / (1.5 * kBaseVoltagePeak * kBaseVoltagePeak);
    else if (l.kind == LoadKind::constant_power)
      s_cpl += g * rated_power(l.s_rated, l.pf);
  }
  const cplx y_sum = 1.0 / z[0] + 1.0 / z[1] + y_load;
  if (std::abs(y_sum) == 0.0) throw std::runtime_error("solve_network: singular network matrix");
  const cplx inj = emf[0] / z[0] + emf[1] / z[1];
  cplx v = (std::abs(v_guess) > 0.1 * kBaseVoltagePeak) ? v_guess : inj / y_sum;
  for (int it = 0; it < 100; ++it) {
    const cplx i_cpl = (s_cpl == 0.0) ? cplx(0.0) : std::conj(s_cpl) / (1.5 * std::conj(v));
    const cplx v_new = (inj - i_cpl) / y_sum;
    const bool done = std::abs(v_new - v) <= 1e-12 * kBaseVoltagePeak;
    v = v_new;
    if (done) break;
  }
  NetworkSolution out;
  out.v_bus = v;
  for (int i = 0; i < 2; ++i) out.i_line[i] = (emf[i] - v) / z[i];
  out.i_load = out.i_line[0] + out.i_line[1];
  return out;
}

}  // namespace

SimTrace run_two_dg(const TwoDgScenario& sc, ControllerKind kind, TwoDgSummary* summary) {
  sc.validate();
  SimTrace tr;
  tr.controller = kind;
  tr.num_dgs = 2;
  const SingleDgScenario& base = sc.dg;
  const auto& p = base.plant;
  const dqplant::DiscreteModel nominal = dqplant::nominal_model(p);
  const int n_steps = static_cast<int>(std::llround(sc.duration / p.ts));
  std::mt19937_64 rng(base.seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(base.noise_variance));
  auto n2 = [&]() { return Eigen::Vector2d(noise(rng), noise(rng)); };
  auto n4 = [&]() { return Eigen::Vector4d(noise(rng), noise(rng), noise(rng), noise(rng)); };

  const double ratio2 = sc.transformer_ratio * sc.transformer_ratio;
  const std::array<cplx, 2> z{sc.line_z[0] / ratio2, sc.line_z[1] / ratio2};
  std::array<Unit, 2> units;
  std::array<double, 2> delta{0.0, 0.0};
  std::array<LowPassState, 2> lp_p{}, lp_q{};
  std::array<double, 2> p_f{0.0, 0.0}, q_f{0.0, 0.0};
  for (int i = 0; i < 2; ++i) {
    try {
      units[i] = make_unit(base, kind, nominal, static_cast<std::uint64_t>(i) * 1000003ULL);
    } catch (const std::exception& e) {
      tr.failed = true;
      tr.diagnostic = std::string("controller construction failed: ") + e.what();
      return tr;
    }
    units[i].plant.x = tubempc::compute_reference(Eigen::Vector2d(sc.droop[i].v_n, 0.0), nominal, Eigen::Vector2d::Zero());
  }
  cplx v_bus = sc.droop[0].v_n;
  const double f0 = p.omega0 / kTwoPi;
  const int avg_from = n_steps - std::max(1, static_cast<int>(std::llround(0.1 / p.ts)));
  double p_load_acc = 0.0, loss_acc = 0.0;
  int avg_count = 0;
  std::array<double, 2> p_acc{0.0, 0.0}, q_acc{0.0, 0.0}, f_acc{0.0, 0.0};
  const auto t_start = std::chrono::steady_clock::now();

  for (int k = 0; k < n_steps && !tr.failed; ++k) {
    const double t = k * p.ts;
    std::array<double, 2> f{}, v_ref_mag{};
    std::array<cplx, 2> emf{};
    for (int i = 0; i < 2; ++i) {
      f[i] = sc.droop[i].f_n - sc.droop[i].m * p_f[i] * 1e-6;
      v_ref_mag[i] = sc.droop[i].v_n - sc.droop[i].n * q_f[i] * 1e-6;
      emf[i] = std::polar(v_ref_mag[i], delta[i]);
    }
    NetworkSolution net;
    try {
      net = solve_network(emf, z, sc.loads, t, v_bus);
    } catch (const std::exception& e) {
      tr.failed = true;
      tr.diagnostic = e.what();
      break;
    }
    std::array<ControlOutput, 2> co;
    std::array<Eigen::Vector2d, 2> u_apply;
    for (int i = 0; i < 2; ++i) {
      Unit& u = units[i];
      const Eigen::Vector2d i_s = from_c(net.i_line[i] * std::polar(1.0, -delta[i])) + n2();
      u.i_s_last = i_s;
      const Eigen::Vector4d x_m = u.plant.x + n4();
      bool inside_prev = false;
      if (u.have_prev && (kind == ControllerKind::lrmpc || kind == ControllerKind::rmpc) && base.tube.robust) {
        const Eigen::Vector4d w_eff = x_m - nominal.a * u.xm_prev - nominal.b * u.u_prev;
        inside_prev = convexsets::contains(u.w_prev, Eigen::VectorXd(w_eff), 1e-9);
        if (!inside_prev) ++tr.counters.disturbance_outside;
      }
      Zonotope w_hat;
      try {
        co[i] = control(u, base, kind, nominal, x_m, i_s, Eigen::Vector2d(v_ref_mag[i], 0.0), t, k, w_hat);
      } catch (const tubempc::InfeasibleSetsError& e) {
        tr.failed = true;
        tr.diagnostic = "step " + std::to_string(k) + " dg " + std::to_string(i) + ": " + e.what();
        break;
      }
      StepRecord rec;
      fill_monitor(rec, tr.counters, u, co[i], inside_prev, true);
      u.xm_prev = x_m;
      u.w_prev = w_hat;
      u.have_prev = true;
      u_apply[i] = co[i].u;
      rec.step = k;
      rec.dg = i;
      rec.mu = co[i].mu;
      rec.sigma2 = co[i].sigma2;
      tr.rows.push_back(rec);
    }
    if (tr.failed) break;

    std::array<Eigen::Vector4d, 2> x_old{units[0].plant.x, units[1].plant.x};
    std::array<Eigen::Vector2d, 2> acc{Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
    std::array<dqplant::DiscreteModel, 2> sub{substep_model(units[0], base, t), substep_model(units[1], base, t)};
    for (int q = 0; q < base.substeps; ++q) {
      const double tq = t + (q + 0.5) * p.ts / base.substeps;
      const NetworkSolution nq = solve_network(emf, z, sc.loads, tq, net.v_bus);
      for (int i = 0; i < 2; ++i) {
        const Eigen::Vector2d io = from_c(nq.i_line[i] * std::polar(1.0, -delta[i]));
        units[i].plant.x = sub[i].a * units[i].plant.x + sub[i].b * u_apply[i] + sub[i].e * io;
        acc[i] += io / base.substeps;
      }
    }
    v_bus = net.v_bus;
    for (int i = 0; i < 2; ++i) {
      Unit& u = units[i];
      if (!u.plant.x.allFinite()) {
        tr.failed = true;
        tr.diagnostic = "step " + std::to_string(k) + ": plant state diverged";
        break;
      }
      const Eigen::Vector4d w2 = u.plant.x - (nominal.a * x_old[i] + nominal.b * u_apply[i] + nominal.e * acc[i]);
      tr.counters.max_l2_realized = std::max(tr.counters.max_l2_realized, w2.cwiseAbs().maxCoeff());
      const Eigen::Vector2d avg_noise = n2();
      if (u.fc) u.fc->add(t, acc[i] + avg_noise - u.i_s_last);
      u.u_prev = u_apply[i];
      const auto pq = instantaneous_power(u.plant.x.head<2>(), acc[i]);
      p_f[i] = lowpass(pq.first, lp_p[i], sc.droop[i].lpf_cutoff, p.ts);
      q_f[i] = lowpass(pq.second, lp_q[i], sc.droop[i].lpf_cutoff, p.ts);
      StepRecord& rec = tr.rows[tr.rows.size() - 2 + i];
      rec.t = t + p.ts;
      rec.x_true = u.plant.x;
      rec.u = u_apply[i];
      rec.i_load = acc[i];
      rec.v_abc = dqplant::inverse_park(u.plant.x.head<2>(), p.omega0 * (t + p.ts) + delta[i]);
      rec.p = p_f[i];
      rec.q = q_f[i];
      rec.f = f[i];
      delta[i] += kTwoPi * (f[i] - f0) * p.ts;
    }
    tr.counters.steps += 1;
    if (k >= avg_from) {
      ++avg_count;
      for (int i = 0; i < 2; ++i) {
        p_acc[i] += p_f[i];
        q_acc[i] += q_f[i];
        f_acc[i] += f[i];
        loss_acc += 1.5 * std::norm(net.i_line[i]) * z[i].real();
      }
      p_load_acc += 1.5 * (net.v_bus * std::conj(net.i_load)).real();
    }
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
  tr.counters.wall_ms_per_step = tr.counters.steps > 0 ? ms / tr.counters.steps : 0.0;
  if (summary && avg_count > 0) {
    for (int i = 0; i < 2; ++i) {
      summary->p_avg[i] = p_acc[i] / avg_count;
      summary->q_avg[i] = q_acc[i] / avg_count;
      summary->f_avg[i] = f_acc[i] / avg_count;
    }
    summary->p_load = p_load_acc / avg_count;
    summary->p_line_loss = loss_acc / avg_count;
  }
  return tr;
}

namespace {

bool settling(const std::vector<LoadModel>& loads, double t, double ts, double settle_s) {
  for (const auto& l : loads)
    if (l.connect_time > t - settle_s - 1e-12 && l.connect_time <= t + ts + 1e-12) return true;
  return false;
}

template <class Fn>
void for_each_steady_row(const std::vector<SingleDgScenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                         bool noisy, double settle_s, const char* who, Fn fn) {
  for (const auto& base : scenarios) {
    for (auto seed : seeds) {
      SingleDgScenario sc = base;
      sc.seed = seed;
      if (!noisy) sc.noise_variance = 0.0;
      const SimTrace tr = run_single_dg(sc, ControllerKind::pi);
      if (tr.failed) throw std::runtime_error(std::string(who) + ": run failed: " + tr.diagnostic);
      const dqplant::DiscreteModel nominal = dqplant::nominal_model(sc.plant);
      Eigen::Vector4d x_prev = tubempc::compute_reference(sc.v_ref, nominal, Eigen::Vector2d::Zero());
      for (const auto& r : tr.rows) {
        const double t0 = r.t - sc.plant.ts;
        if (!settling(sc.loads, t0, sc.plant.ts, settle_s)) fn(nominal, x_prev, r);
        x_prev = r.x_true;
      }
    }
  }
}

}  // namespace

double calibrate_l2(const std::vector<SingleDgScenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                    double inflation, double settle_s) {
  double worst = 0.0;
  for_each_steady_row(scenarios, seeds, true, settle_s, "calibrate_l2",
                      [&](const dqplant::DiscreteModel& m, const Eigen::Vector4d& x_prev, const StepRecord& r) {
                        const Eigen::Vector4d w2 = r.x_true - (m.a * x_prev + m.b * r.u + m.e * r.i_load);
                        worst = std::max(worst, w2.cwiseAbs().maxCoeff());
                      });
  return worst * inflation;
}

double calibrate_rmpc_box(const std::vector<SingleDgScenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                          double inflation, double settle_s) {
  double worst = 0.0;
  for_each_steady_row(scenarios, seeds, false, settle_s, "calibrate_rmpc_box",
                      [&](const dqplant::DiscreteModel&, const Eigen::Vector4d&, const StepRecord& r) {
                        worst = std::max(worst, (r.i_load - r.mu).cwiseAbs().maxCoeff());
                      });
  return worst * inflation;
}

}  // namespace lrmpc::gridsim
