#include "lrmpc/scenario.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

namespace lrmpc::scenario {

using gridsim::ControllerKind;
using gridsim::DroopParams;
using gridsim::HarmonicOrder;
using gridsim::LoadKind;
using gridsim::LoadModel;

ConfigError::ConfigError(const std::string& msg, int line, std::string field)
    : std::invalid_argument(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
      line_(line),
      field_(std::move(field)) {}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

// Shortest representation that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string num(std::int64_t v) { return std::to_string(v); }

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("invalid number '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("invalid integer '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("invalid unsigned integer '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string boolstr(bool b) { return b ? "true" : "false"; }

std::vector<double> parse_doubles(const std::string& s, size_t expected) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  if (expected > 0 && out.size() != expected)
    throw std::invalid_argument("expected " + std::to_string(expected) + " comma-separated numbers");
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of numbers");
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + num(v[i]);
  return out;
}

// f0 is stored as omega0; pick the decimal that maps back to the same omega0.
// Shortest decimal frequency whose product with 2 pi reproduces omega0 exactly.
std::string f0_string(double omega0) {
  const double f = omega0 / kTwoPi;
  for (int prec = 1; prec <= 17; ++prec) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.*g", prec, f);
    if (parse_double(buf) * kTwoPi == omega0) return num(parse_double(buf));
  }
  double g = f;
  for (int i = 0; i < 8; ++i) {
    if (parse_double(num(g)) * kTwoPi == omega0) return num(g);
    g = std::nextafter(g, (g * kTwoPi < omega0) ? std::numeric_limits<double>::infinity() : 0.0);
  }
  return num(f);
}

std::string controllers_string(const std::vector<ControllerKind>& ks) {
  std::string out;
  for (size_t i = 0; i < ks.size(); ++i) out += std::string(i ? ", " : "") + gridsim::to_string(ks[i]);
  return out;
}

const char* kind_string(LoadKind k) {
  switch (k) {
    case LoadKind::constant_impedance: return "impedance";
    case LoadKind::constant_power: return "constant_power";
    case LoadKind::harmonic: return "harmonic";
  }
  return "?";
}

LoadKind kind_from_string(const std::string& s) {
  if (s == "impedance") return LoadKind::constant_impedance;
  if (s == "constant_power") return LoadKind::constant_power;
  if (s == "harmonic") return LoadKind::harmonic;
  throw std::invalid_argument("unknown load kind '" + s + "' (impedance, constant_power, harmonic)");
}

std::string orders_string(const std::vector<HarmonicOrder>& o) {
  std::string out;
  for (size_t i = 0; i < o.size(); ++i) out += (i ? ", " : "") + std::to_string(o[i].order) + ":" + num(o[i].magnitude);
  return out;
}

std::vector<HarmonicOrder> parse_orders(const std::string& s) {
  std::vector<HarmonicOrder> out;
  if (trim(s).empty()) return out;
  for (const auto& item : split_list(s)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("harmonic entries are order:magnitude");
    out.push_back({static_cast<int>(parse_int(trim(item.substr(0, colon)))), parse_double(trim(item.substr(colon + 1)))});
  }
  return out;
}

template <class T>
struct Field {
  std::string key;
  std::function<void(T&, const std::string&)> set;
  std::function<std::string(const T&)> get;
};

template <class T>
Field<T> dbl(std::string key, double T::*member) {
  return {std::move(key), [member](T& t, const std::string& v) { t.*member = parse_double(v); },
          [member](const T& t) { return num(t.*member); }};
}

using Cfg = ScenarioConfig;

Eigen::VectorXd diag_of(const Eigen::MatrixXd& m) { return m.diagonal(); }

std::vector<double> to_vec(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::vector<std::pair<std::string, std::vector<Field<Cfg>>>> sections() {
  std::vector<std::pair<std::string, std::vector<Field<Cfg>>>> s;
  s.push_back({"scenario",
               {{"name", [](Cfg& c, const std::string& v) { c.name = v; }, [](const Cfg& c) { return c.name; }},
                {"mode",
                 [](Cfg& c, const std::string& v) {
                   if (v == "single_dg") c.mode = Mode::single_dg;
                   else if (v == "two_dg") c.mode = Mode::two_dg;
                   else throw std::invalid_argument("mode must be single_dg or two_dg");
                 },
                 [](const Cfg& c) { return std::string(c.mode == Mode::single_dg ? "single_dg" : "two_dg"); }},
                {"controllers",
                 [](Cfg& c, const std::string& v) {
                   c.controllers.clear();
                   for (const auto& k : split_list(v)) c.controllers.push_back(gridsim::controller_from_string(k));
                 },
                 [](const Cfg& c) { return controllers_string(c.controllers); }}}});
  s.push_back({"plant",
               {{"r_f", [](Cfg& c, const std::string& v) { c.single.plant.r_f = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.plant.r_f); }},
                {"l_f", [](Cfg& c, const std::string& v) { c.single.plant.l_f = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.plant.l_f); }},
                {"c_f", [](Cfg& c, const std::string& v) { c.single.plant.c_f = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.plant.c_f); }},
                {"f0", [](Cfg& c, const std::string& v) { c.single.plant.omega0 = kTwoPi * parse_double(v); },
                 [](const Cfg& c) { return f0_string(c.single.plant.omega0); }},
                {"ts", [](Cfg& c, const std::string& v) { c.single.plant.ts = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.plant.ts); }}}});
  s.push_back({"uncertainty",
               {{"delta_r_frac", [](Cfg& c, const std::string& v) { c.single.bounds.delta_r_frac = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.bounds.delta_r_frac); }},
                {"delta_c_frac", [](Cfg& c, const std::string& v) { c.single.bounds.delta_c_frac = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.bounds.delta_c_frac); }},
                {"delta_l_frac", [](Cfg& c, const std::string& v) { c.single.bounds.delta_l_frac = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.bounds.delta_l_frac); }},
                {"l2_bound", [](Cfg& c, const std::string& v) { c.single.bounds.l2_inf_bound = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.bounds.l2_inf_bound); }},
                {"drift", [](Cfg& c, const std::string& v) { c.single.drift = parse_bool(v); },
                 [](const Cfg& c) { return boolstr(c.single.drift); }},
                {"drift_period", [](Cfg& c, const std::string& v) { c.single.drift_period = parse_double(v); },
                 [](const Cfg& c) { return num(c.single.drift_period); }}}});
  s.push_back(
      {"controller",
       {{"q", [](Cfg& c, const std::string& v) { c.single.tube.q = Eigen::Vector4d(parse_doubles(v, 4).data()).asDiagonal(); },
         [](const Cfg& c) { return join(to_vec(diag_of(c.single.tube.q))); }},
        {"r", [](Cfg& c, const std::string& v) { c.single.tube.r = Eigen::Vector2d(parse_doubles(v, 2).data()).asDiagonal(); },
         [](const Cfg& c) { return join(to_vec(diag_of(c.single.tube.r))); }},
        {"q_anc",
         [](Cfg& c, const std::string& v) { c.single.tube.q_anc = Eigen::Vector4d(parse_doubles(v, 4).data()).asDiagonal(); },
         [](const Cfg& c) { return join(to_vec(diag_of(c.single.tube.q_anc))); }},
        {"r_anc",
         [](Cfg& c, const std::string& v) { c.single.tube.r_anc = Eigen::Vector2d(parse_doubles(v, 2).data()).asDiagonal(); },
         [](const Cfg& c) { return join(to_vec(diag_of(c.single.tube.r_anc))); }},
        {"horizon", [](Cfg& c, const std::string& v) { c.single.tube.horizon = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.tube.horizon}); }},
        {"v_max",
         [](Cfg& c, const std::string& v) {
           const double x = parse_double(v);
           c.single.tube.x_box.lower.head(2).setConstant(-x);
           c.single.tube.x_box.upper.head(2).setConstant(x);
         },
         [](const Cfg& c) { return num(c.single.tube.x_box.upper(0)); }},
        {"i_max",
         [](Cfg& c, const std::string& v) {
           const double x = parse_double(v);
           c.single.tube.x_box.lower.tail(2).setConstant(-x);
           c.single.tube.x_box.upper.tail(2).setConstant(x);
         },
         [](const Cfg& c) { return num(c.single.tube.x_box.upper(2)); }},
        {"u_max",
         [](Cfg& c, const std::string& v) {
           const double x = parse_double(v);
           c.single.tube.u_box.lower.setConstant(-x);
           c.single.tube.u_box.upper.setConstant(x);
         },
         [](const Cfg& c) { return num(c.single.tube.u_box.upper(0)); }},
        {"mrpi_eps", [](Cfg& c, const std::string& v) { c.single.tube.mrpi_eps = parse_double(v); },
         [](const Cfg& c) { return num(c.single.tube.mrpi_eps); }},
        {"generator_cap", [](Cfg& c, const std::string& v) { c.single.tube.generator_cap = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.tube.generator_cap}); }},
        {"terminal_margin", [](Cfg& c, const std::string& v) { c.single.tube.terminal_margin = parse_double(v); },
         [](const Cfg& c) { return num(c.single.tube.terminal_margin); }},
        {"qp_tol", [](Cfg& c, const std::string& v) { c.single.tube.qp_tol = parse_double(v); },
         [](const Cfg& c) { return num(c.single.tube.qp_tol); }},
        {"qp_max_iter", [](Cfg& c, const std::string& v) { c.single.tube.qp_max_iter = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.tube.qp_max_iter}); }},
        {"rmpc_box", [](Cfg& c, const std::string& v) { c.single.rmpc_w1_half_width = parse_double(v); },
         [](const Cfg& c) { return num(c.single.rmpc_w1_half_width); }},
        {"pi_kp", [](Cfg& c, const std::string& v) { c.single.pi.kp = parse_double(v); },
         [](const Cfg& c) { return num(c.single.pi.kp); }},
        {"pi_ki", [](Cfg& c, const std::string& v) { c.single.pi.ki = parse_double(v); },
         [](const Cfg& c) { return num(c.single.pi.ki); }},
        {"pi_kc", [](Cfg& c, const std::string& v) { c.single.pi.kc = parse_double(v); },
         [](const Cfg& c) { return num(c.single.pi.kc); }}}});
  s.push_back(
      {"learner",
       {{"hyperparams",
         [](Cfg& c, const std::string& v) {
           if (v == "fit") {
             c.single.learner.fixed_hp.reset();
             return;
           }
           const auto hl = parse_doubles(v, 2);
           gpregress::GpHyperparams hp;
           hp.h = hl[0];
           hp.lambda = hl[1];
           hp.sigma_n2 = c.single.learner.grid.sigma_n2;
           c.single.learner.fixed_hp = hp;
         },
         [](const Cfg& c) {
           const auto& f = c.single.learner.fixed_hp;
           return f ? num(f->h) + ", " + num(f->lambda) : std::string("fit");
         }},
        {"sigma_n2",
         [](Cfg& c, const std::string& v) {
           c.single.learner.grid.sigma_n2 = parse_double(v);
           if (c.single.learner.fixed_hp) c.single.learner.fixed_hp->sigma_n2 = c.single.learner.grid.sigma_n2;
         },
         [](const Cfg& c) { return num(c.single.learner.grid.sigma_n2); }},
        {"h_grid", [](Cfg& c, const std::string& v) { c.single.learner.grid.h = parse_doubles(v, 0); },
         [](const Cfg& c) { return join(c.single.learner.grid.h); }},
        {"lambda_grid", [](Cfg& c, const std::string& v) { c.single.learner.grid.lambda = parse_doubles(v, 0); },
         [](const Cfg& c) { return join(c.single.learner.grid.lambda); }},
        {"window", [](Cfg& c, const std::string& v) { c.single.learner.window_cap = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.learner.window_cap}); }},
        {"min_points", [](Cfg& c, const std::string& v) { c.single.learner.min_points = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.learner.min_points}); }},
        {"refit_every", [](Cfg& c, const std::string& v) { c.single.learner.refit_every = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.learner.refit_every}); }},
        {"confidence", [](Cfg& c, const std::string& v) { c.single.learner.confidence = parse_double(v); },
         [](const Cfg& c) { return num(c.single.learner.confidence); }},
        {"additive_radius", [](Cfg& c, const std::string& v) { c.single.learner.additive_radius = parse_bool(v); },
         [](const Cfg& c) { return boolstr(c.single.learner.additive_radius); }}}});
  s.push_back(
      {"simulation",
       {{"duration", [](Cfg& c, const std::string& v) { c.single.duration = parse_double(v); },
         [](const Cfg& c) { return num(c.single.duration); }},
        {"seed", [](Cfg& c, const std::string& v) { c.single.seed = parse_uint(v); },
         [](const Cfg& c) { return std::to_string(c.single.seed); }},
        {"noise_variance", [](Cfg& c, const std::string& v) { c.single.noise_variance = parse_double(v); },
         [](const Cfg& c) { return num(c.single.noise_variance); }},
        {"substeps", [](Cfg& c, const std::string& v) { c.single.substeps = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.substeps}); }},
        {"computational_delay", [](Cfg& c, const std::string& v) { c.single.computational_delay = parse_bool(v); },
         [](const Cfg& c) { return boolstr(c.single.computational_delay); }},
        {"v_ref", [](Cfg& c, const std::string& v) { c.single.v_ref = Eigen::Vector2d(parse_doubles(v, 2).data()); },
         [](const Cfg& c) { return join({c.single.v_ref(0), c.single.v_ref(1)}); }},
        {"thd_window_cycles",
         [](Cfg& c, const std::string& v) { c.single.thd_window_cycles = static_cast<int>(parse_int(v)); },
         [](const Cfg& c) { return num(std::int64_t{c.single.thd_window_cycles}); }}}});
  s.push_back(
      {"network",
       {{"line_z1", [](Cfg& c, const std::string& v) { const auto z = parse_doubles(v, 2); c.line_z[0] = {z[0], z[1]}; },
         [](const Cfg& c) { return join({c.line_z[0].real(), c.line_z[0].imag()}); }},
        {"line_z2", [](Cfg& c, const std::string& v) { const auto z = parse_doubles(v, 2); c.line_z[1] = {z[0], z[1]}; },
         [](const Cfg& c) { return join({c.line_z[1].real(), c.line_z[1].imag()}); }},
        {"transformer_ratio", [](Cfg& c, const std::string& v) { c.transformer_ratio = parse_double(v); },
         [](const Cfg& c) { return num(c.transformer_ratio); }}}});
  return s;
}

std::vector<Field<LoadModel>> load_fields() {
  return {{"kind", [](LoadModel& l, const std::string& v) { l.kind = kind_from_string(v); },
           [](const LoadModel& l) { return std::string(kind_string(l.kind)); }},
          dbl("s_rated", &LoadModel::s_rated),
          dbl("pf", &LoadModel::pf),
          {"orders", [](LoadModel& l, const std::string& v) { l.orders = parse_orders(v); },
           [](const LoadModel& l) { return orders_string(l.orders); }},
          dbl("base_current", &LoadModel::base_current),
          dbl("connect_time", &LoadModel::connect_time),
          dbl("ramp_time", &LoadModel::ramp_time),
          dbl("response_time", &LoadModel::response_time)};
}

std::vector<Field<DroopParams>> droop_fields() {
  return {dbl("f_n", &DroopParams::f_n), dbl("v_n", &DroopParams::v_n), dbl("m", &DroopParams::m),
          dbl("n", &DroopParams::n), dbl("lpf_cutoff", &DroopParams::lpf_cutoff)};
}

template <class T>
const Field<T>* find_field(const std::vector<Field<T>>& fields, const std::string& key) {
  for (const auto& f : fields)
    if (f.key == key) return &f;
  return nullptr;
}

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what, 0, field);
}

}  // namespace

gridsim::TwoDgScenario ScenarioConfig::two_dg() const {
  gridsim::TwoDgScenario t;
  t.dg = single;
  t.dg.loads.clear();
  t.droop = droop;
  t.line_z = line_z;
  t.transformer_ratio = transformer_ratio;
  t.loads = single.loads;
  t.duration = single.duration;
  return t;
}

void ScenarioConfig::validate() const {
  check(!name.empty() && name.find_first_of(",\n\r\"") == std::string::npos, "scenario.name",
        "must be non-empty without commas, quotes or newlines");
  check(!controllers.empty(), "scenario.controllers", "at least one controller is required");
  const auto& p = single.plant;
  check(p.r_f >= 0.0, "plant.r_f", "must be >= 0");
  check(p.l_f > 0.0, "plant.l_f", "must be > 0");
  check(p.c_f > 0.0, "plant.c_f", "must be > 0");
  check(p.omega0 > 0.0, "plant.f0", "must be > 0");
  check(p.ts > 0.0, "plant.ts", "must be > 0");
  const auto& b = single.bounds;
  check(b.delta_r_frac >= 0.0 && b.delta_r_frac < 1.0, "uncertainty.delta_r_frac", "must be in [0, 1)");
  check(b.delta_c_frac >= 0.0 && b.delta_c_frac < 1.0, "uncertainty.delta_c_frac", "must be in [0, 1)");
  check(b.delta_l_frac >= 0.0 && b.delta_l_frac < 1.0, "uncertainty.delta_l_frac", "must be in [0, 1)");
  check(b.l2_inf_bound >= 0.0, "uncertainty.l2_bound", "must be >= 0");
  check(single.drift_period > 0.0, "uncertainty.drift_period", "must be > 0");
  const auto& tc = single.tube;
  check((tc.q.diagonal().array() >= 0.0).all(), "controller.q", "entries must be >= 0");
  check((tc.r.diagonal().array() > 0.0).all(), "controller.r", "entries must be > 0");
  check((tc.q_anc.diagonal().array() >= 0.0).all(), "controller.q_anc", "entries must be >= 0");
  check((tc.r_anc.diagonal().array() > 0.0).all(), "controller.r_anc", "entries must be > 0");
  check(tc.horizon >= 1, "controller.horizon", "must be >= 1");
  check(tc.x_box.upper(0) > 0.0, "controller.v_max", "must be > 0");
  check(tc.x_box.upper(2) > 0.0, "controller.i_max", "must be > 0");
  check(tc.u_box.upper(0) > 0.0, "controller.u_max", "must be > 0");
  check(tc.mrpi_eps > 0.0, "controller.mrpi_eps", "must be > 0");
  check(tc.generator_cap >= 4, "controller.generator_cap", "must be >= 4");
  check(tc.terminal_margin >= 0.0 && tc.terminal_margin < 1.0, "controller.terminal_margin", "must be in [0, 1)");
  check(tc.qp_tol > 0.0, "controller.qp_tol", "must be > 0");
  check(tc.qp_max_iter >= 1, "controller.qp_max_iter", "must be >= 1");
  check(single.rmpc_w1_half_width >= 0.0, "controller.rmpc_box", "must be >= 0");
  check(single.pi.kp >= 0.0, "controller.pi_kp", "must be >= 0");
  check(single.pi.ki >= 0.0, "controller.pi_ki", "must be >= 0");
  check(single.pi.kc >= 0.0, "controller.pi_kc", "must be >= 0");
  const auto& lc = single.learner;
  check(lc.grid.sigma_n2 > 0.0, "learner.sigma_n2", "must be > 0");
  check(!lc.grid.h.empty() && std::all_of(lc.grid.h.begin(), lc.grid.h.end(), [](double x) { return x > 0.0; }),
        "learner.h_grid", "entries must be > 0");
  check(!lc.grid.lambda.empty() &&
            std::all_of(lc.grid.lambda.begin(), lc.grid.lambda.end(), [](double x) { return x > 0.0; }),
        "learner.lambda_grid", "entries must be > 0");
  if (lc.fixed_hp) check(lc.fixed_hp->h > 0.0 && lc.fixed_hp->lambda > 0.0, "learner.hyperparams", "h and lambda must be > 0");
  check(lc.window_cap >= 8, "learner.window", "must be >= 8");
  check(lc.min_points >= 1, "learner.min_points", "must be >= 1");
  check(lc.refit_every >= 1, "learner.refit_every", "must be >= 1");
  check(lc.confidence > 0.0 && lc.confidence < 1.0, "learner.confidence", "must be in (0, 1)");
  check(single.duration >= 0.0, "simulation.duration", "must be >= 0");
  if (p.ts > 0.0) {
    const double steps = single.duration / p.ts;
    check(std::abs(steps - std::round(steps)) <= 1e-6 * std::max(1.0, steps), "simulation.duration",
          "must be a multiple of plant.ts");
  }
  check(single.noise_variance >= 0.0, "simulation.noise_variance", "must be >= 0");
  check(single.substeps >= 1, "simulation.substeps", "must be >= 1");
  check(single.v_ref.allFinite(), "simulation.v_ref", "must be finite");
  check(single.thd_window_cycles >= 1, "simulation.thd_window_cycles", "must be >= 1");
  for (size_t i = 0; i < single.loads.size(); ++i) {
    const auto& l = single.loads[i];
    const std::string f = "load." + std::to_string(i + 1) + ".";
    if (l.kind == LoadKind::harmonic) {
      check(l.base_current >= 0.0, f + "base_current", "must be >= 0");
      for (const auto& o : l.orders) {
        check(o.order >= 2, f + "orders", "harmonic orders must be >= 2");
        check(o.magnitude >= 0.0, f + "orders", "magnitudes must be >= 0");
      }
    } else {
      check(l.s_rated > 0.0, f + "s_rated", "must be > 0");
      check(l.pf > 0.0 && l.pf <= 1.0, f + "pf", "must be in (0, 1]");
    }
    check(l.connect_time >= 0.0, f + "connect_time", "must be >= 0");
    check(l.ramp_time >= 0.0, f + "ramp_time", "must be >= 0");
    check(l.response_time >= 0.0, f + "response_time", "must be >= 0");
    if (mode == Mode::two_dg) check(l.kind != LoadKind::harmonic, f + "kind", "harmonic loads need single_dg mode");
  }
  if (mode == Mode::two_dg) {
    for (int i = 0; i < 2; ++i) {
      const std::string f = "droop." + std::to_string(i + 1) + ".";
      check(droop[i].f_n > 0.0, f + "f_n", "must be > 0");
      check(droop[i].v_n > 0.0, f + "v_n", "must be > 0");
      check(droop[i].m > 0.0, f + "m", "must be > 0");
      check(droop[i].n > 0.0, f + "n", "must be > 0");
      check(droop[i].lpf_cutoff > 0.0 && droop[i].lpf_cutoff < 0.5 / p.ts, f + "lpf_cutoff",
            "must be in (0, 1/(2 ts))");
      check(line_z[i].real() >= 0.0 && std::abs(line_z[i]) > 0.0, "network.line_z" + std::to_string(i + 1),
            "must have non-negative resistance and non-zero magnitude");
    }
    check(transformer_ratio > 0.0, "network.transformer_ratio", "must be > 0");
  }
  try {
    single.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ScenarioConfig parse_config_text(const std::string& text) {
  ScenarioConfig c;
  const auto secs = sections();
  const auto lf = load_fields();
  const auto df = droop_fields();
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  std::string section;
  LoadModel* load = nullptr;
  DroopParams* droop = nullptr;
  std::vector<std::string> seen_loads;
  bool loads_reset = false;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", lineno);
      section = trim(line.substr(1, line.size() - 2));
      load = nullptr;
      droop = nullptr;
      if (section.rfind("load.", 0) == 0) {
        const std::string name = section.substr(5);
        if (name.empty()) throw ConfigError("load section needs a name, e.g. [load.zload]", lineno);
        if (std::find(seen_loads.begin(), seen_loads.end(), name) != seen_loads.end())
          throw ConfigError("duplicate section [" + section + "]", lineno);
        if (!loads_reset) {
          c.single.loads.clear();
          loads_reset = true;
        }
        seen_loads.push_back(name);
        c.single.loads.emplace_back();
        load = &c.single.loads.back();
      } else if (section == "droop.1" || section == "droop.2") {
        droop = &c.droop[section.back() - '1'];
      } else if (std::none_of(secs.begin(), secs.end(), [&](const auto& s) { return s.first == section; })) {
        throw ConfigError("unknown section [" + section + "]", lineno);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("key '" + key + "' outside a section", lineno);
    const std::string field = section + "." + key;
    try {
      if (load) {
        const auto* f = find_field(lf, key);
        if (!f) throw ConfigError("unknown key '" + key + "' in [" + section + "]", lineno, field);
        f->set(*load, value);
      } else if (droop) {
        const auto* f = find_field(df, key);
        if (!f) throw ConfigError("unknown key '" + key + "' in [" + section + "]", lineno, field);
        f->set(*droop, value);
      } else {
        const auto it = std::find_if(secs.begin(), secs.end(), [&](const auto& s) { return s.first == section; });
        const auto* f = find_field(it->second, key);
        if (!f) throw ConfigError("unknown key '" + key + "' in [" + section + "]", lineno, field);
        f->set(c, value);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(field + ": " + e.what(), lineno, field);
    }
  }
  c.validate();
  return c;
}

ScenarioConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize(const ScenarioConfig& c) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [name, fields] : sections()) {
    os << (first ? "" : "\n") << '[' << name << "]\n";
    first = false;
    for (const auto& f : fields) os << f.key << " = " << f.get(c) << '\n';
  }
  for (int i = 0; i < 2; ++i) {
    os << "\n[droop." << (i + 1) << "]\n";
    for (const auto& f : droop_fields()) os << f.key << " = " << f.get(c.droop[i]) << '\n';
  }
  for (size_t i = 0; i < c.single.loads.size(); ++i) {
    os << "\n[load." << (i + 1) << "]\n";
    for (const auto& f : load_fields()) os << f.key << " = " << f.get(c.single.loads[i]) << '\n';
  }
  return os.str();
}

int RunReport::feasibility_violations() const {
  int n = 0;
  for (const auto& r : rows) n += r.counters.qp_infeasible_after_feasible;
  return n;
}

int RunReport::lyapunov_violations() const {
  int n = 0;
  for (const auto& r : rows) n += r.counters.lyapunov_violations;
  return n;
}

int RunReport::tube_violations() const {
  int n = 0;
  for (const auto& r : rows) n += r.counters.tube_violations;
  return n;
}

int RunReport::monitor_violations() const {
  int n = 0;
  for (const auto& r : rows) n += r.counters.monitor_violations();
  return n;
}

bool RunReport::any_failed() const {
  return std::any_of(rows.begin(), rows.end(), [](const ControllerReport& r) { return r.failed; });
}

std::string RunReport::to_text() const {
  std::ostringstream os;
  os << "scenario: " << scenario << "\nseed: " << seed << '\n';
  for (const auto& r : rows) {
    const auto& c = r.counters;
    os << "controller: " << gridsim::to_string(r.kind) << '\n';
    for (size_t d = 0; d < r.thd_percent.size(); ++d)
      os << "  voltage_thd_percent" << (r.thd_percent.size() > 1 ? "_dg" + std::to_string(d + 1) : "") << ": "
         << num(r.thd_percent[d]) << '\n';
    os << "  steps: " << c.steps << "\n  qp_solves: " << c.qp_solves
       << "\n  qp_infeasible_events: " << c.qp_infeasible_events
       << "\n  feasibility_violations: " << c.qp_infeasible_after_feasible << "\n  lyapunov_violations: "
       << c.lyapunov_violations << " of " << c.lyapunov_checked << " checked\n  tube_violations: " << c.tube_violations
       << " of " << c.tube_checked << " checked\n  candidate_infeasible: " << c.candidate_infeasible << " of "
       << c.candidate_checked << " checked\n  disturbance_outside_set: " << c.disturbance_outside
       << "\n  disturbance_set_reduced: " << c.w_hat_reduced << "\n  fallbacks: " << c.fallbacks
       << "\n  max_realized_l2: " << num(c.max_l2_realized) << "\n  wall_ms_per_step: " << num(c.wall_ms_per_step)
       << '\n';
    if (r.two_dg) {
      const auto& s = *r.two_dg;
      os << "  p_dg1_w: " << num(s.p_avg[0]) << "\n  p_dg2_w: " << num(s.p_avg[1]) << "\n  p_ratio: " << num(s.ratio())
         << "\n  p_load_w: " << num(s.p_load) << "\n  p_line_loss_w: " << num(s.p_line_loss)
         << "\n  balance_error: " << num(s.balance_error()) << "\n  f_dg1_hz: " << num(s.f_avg[0])
         << "\n  f_dg2_hz: " << num(s.f_avg[1]) << '\n';
    }
    os << "  status: " << (r.failed ? "failed: " + r.diagnostic : std::string("ok")) << '\n';
  }
  return os.str();
}

std::string RunReport::thd_table_csv() const {
  std::ostringstream os;
  os << "scenario,dg";
  size_t n_dg = 0;
  for (const auto& r : rows) {
    os << ',' << gridsim::to_string(r.kind);
    n_dg = std::max(n_dg, r.thd_percent.size());
  }
  os << '\n';
  for (size_t d = 0; d < n_dg; ++d) {
    os << scenario << ',' << (d + 1);
    for (const auto& r : rows) os << ',' << (d < r.thd_percent.size() ? num(r.thd_percent[d]) : std::string("nan"));
    os << '\n';
  }
  return os.str();
}

namespace {

ControllerReport execute(const ScenarioConfig& c, ControllerKind kind, gridsim::SimTrace& trace) {
  ControllerReport row;
  row.kind = kind;
  const int dgs = c.mode == Mode::two_dg ? 2 : 1;
  if (c.mode == Mode::two_dg) {
    gridsim::TwoDgSummary s;
    trace = gridsim::run_two_dg(c.two_dg(), kind, &s);
    row.two_dg = s;
  } else {
    trace = gridsim::run_single_dg(c.single, kind);
  }
  row.counters = trace.counters;
  row.failed = trace.failed;
  row.diagnostic = trace.diagnostic;
  const auto& p = c.single.plant;
  for (int d = 0; d < dgs; ++d) {
    double v = std::numeric_limits<double>::quiet_NaN();
    if (!trace.failed) {
      try {
        v = gridsim::trace_thd(trace, p.omega0 / kTwoPi, p.ts, c.single.thd_window_cycles, d).max_thd();
      } catch (const std::invalid_argument&) {
        // shorter than the analysis window
      }
    }
    row.thd_percent.push_back(v);
  }
  return row;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

RunOutputs cmd_run(const ScenarioConfig& config, ControllerKind kind, std::optional<std::uint64_t> seed,
                   const std::filesystem::path& out_dir) {
  config.validate();
  ScenarioConfig c = config;
  if (seed) c.single.seed = *seed;
  RunOutputs out;
  out.report.scenario = c.name;
  out.report.seed = c.single.seed;
  gridsim::SimTrace trace;
  out.report.rows.push_back(execute(c, kind, trace));
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::string k = gridsim::to_string(kind);
    std::ostringstream csv;
    gridsim::write_trace_csv(trace, csv);
    out.files.push_back(out_dir / ("trace_" + k + ".csv"));
    write_file(out.files.back(), csv.str());
    out.files.push_back(out_dir / ("report_" + k + ".txt"));
    write_file(out.files.back(), out.report.to_text());
  }
  return out;
}

RunOutputs cmd_compare(const ScenarioConfig& config, const std::filesystem::path& out_dir) {
  if (config.controllers.size() < 2) throw UsageError("compare needs at least two controllers in scenario.controllers");
  config.validate();
  RunOutputs out;
  out.report.scenario = config.name;
  out.report.seed = config.single.seed;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  for (const auto kind : config.controllers) {
    gridsim::SimTrace trace;
    out.report.rows.push_back(execute(config, kind, trace));
    if (!out_dir.empty()) {
      std::ostringstream csv;
      gridsim::write_trace_csv(trace, csv);
      out.files.push_back(out_dir / ("trace_" + std::string(gridsim::to_string(kind)) + ".csv"));
      write_file(out.files.back(), csv.str());
    }
  }
  if (!out_dir.empty()) {
    out.files.push_back(out_dir / "thd_table.csv");
    write_file(out.files.back(), out.report.thd_table_csv());
    out.files.push_back(out_dir / "report.txt");
    write_file(out.files.back(), out.report.to_text());
  }
  return out;
}

}  // namespace lrmpc::scenario
