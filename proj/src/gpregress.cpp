#include "lrmpc/gpregress.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lrmpc::gpregress {

namespace {

Eigen::MatrixXd gram(const Eigen::VectorXd& t, const GpHyperparams& hp) {
  const int n = static_cast<int>(t.size());
  Eigen::MatrixXd c(n, n);
  for (int i = 0; i < n; ++i) {
    c(i, i) = hp.h * hp.h;
    for (int j = 0; j < i; ++j) c(i, j) = c(j, i) = kernel(t(i), t(j), hp);
  }
  return c;
}

// Cholesky of C + sigma_n2 I, adding jitter when the noise-free matrix is singular.
Eigen::LLT<Eigen::MatrixXd> factorize(const Eigen::MatrixXd& c, double sigma_n2, double h2) {
  const int n = static_cast<int>(c.rows());
  double jitter = 0.0;
  for (int attempt = 0; attempt < 6; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(c + (sigma_n2 + jitter) * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) return llt;
    jitter = (jitter == 0.0) ? 1e-12 * h2 : jitter * 100.0;
  }
  throw std::runtime_error("gpregress: covariance matrix is not positive definite");
}

void require_same_size(const Eigen::VectorXd& t, const Eigen::VectorXd& y) {
  if (t.size() != y.size()) throw std::invalid_argument("gpregress: times and values differ in length");
  if (t.size() == 0) throw std::invalid_argument("gpregress: empty dataset");
}

}  // namespace

void GpHyperparams::validate() const {
  if (!(h > 0.0)) throw std::invalid_argument("GpHyperparams: h must be > 0");
  if (!(lambda > 0.0)) throw std::invalid_argument("GpHyperparams: lambda must be > 0");
  if (!(sigma_n2 >= 0.0)) throw std::invalid_argument("GpHyperparams: sigma_n2 must be >= 0");
}

double kernel(double ki, double kj, const GpHyperparams& hp) {
  const double s = (ki - kj) / hp.lambda;
  return hp.h * hp.h * std::exp(-s * s);
}

GpDataset::GpDataset(int window_cap) : window_cap_(window_cap) {
  if (window_cap < 1) throw std::invalid_argument("GpDataset: window_cap must be >= 1");
}

void GpDataset::update(double t, const Eigen::Vector2d& w1) {
  if (!times_.empty() && !(t > times_.back()))
    throw std::invalid_argument("GpDataset: times must be strictly increasing");
  times_.push_back(t);
  values_.push_back(w1);
  while (static_cast<int>(times_.size()) > window_cap_) {
    times_.pop_front();
    values_.pop_front();
  }
}

void GpDataset::record_mean(const Eigen::Vector2d& mu) {
  if (last_mu_) {
    mean_steps_.push_back((mu - *last_mu_).norm());
    while (static_cast<int>(mean_steps_.size()) > window_cap_) mean_steps_.pop_front();
  }
  last_mu_ = mu;
}

double GpDataset::delta_mu() const {
  return mean_steps_.empty() ? 0.0 : *std::max_element(mean_steps_.begin(), mean_steps_.end());
}

Eigen::VectorXd GpDataset::times() const {
  Eigen::VectorXd t(size());
  for (int i = 0; i < size(); ++i) t(i) = times_[i];
  return t;
}

Eigen::VectorXd GpDataset::channel(int c) const {
  if (c < 0 || c > 1) throw std::out_of_range("GpDataset: channel must be 0 or 1");
  Eigen::VectorXd y(size());
  for (int i = 0; i < size(); ++i) y(i) = values_[i](c);
  return y;
}

std::string GpDataset::to_csv() const {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << "t,w1d,w1q\n";
  for (int i = 0; i < size(); ++i) os << times_[i] << ',' << values_[i](0) << ',' << values_[i](1) << '\n';
  return os.str();
}

GpDataset GpDataset::from_csv(const std::string& text, int window_cap) {
  GpDataset ds(window_cap);
  std::istringstream is(text);
  is.imbue(std::locale::classic());
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.rfind("t,", 0) == 0)) continue;
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    double t, d, q;
    char c1, c2;
    if (!(ls >> t >> c1 >> d >> c2 >> q) || c1 != ',' || c2 != ',')
      throw std::invalid_argument("GpDataset: malformed CSV at line " + std::to_string(lineno));
    ds.update(t, Eigen::Vector2d(d, q));
  }
  return ds;
}

Posterior posterior(const Eigen::VectorXd& times, const Eigen::VectorXd& y, const GpHyperparams& hp,
                    double prior_mean) {
  hp.validate();
  require_same_size(times, y);
  const Eigen::MatrixXd c = gram(times, hp);
  const auto llt = factorize(c, hp.sigma_n2, hp.h * hp.h);
  Posterior out;
  const Eigen::VectorXd yc = y.array() - prior_mean;
  out.mu_bar = (c * llt.solve(yc)).array() + prior_mean;
  // C (C + s I)^{-1} s; C and the inverse commute, so the product is symmetric.
  const Eigen::MatrixXd m = c * llt.solve(Eigen::MatrixXd::Identity(c.rows(), c.cols())) * hp.sigma_n2;
  out.sigma_bar = 0.5 * (m + m.transpose());
  return out;
}

ChannelPrediction predict_channel(const Eigen::VectorXd& times, const Eigen::VectorXd& y,
                                  const GpHyperparams& hp, double t_next, double prior_mean) {
  GpModel model;
  return model.predict(times, y, hp, t_next, prior_mean);
}

ChannelPrediction GpModel::predict(const Eigen::VectorXd& times, const Eigen::VectorXd& y,
                                   const GpHyperparams& hp, double t_next, double prior_mean) {
  hp.validate();
  require_same_size(times, y);
  const Eigen::VectorXd rel = times.array() - times(times.size() - 1);
  const bool same = valid_ && rel.size() == rel_times_.size() && hp.h == hp_.h && hp.lambda == hp_.lambda &&
                    hp.sigma_n2 == hp_.sigma_n2 && (rel - rel_times_).cwiseAbs().maxCoeff() <= 1e-12 * hp.lambda;
  if (!same) {
    llt_ = factorize(gram(rel, hp), hp.sigma_n2, hp.h * hp.h);
    rel_times_ = rel;
    hp_ = hp;
    valid_ = true;
  }
  const double t_rel = t_next - times(times.size() - 1);
  Eigen::VectorXd ks(rel.size());
  for (int i = 0; i < rel.size(); ++i) ks(i) = kernel(t_rel, rel(i), hp);
  const Eigen::VectorXd yc = y.array() - prior_mean;
  ChannelPrediction out;
  out.mean = prior_mean + ks.dot(llt_.solve(yc));
  const Eigen::VectorXd v = llt_.matrixL().solve(ks);
  double var = hp.h * hp.h - v.squaredNorm() + hp.sigma_n2;
  if (var < 0.0) {
    var = 0.0;
    out.variance_clamped = true;
  }
  out.variance = var;
  return out;
}

GpPrediction predict(const GpDataset& ds, const std::array<GpHyperparams, 2>& hp, double t_next,
                     bool centered) {
  if (ds.empty()) throw std::invalid_argument("gpregress: empty dataset");
  const Eigen::VectorXd t = ds.times();
  GpPrediction out;
  for (int c = 0; c < 2; ++c) {
    const Eigen::VectorXd y = ds.channel(c);
    const double m = centered ? y.mean() : 0.0;
    const auto p = predict_channel(t, y, hp[c], t_next, m);
    out.mu_star(c) = p.mean;
    out.sigma2_star(c, c) = p.variance;
    if (p.variance_clamped) ++out.clamped_channels;
  }
  return out;
}

GpPrediction predict(const GpDataset& ds, const GpHyperparams& hp, double t_next, bool centered) {
  return predict(ds, std::array<GpHyperparams, 2>{hp, hp}, t_next, centered);
}

double log_marginal_likelihood(const Eigen::VectorXd& times, const Eigen::VectorXd& y,
                               const GpHyperparams& hp, double prior_mean) {
  hp.validate();
  require_same_size(times, y);
  const auto llt = factorize(gram(times, hp), hp.sigma_n2, hp.h * hp.h);
  const Eigen::VectorXd yc = y.array() - prior_mean;
  const double quad = yc.dot(llt.solve(yc));
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double n = static_cast<double>(y.size());
  return -0.5 * quad - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

FitResult fit_hyperparams(const Eigen::VectorXd& times, const Eigen::VectorXd& y, const HyperGrid& grid,
                          double prior_mean) {
  require_same_size(times, y);
  if (y.size() < 8) throw std::invalid_argument("fit_hyperparams: need at least 8 points");
  if (grid.h.empty() || grid.lambda.empty()) throw std::invalid_argument("fit_hyperparams: empty grid");
  std::vector<double> hs = grid.h, ls = grid.lambda;
  std::sort(hs.begin(), hs.end());
  std::sort(ls.begin(), ls.end());
  FitResult best;
  const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
  if (y.maxCoeff() - y.minCoeff() <= 1e-12 * scale) {
    best.hp = GpHyperparams{hs.front(), ls.front(), grid.sigma_n2};
    best.lml = log_marginal_likelihood(times, y, best.hp, prior_mean);
    best.degenerate = true;
    return best;
  }
  best.lml = -std::numeric_limits<double>::infinity();
  for (double lam : ls) {
    for (double h : hs) {
      const GpHyperparams hp{h, lam, grid.sigma_n2};
      const double v = log_marginal_likelihood(times, y, hp, prior_mean);
      if (v > best.lml) {
        best.lml = v;
        best.hp = hp;
      }
    }
  }
  return best;
}

double chi2_quantile(double confidence, int dof) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("chi2_quantile: confidence must be in (0,1)");
  if (dof < 1) throw std::invalid_argument("chi2_quantile: dof must be >= 1");
  return boost::math::quantile(boost::math::chi_squared(dof), confidence);
}

DisturbanceSetParams DisturbanceSetParams::with_confidence(double confidence, int dof) {
  DisturbanceSetParams sp;
  sp.confidence = confidence;
  sp.chi2_quantile = gpregress::chi2_quantile(confidence, dof);
  return sp;
}

void DisturbanceSetParams::validate() const {
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("DisturbanceSetParams: confidence must be in (0,1)");
  if (!(chi2_quantile > 0.0)) throw std::invalid_argument("DisturbanceSetParams: chi2_quantile must be > 0");
  if (!(delta_mu >= 0.0)) throw std::invalid_argument("DisturbanceSetParams: delta_mu must be >= 0");
  if (!(l2_bound >= 0.0)) throw std::invalid_argument("DisturbanceSetParams: l2_bound must be >= 0");
}

WHat build_w_hat(const GpPrediction& pred, const DisturbanceSetParams& sp) {
  sp.validate();
  double r2 = sp.chi2_quantile + sp.delta_mu;
  if (sp.additive_radius) {
    const double r = std::sqrt(sp.chi2_quantile) + sp.delta_mu;
    r2 = r * r;
  }
  Eigen::Matrix2d shape = Eigen::Matrix2d::Zero();
  shape.diagonal() = pred.sigma2_star.diagonal().cwiseMax(0.0);
  return WHat{convexsets::Ellipsoid(pred.mu_star, shape, r2),
              convexsets::Box::symmetric(Eigen::Vector4d::Constant(sp.l2_bound))};
}

}  // namespace lrmpc::gpregress
