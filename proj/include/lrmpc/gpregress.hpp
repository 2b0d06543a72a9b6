#pragma once

#include <Eigen/Dense>

#include <array>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "lrmpc/convexsets.hpp"

namespace lrmpc::gpregress {

struct GpHyperparams {
  double h = 1.0;         // output scale
  double lambda = 1.0;    // length scale, same unit as the sample times
  double sigma_n2 = 0.01; // measurement noise variance

  void validate() const;
};

// Squared-exponential kernel h^2 exp(-((ki - kj) / lambda)^2).
double kernel(double ki, double kj, const GpHyperparams& hp);

// Time-stamped two-channel (d, q) training data with a sliding window.
class GpDataset {
 public:
  explicit GpDataset(int window_cap = 200);

  // Appends a sample and evicts the oldest beyond the window cap. Throws
  // std::invalid_argument when t does not exceed the last time.
  void update(double t, const Eigen::Vector2d& w1);

  // Tracks the drift bound as the largest step between consecutive means
  // over the last window_cap steps.
  void record_mean(const Eigen::Vector2d& mu);

  int size() const { return static_cast<int>(times_.size()); }
  bool empty() const { return times_.empty(); }
  int window_cap() const { return window_cap_; }
  double delta_mu() const;
  Eigen::VectorXd times() const;
  Eigen::VectorXd channel(int c) const;

  // CSV with header t,w1d,w1q.
  std::string to_csv() const;
  static GpDataset from_csv(const std::string& text, int window_cap = 200);

 private:
  int window_cap_;
  std::deque<double> times_;
  std::deque<Eigen::Vector2d> values_;
  std::optional<Eigen::Vector2d> last_mu_;
  std::deque<double> mean_steps_;
};

struct Posterior {
  Eigen::VectorXd mu_bar;
  Eigen::MatrixXd sigma_bar;
};

// Posterior of the latent function at the training times of a single channel.
// prior_mean is a constant added back to the mean.
Posterior posterior(const Eigen::VectorXd& times, const Eigen::VectorXd& y, const GpHyperparams& hp,
                    double prior_mean = 0.0);

struct ChannelPrediction {
  double mean = 0.0;
  double variance = 0.0;
  bool variance_clamped = false;
};

ChannelPrediction predict_channel(const Eigen::VectorXd& times, const Eigen::VectorXd& y,
                                  const GpHyperparams& hp, double t_next, double prior_mean = 0.0);

struct GpPrediction {
  Eigen::Vector2d mu_star = Eigen::Vector2d::Zero();
  Eigen::Matrix2d sigma2_star = Eigen::Matrix2d::Zero();  // diagonal
  int clamped_channels = 0;
};

// Independent GPs for the two channels. With centered = true the window mean of
// each channel is used as the constant prior mean.
GpPrediction predict(const GpDataset& ds, const std::array<GpHyperparams, 2>& hp, double t_next,
                     bool centered = false);
GpPrediction predict(const GpDataset& ds, const GpHyperparams& hp, double t_next, bool centered = false);

double log_marginal_likelihood(const Eigen::VectorXd& times, const Eigen::VectorXd& y,
                               const GpHyperparams& hp, double prior_mean = 0.0);

struct HyperGrid {
  std::vector<double> h{1.0, 3.0, 10.0, 30.0, 100.0};
  std::vector<double> lambda{0.5, 1.0, 1.5, 2.0};
  double sigma_n2 = 0.01;
};

struct FitResult {
  GpHyperparams hp;
  double lml = 0.0;
  bool degenerate = false;
};

// Grid maximization of the log marginal likelihood. Ties go to the smallest
// lambda, then the smallest h. Needs at least 8 points. Constant data returns
// the smallest grid cell with degenerate = true.
FitResult fit_hyperparams(const Eigen::VectorXd& times, const Eigen::VectorXd& y, const HyperGrid& grid,
                          double prior_mean = 0.0);

// Inverse chi-square CDF.
double chi2_quantile(double confidence, int dof);

struct DisturbanceSetParams {
  double confidence = 0.95;
  double chi2_quantile = 5.991464547107979;
  double delta_mu = 0.0;
  double l2_bound = 0.0;
  // false: radius^2 = chi2 + delta_mu. true: radius = sqrt(chi2) + delta_mu.
  bool additive_radius = false;

  static DisturbanceSetParams with_confidence(double confidence, int dof = 2);
  void validate() const;
};

struct WHat {
  convexsets::Ellipsoid w1_set;  // load current, 2-D
  convexsets::Box w2_set;        // parametric term, 4-D
};

WHat build_w_hat(const GpPrediction& pred, const DisturbanceSetParams& sp);

// Single-channel GP with a cached Cholesky factor. Uniformly spaced windows
// reuse the factor across calls when only the values change.
class GpModel {
 public:
  ChannelPrediction predict(const Eigen::VectorXd& times, const Eigen::VectorXd& y, const GpHyperparams& hp,
                            double t_next, double prior_mean);

 private:
  Eigen::VectorXd rel_times_;
  GpHyperparams hp_{};
  bool valid_ = false;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

}  // namespace lrmpc::gpregress
