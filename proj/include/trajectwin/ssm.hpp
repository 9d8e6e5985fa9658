#pragma once

// Linear-Gaussian latent state-space model over irregular visits:
//
//   z_k = A z_{k-1} + w,  w ~ N(0, Q)        (one step per `delta` months)
//   x_t = H z_t + v,      v ~ N(0, R_obs)    (R_obs diagonal, rows masked
//                                             when a feature is missing)
//
// Exact Kalman filtering, RTS smoothing, EM fitting and multi-step forecasts.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trajectwin/common.hpp"
#include "trajectwin/io.hpp"

namespace trajectwin::ssm {

struct SSMParameters {
  Matrix A;          // d x d transition
  Matrix Q;          // d x d process noise
  Matrix H;          // m x d emission
  Vector r_obs;      // diagonal of R_obs (m)
  Vector m0;         // initial mean (d)
  Matrix P0;         // initial covariance (d x d)
  double delta = 6.0;

  // Optional description of the observation space: names plus the affine
  // map that was applied before fitting (x_model = (x_raw - center) / scale).
  std::vector<std::string> feature_names;
  Vector center;
  Vector scale;

  Eigen::Index latent_dim() const { return A.rows(); }
  Eigen::Index obs_dim() const { return H.rows(); }
  Matrix R_obs() const { return r_obs.asDiagonal(); }

  // Throws ShapeError / NumericError on violated invariants.
  void validate() const;

  io::json to_json() const;
  static SSMParameters from_json(const io::json& j);
};

struct GaussianBelief {
  Vector mean;
  Matrix cov;
  double time = 0.0;  // months
};

struct Observation {
  Vector values;              // m; entries where !present are ignored
  std::vector<bool> present;  // m

  static Observation full(const Vector& v);
  static Observation missing(Eigen::Index m);
  std::size_t present_count() const;
};

struct ObservedTrajectory {
  std::string patient_id;
  std::vector<double> times;
  std::vector<Observation> observations;
};

struct UpdateResult {
  GaussianBelief belief;
  std::vector<Eigen::Index> rows;  // observed rows, ascending
  Vector innovation;               // x_rows - H_rows * prior mean
  Matrix innovation_cov;           // H_rows P H_rows' + R_rows
  double log_density = 0.0;        // log N(innovation; 0, innovation_cov)
};

// Number of base steps used for a gap: max(1, round(gap / delta)).
int steps_for_gap(double gap_months, double delta);

GaussianBelief predict(const GaussianBelief& belief, const SSMParameters& params, double gap_months);
UpdateResult update(const GaussianBelief& belief, const Observation& obs, const SSMParameters& params);

struct FilterResult {
  std::vector<GaussianBelief> beliefs;  // filtered, one per visit
  std::vector<UpdateResult> updates;
  double log_likelihood = 0.0;
};

// The first visit conditions the prior N(m0, P0); later visits predict over
// the actual gap and then condition.
FilterResult filter_trajectory(const ObservedTrajectory& trajectory, const SSMParameters& params);
std::vector<GaussianBelief> smooth_trajectory(const ObservedTrajectory& trajectory,
                                              const SSMParameters& params);

struct EmConfig {
  int max_iters = 200;
  double tol = 1e-8;  // relative log-likelihood change
  std::uint64_t seed = 0;
  int threads = 1;
  // When set, H is held fixed and only the latent scale-free quantities are
  // estimated; otherwise H columns are normalised to unit length each sweep.
  std::optional<Matrix> fixed_emission;
};

struct EmResult {
  SSMParameters params;
  std::vector<double> trace;  // log-likelihood of params at each iteration, init first
  int iterations = 0;
  bool converged = false;
  Warnings warnings;
};

SSMParameters initialize(const std::vector<ObservedTrajectory>& cohort, int latent_dim,
                         double delta, const EmConfig& config);

EmResult fit_em(const std::vector<ObservedTrajectory>& cohort, int latent_dim, double delta,
                const EmConfig& config);

// Total log-likelihood across patients, reduced in patient order.
double log_likelihood(const std::vector<ObservedTrajectory>& cohort, const SSMParameters& params,
                      int threads = 1);

struct ForecastEntry {
  double time = 0.0;
  Vector mean;  // m
  Matrix cov;   // m x m
};

struct ForecastDistribution {
  std::vector<ForecastEntry> entries;
};

// Horizons are months ahead of belief.time, strictly increasing and positive.
ForecastDistribution forecast(const GaussianBelief& belief, const SSMParameters& params,
                              const std::vector<double>& horizons);

}  // namespace trajectwin::ssm
