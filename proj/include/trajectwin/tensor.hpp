#pragma once

// Low-rank coefficient regression for matrix-shaped covariates:
//
//   y_i = <C, X_i> + intercept + e_i,   C = sum_r a_r b_r'   (p x q)
//
// fitted by ridge-penalised alternating least squares, plus validation-based
// selection of the rank and ridge strength.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "trajectwin/common.hpp"
#include "trajectwin/io.hpp"

namespace trajectwin::tensor {

struct MatrixCovariateDataset {
  std::vector<Matrix> X;  // each p x q
  std::vector<double> y;

  std::size_t size() const { return y.size(); }
  Eigen::Index rows() const { return X.empty() ? 0 : X.front().rows(); }
  Eigen::Index cols() const { return X.empty() ? 0 : X.front().cols(); }
  void validate() const;
};

struct CPFactorModel {
  int outcome = 0;  // outcome index k
  std::vector<Vector> A;  // R factors of length p
  std::vector<Vector> B;  // R factors of length q
  double lambda = 0.0;
  double intercept = 0.0;
  std::uint64_t seed = 0;
  double residual_variance = 0.0;  // validation residual variance when selected by rank_select

  int rank() const { return static_cast<int>(A.size()); }
  Matrix coefficient() const;  // sum_r a_r b_r'
  // Rescales each pair so |a_r| = |b_r| without changing a_r b_r'.
  void rebalance();

  io::json to_json() const;
  static CPFactorModel from_json(const io::json& j);
};

struct CpConfig {
  int max_iters = 500;
  double tol = 1e-12;  // relative objective change between sweeps
  std::uint64_t seed = 0;
};

struct CpFitResult {
  CPFactorModel model;
  std::vector<double> objective;  // initial value, then after every half-sweep
  int sweeps = 0;
  Warnings warnings;
};

double objective(const CPFactorModel& model, const MatrixCovariateDataset& data);

CpFitResult cp_fit(const MatrixCovariateDataset& data, int rank, double lambda, const CpConfig& config = {});

// Factored form sum_r a_r' X b_r + intercept.
double cp_predict(const CPFactorModel& model, const Matrix& X);
// <coefficient(), X> + intercept, evaluated from the reconstructed matrix.
double cp_predict_reconstructed(const CPFactorModel& model, const Matrix& X);

struct RankCandidate {
  int rank = 0;
  double lambda = 0.0;
  double validation_mse = 0.0;
};

struct RankSelectConfig {
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
  // Candidates within this relative margin of the best validation MSE count
  // as tied; ties go to the smaller rank, then the larger lambda.
  double tie_tolerance = 0.01;
  CpConfig fit;
  int threads = 1;
};

struct RankSelection {
  int rank = 0;
  double lambda = 0.0;
  std::vector<RankCandidate> candidates;  // rank-major, lambda in grid order
  CPFactorModel model;                    // refit of the chosen candidate on the training subsplit
};

RankSelection rank_select(const MatrixCovariateDataset& data, int max_rank, const std::vector<double>& lambdas,
                          const RankSelectConfig& config = {});

// Dataset CSV: a `shape,<p>,<q>` line, a header line, then p*q row-major
// entries of X followed by y on each row.
MatrixCovariateDataset read_dataset_csv(std::istream& in);
void write_dataset_csv(std::ostream& out, const MatrixCovariateDataset& data);

// Planted-coefficient generator used by tests and the CLI.
MatrixCovariateDataset simulate_dataset(const Matrix& coefficient, double intercept, std::size_t n, double noise_sd,
                                        std::uint64_t seed);

}  // namespace trajectwin::tensor
