#include "trajectwin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

namespace trajectwin::tensor {

namespace {

constexpr double kLambdaFloor = 1e-8;

// Minimises |y - Z w - c|^2 + lambda |w|^2 over (w, c); the intercept is
// unpenalised and eliminated by centring.
Vector ridge_with_intercept(const Matrix& Z, const Vector& y, double lambda, double& intercept, Warnings& warnings) {
  const double n = static_cast<double>(y.size());
  const Vector zbar = Z.colwise().sum().transpose() / n;
  const double ybar = y.sum() / n;
  const Matrix Zc = Z.rowwise() - zbar.transpose();
  const Vector yc = y.array() - ybar;
  Matrix G = Zc.transpose() * Zc;
  const Vector rhs = Zc.transpose() * yc;
  Matrix system = G + lambda * Matrix::Identity(G.rows(), G.cols());
  Eigen::LLT<Matrix> llt(system);
  bool singular = llt.info() != Eigen::Success;
  if (!singular) {
    const Matrix L = llt.matrixL();
    const double dmax = L.diagonal().maxCoeff(), dmin = L.diagonal().minCoeff();
    singular = !(dmin > 1e-10 * dmax);
  }
  if (singular) {
    warnings.push_back("ALS subproblem singular; solved with lambda floor 1e-8");
    system = G + std::max(lambda, kLambdaFloor) * Matrix::Identity(G.rows(), G.cols());
    llt.compute(system);
    if (llt.info() != Eigen::Success) throw NumericError("ALS subproblem not solvable");
  }
  const Vector w = llt.solve(rhs);
  intercept = ybar - zbar.dot(w);
  return w;
}

Vector random_unit(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  do {
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
  } while (!(v.norm() > 0.0));
  return v / v.norm();
}

}  // namespace

void MatrixCovariateDataset::validate() const {
  if (X.size() != y.size()) throw ShapeError("dataset: X and y lengths differ");
  if (X.empty()) throw DataError("dataset: no samples");
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (X[i].rows() != rows() || X[i].cols() != cols()) throw ShapeError("dataset: inconsistent covariate shapes");
    if (!X[i].allFinite() || !std::isfinite(y[i])) throw NumericError("dataset: non-finite entries");
  }
}

Matrix CPFactorModel::coefficient() const {
  if (A.empty()) throw ShapeError("CP model has no components");
  Matrix C = Matrix::Zero(A.front().size(), B.front().size());
  for (std::size_t r = 0; r < A.size(); ++r) C += A[r] * B[r].transpose();
  return C;
}

void CPFactorModel::rebalance() {
  for (std::size_t r = 0; r < A.size(); ++r) {
    const double na = A[r].norm(), nb = B[r].norm();
    if (na == 0.0 || nb == 0.0) {
      A[r].setZero();
      B[r].setZero();
      continue;
    }
    const double s = std::sqrt(na * nb);
    A[r] = (A[r] / na) * s;
    B[r] = (B[r] / nb) * s;
  }
}

io::json CPFactorModel::to_json() const {
  io::json a = io::json::array(), b = io::json::array();
  for (const auto& v : A) a.push_back(io::matrix_to_json(v));
  for (const auto& v : B) b.push_back(io::matrix_to_json(v));
  return {{"format", "trajectwin.cp"}, {"version", 1},   {"outcome", outcome},
          {"rank", rank()},            {"lambda", lambda}, {"intercept", intercept},
          {"seed", seed},              {"residual_variance", residual_variance},
          {"A", a},                    {"B", b},           {"coefficient", io::matrix_to_json(coefficient())}};
}

CPFactorModel CPFactorModel::from_json(const io::json& j) {
  io::require_document(j, "trajectwin.cp", 1);
  CPFactorModel m;
  try {
    m.outcome = j.value("outcome", 0);
    m.lambda = j.at("lambda").get<double>();
    m.intercept = j.at("intercept").get<double>();
    m.seed = j.value("seed", std::uint64_t{0});
    m.residual_variance = j.value("residual_variance", 0.0);
    for (const auto& a : j.at("A")) m.A.push_back(io::matrix_from_json(a).col(0));
    for (const auto& b : j.at("B")) m.B.push_back(io::matrix_from_json(b).col(0));
  } catch (const io::json::exception& e) {
    throw SchemaError(std::string("CP document: ") + e.what());
  }
  if (m.A.empty() || m.A.size() != m.B.size()) throw SchemaError("CP document: factor lists must be non-empty and paired");
  return m;
}

double cp_predict(const CPFactorModel& model, const Matrix& X) {
  if (model.A.empty() || X.rows() != model.A.front().size() || X.cols() != model.B.front().size())
    throw ShapeError("cp_predict: covariate shape does not match the model");
  double s = model.intercept;
  for (std::size_t r = 0; r < model.A.size(); ++r) s += model.A[r].dot(X * model.B[r]);
  return s;
}

double cp_predict_reconstructed(const CPFactorModel& model, const Matrix& X) {
  const Matrix C = model.coefficient();
  if (X.rows() != C.rows() || X.cols() != C.cols()) throw ShapeError("cp_predict: covariate shape does not match the model");
  return C.cwiseProduct(X).sum() + model.intercept;
}

double objective(const CPFactorModel& model, const MatrixCovariateDataset& data) {
  double sse = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double e = data.y[i] - cp_predict(model, data.X[i]);
    sse += e * e;
  }
  double penalty = 0.0;
  for (std::size_t r = 0; r < model.A.size(); ++r) penalty += model.A[r].squaredNorm() + model.B[r].squaredNorm();
  return sse + model.lambda * penalty;
}

CpFitResult cp_fit(const MatrixCovariateDataset& data, int rank, double lambda, const CpConfig& config) {
  data.validate();
  const auto p = data.rows(), q = data.cols();
  if (rank < 1 || rank > std::min(p, q)) throw UsageError("cp_fit: rank must lie in [1, min(p, q)]");
  if (!(lambda >= 0.0)) throw UsageError("cp_fit: lambda must be non-negative");
  const auto n = static_cast<Eigen::Index>(data.size());
  const auto R = static_cast<std::size_t>(rank);

  CpFitResult res;
  auto& m = res.model;
  m.lambda = lambda;
  m.seed = config.seed;
  Rng rng(derive_seed(config.seed, "cp-init"));
  for (std::size_t r = 0; r < R; ++r) {
    m.A.push_back(random_unit(p, rng));
    m.B.push_back(random_unit(q, rng));
  }
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = data.y[static_cast<std::size_t>(i)];
  m.intercept = y.mean();
  res.objective.push_back(objective(m, data));

  Matrix Z(n, p * rank);
  Matrix Zb(n, q * rank);
  for (int sweep = 0; sweep < config.max_iters; ++sweep) {
    const double before = res.objective.back();
    // A given B: row i holds (X_i b_r) for every component.
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t r = 0; r < R; ++r)
        Z.block(i, static_cast<Eigen::Index>(r) * p, 1, p) = (data.X[static_cast<std::size_t>(i)] * m.B[r]).transpose();
    Vector a = ridge_with_intercept(Z, y, lambda, m.intercept, res.warnings);
    for (std::size_t r = 0; r < R; ++r) m.A[r] = a.segment(static_cast<Eigen::Index>(r) * p, p);
    res.objective.push_back(objective(m, data));

    // B given A: row i holds (X_i' a_r).
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t r = 0; r < R; ++r)
        Zb.block(i, static_cast<Eigen::Index>(r) * q, 1, q) = (data.X[static_cast<std::size_t>(i)].transpose() * m.A[r]).transpose();
    Vector b = ridge_with_intercept(Zb, y, lambda, m.intercept, res.warnings);
    for (std::size_t r = 0; r < R; ++r) m.B[r] = b.segment(static_cast<Eigen::Index>(r) * q, q);
    m.rebalance();
    res.objective.push_back(objective(m, data));
    res.sweeps = sweep + 1;

    const double after = res.objective.back();
    const double scale = std::max(before, 1e-30 * (y.squaredNorm() + 1.0));
    if (before - after <= config.tol * scale) break;
  }
  std::sort(res.warnings.begin(), res.warnings.end());
  res.warnings.erase(std::unique(res.warnings.begin(), res.warnings.end()), res.warnings.end());
  return res;
}

RankSelection rank_select(const MatrixCovariateDataset& data, int max_rank, const std::vector<double>& lambdas,
                          const RankSelectConfig& config) {
  data.validate();
  if (max_rank < 1) throw UsageError("rank_select: max_rank must be >= 1");
  if (lambdas.empty()) throw UsageError("rank_select: empty lambda grid");
  const int top = static_cast<int>(std::min<Eigen::Index>(max_rank, std::min(data.rows(), data.cols())));

  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(config.seed, "rank-select"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::floor(config.validation_fraction * double(data.size()))), 1, data.size() - 1);
  MatrixCovariateDataset train, val;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto& dst = k < n_val ? val : train;
    dst.X.push_back(data.X[idx[k]]);
    dst.y.push_back(data.y[idx[k]]);
  }

  struct Job {
    int rank;
    double lambda;
  };
  std::vector<Job> jobs;
  for (int r = 1; r <= top; ++r)
    for (double l : lambdas) jobs.push_back({r, l});
  std::vector<CPFactorModel> models(jobs.size());
  std::vector<double> mse(jobs.size());
  parallel_for(jobs.size(), config.threads, [&](std::size_t j) {
    models[j] = cp_fit(train, jobs[j].rank, jobs[j].lambda, config.fit).model;
    double s = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double e = val.y[i] - cp_predict(models[j], val.X[i]);
      s += e * e;
    }
    mse[j] = s / double(val.size());
  });

  RankSelection sel;
  const double best = *std::min_element(mse.begin(), mse.end());
  std::size_t chosen = jobs.size();
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    sel.candidates.push_back({jobs[j].rank, jobs[j].lambda, mse[j]});
    if (mse[j] > best * (1.0 + config.tie_tolerance) + 1e-300) continue;
    if (chosen == jobs.size() || jobs[j].rank < jobs[chosen].rank ||
        (jobs[j].rank == jobs[chosen].rank && jobs[j].lambda > jobs[chosen].lambda)) {
      chosen = j;
    }
  }
  sel.rank = jobs[chosen].rank;
  sel.lambda = jobs[chosen].lambda;
  sel.model = models[chosen];
  sel.model.residual_variance = mse[chosen];
  return sel;
}

MatrixCovariateDataset read_dataset_csv(std::istream& in) {
  std::vector<std::string> fields;
  if (!io::read_csv_record(in, fields) || fields.size() != 3 || io::trim(fields[0]) != "shape")
    throw SchemaError("tensor dataset: first line must be 'shape,<p>,<q>'");
  const auto p = io::parse_number(fields[1]), q = io::parse_number(fields[2]);
  if (!p || !q || *p < 1 || *q < 1) throw SchemaError("tensor dataset: invalid shape line");
  const auto rows = static_cast<Eigen::Index>(*p), cols = static_cast<Eigen::Index>(*q);
  if (!io::read_csv_record(in, fields)) throw SchemaError("tensor dataset: missing header line");
  MatrixCovariateDataset data;
  std::size_t line = 2;
  while (io::read_csv_record(in, fields)) {
    ++line;
    if (fields.size() == 1 && io::trim(fields[0]).empty()) continue;
    if (static_cast<Eigen::Index>(fields.size()) != rows * cols + 1)
      throw SchemaError("tensor dataset line " + std::to_string(line) + ": expected p*q+1 fields");
    Matrix X(rows, cols);
    for (Eigen::Index k = 0; k < rows * cols; ++k) {
      const auto v = io::parse_number(fields[static_cast<std::size_t>(k)]);
      if (!v) throw DataError("tensor dataset line " + std::to_string(line) + ": non-numeric entry");
      X(k / cols, k % cols) = *v;
    }
    const auto y = io::parse_number(fields.back());
    if (!y) throw DataError("tensor dataset line " + std::to_string(line) + ": non-numeric outcome");
    data.X.push_back(std::move(X));
    data.y.push_back(*y);
  }
  if (data.size() == 0) throw DataError("tensor dataset: no samples");
  return data;
}

void write_dataset_csv(std::ostream& out, const MatrixCovariateDataset& data) {
  data.validate();
  const auto p = data.rows(), q = data.cols();
  out << "shape," << p << ',' << q << '\n';
  for (Eigen::Index r = 0; r < p; ++r)
    for (Eigen::Index c = 0; c < q; ++c) out << "x_" << r << '_' << c << ',';
  out << "y\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (Eigen::Index r = 0; r < p; ++r)
      for (Eigen::Index c = 0; c < q; ++c) out << io::format_double(data.X[i](r, c)) << ',';
    out << io::format_double(data.y[i]) << '\n';
  }
}

MatrixCovariateDataset simulate_dataset(const Matrix& coefficient, double intercept, std::size_t n, double noise_sd,
                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, "tensor-data"));
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixCovariateDataset data;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix X(coefficient.rows(), coefficient.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      for (Eigen::Index c = 0; c < X.cols(); ++c) X(r, c) = normal(rng);
    const double y = coefficient.cwiseProduct(X).sum() + intercept + noise_sd * normal(rng);
    data.X.push_back(std::move(X));
    data.y.push_back(y);
  }
  return data;
}

}  // namespace trajectwin::tensor
