#include "trajectwin/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace trajectwin::ssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

// Clips eigenvalues from below so the matrix stays a valid covariance.
Matrix clip_psd(const Matrix& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m));
  Vector values = eig.eigenvalues().cwiseMax(floor);
  return symmetrize(eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose());
}

bool is_psd(const Matrix& m, double tol) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() >= -tol;
}

GaussianBelief predict_one(const GaussianBelief& b, const SSMParameters& p) {
  GaussianBelief out;
  out.mean = p.A * b.mean;
  out.cov = symmetrize(p.A * b.cov * p.A.transpose() + p.Q);
  out.time = b.time;
  return out;
}

// Filter run on the base-step grid: one node per delta step, with the
// observations attached to the nodes that coincide with visits.
struct GridRun {
  std::vector<Vector> xf, xp;
  std::vector<Matrix> Pf, Pp;
  std::vector<std::ptrdiff_t> visit_at;     // visit index per node, -1 for none
  std::vector<std::size_t> node_of_visit;
  std::vector<UpdateResult> updates;
  double log_likelihood = 0.0;
};

GridRun run_grid(const ObservedTrajectory& traj, const SSMParameters& p) {
  GridRun run;
  const auto n = traj.times.size();
  if (traj.observations.size() != n) throw ShapeError("trajectory times/observations length mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    int steps = 1;
    if (j > 0) {
      const double gap = traj.times[j] - traj.times[j - 1];
      if (!(gap > 0.0)) throw DataError("visit times not strictly increasing for " + traj.patient_id);
      steps = steps_for_gap(gap, p.delta);
    }
    GaussianBelief current;
    if (j == 0) {
      current = {p.m0, p.P0, traj.times[0]};
      run.xp.push_back(current.mean);
      run.Pp.push_back(current.cov);
      run.visit_at.push_back(0);
    } else {
      current = {run.xf.back(), run.Pf.back(), traj.times[j - 1]};
      for (int s = 0; s < steps; ++s) {
        if (s > 0) {
          // Intermediate node without evidence: filtered equals predicted.
          run.xf.push_back(current.mean);
          run.Pf.push_back(current.cov);
        }
        current = predict_one(current, p);
        run.xp.push_back(current.mean);
        run.Pp.push_back(current.cov);
        run.visit_at.push_back(s + 1 == steps ? static_cast<std::ptrdiff_t>(j) : -1);
      }
      current.time = traj.times[j];
    }
    auto upd = update(current, traj.observations[j], p);
    run.log_likelihood += upd.log_density;
    run.xf.push_back(upd.belief.mean);
    run.Pf.push_back(upd.belief.cov);
    run.node_of_visit.push_back(run.xf.size() - 1);
    run.updates.push_back(std::move(upd));
  }
  return run;
}

struct Smoothed {
  std::vector<Vector> x;
  std::vector<Matrix> P;
  std::vector<Matrix> cross;  // cross[t] = Cov(z_t, z_{t-1} | all), t >= 1
};

Smoothed rts(const GridRun& run, const SSMParameters& p) {
  const auto N = run.xf.size();
  Smoothed s;
  s.x.resize(N);
  s.P.resize(N);
  s.cross.resize(N);
  if (N == 0) return s;
  s.x[N - 1] = run.xf[N - 1];
  s.P[N - 1] = run.Pf[N - 1];
  for (std::size_t t = N - 1; t-- > 0;) {
    Eigen::LDLT<Matrix> ldlt(run.Pp[t + 1]);
    if (ldlt.info() != Eigen::Success) throw NumericError("smoother: singular predicted covariance");
    // J = Pf A' Pp^{-1}
    const Matrix J = ldlt.solve(p.A * run.Pf[t]).transpose();
    s.x[t] = run.xf[t] + J * (s.x[t + 1] - run.xp[t + 1]);
    s.P[t] = symmetrize(run.Pf[t] + J * (s.P[t + 1] - run.Pp[t + 1]) * J.transpose());
    s.cross[t + 1] = s.P[t + 1] * J.transpose();
  }
  return s;
}

// Expected sufficient statistics of one patient.
struct Moments {
  Matrix S11, S10, S00;
  double transitions = 0.0;
  std::vector<Vector> syz;  // per feature: sum y_i E[z]
  std::vector<Matrix> szz;  // per feature: sum E[z z'] over visits observing i
  Vector syy;               // per feature: sum y_i^2
  Vector count;             // per feature: observation count
  Vector x0;
  Matrix xx0;
  double log_likelihood = 0.0;

  Moments(Eigen::Index d, Eigen::Index m)
      : S11(Matrix::Zero(d, d)), S10(Matrix::Zero(d, d)), S00(Matrix::Zero(d, d)),
        syz(m, Vector::Zero(d)), szz(m, Matrix::Zero(d, d)), syy(Vector::Zero(m)),
        count(Vector::Zero(m)), x0(Vector::Zero(d)), xx0(Matrix::Zero(d, d)) {}

  void add(const Moments& o) {
    S11 += o.S11;
    S10 += o.S10;
    S00 += o.S00;
    transitions += o.transitions;
    for (std::size_t i = 0; i < syz.size(); ++i) {
      syz[i] += o.syz[i];
      szz[i] += o.szz[i];
    }
    syy += o.syy;
    count += o.count;
    x0 += o.x0;
    xx0 += o.xx0;
    log_likelihood += o.log_likelihood;
  }
};

Moments patient_moments(const ObservedTrajectory& traj, const SSMParameters& p) {
  const auto d = p.latent_dim();
  const auto m = p.obs_dim();
  Moments mo(d, m);
  if (traj.times.empty()) return mo;
  const auto run = run_grid(traj, p);
  const auto sm = rts(run, p);
  mo.log_likelihood = run.log_likelihood;
  const auto N = sm.x.size();
  for (std::size_t t = 1; t < N; ++t) {
    mo.S11 += sm.P[t] + sm.x[t] * sm.x[t].transpose();
    mo.S10 += sm.cross[t] + sm.x[t] * sm.x[t - 1].transpose();
    mo.S00 += sm.P[t - 1] + sm.x[t - 1] * sm.x[t - 1].transpose();
    mo.transitions += 1.0;
  }
  for (std::size_t j = 0; j < traj.times.size(); ++j) {
    const auto node = run.node_of_visit[j];
    const Matrix Ezz = sm.P[node] + sm.x[node] * sm.x[node].transpose();
    const auto& obs = traj.observations[j];
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!obs.present[static_cast<std::size_t>(i)]) continue;
      const double y = obs.values(i);
      mo.syz[static_cast<std::size_t>(i)] += y * sm.x[node];
      mo.szz[static_cast<std::size_t>(i)] += Ezz;
      mo.syy(i) += y * y;
      mo.count(i) += 1.0;
    }
  }
  mo.x0 = sm.x[0];
  mo.xx0 = sm.P[0] + sm.x[0] * sm.x[0].transpose();
  return mo;
}

Moments cohort_moments(const std::vector<ObservedTrajectory>& cohort, const SSMParameters& p, int threads) {
  std::vector<std::optional<Moments>> per(cohort.size());
  parallel_for(cohort.size(), threads, [&](std::size_t i) { per[i] = patient_moments(cohort[i], p); });
  Moments total(p.latent_dim(), p.obs_dim());
  for (const auto& mo : per) total.add(*mo);  // fixed reduction order
  return total;
}

// Solves X * S = B for X with a ridge fallback when S is ill-conditioned.
Matrix right_solve(const Matrix& B, const Matrix& S, Warnings& warnings, const char* what) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(S), Eigen::EigenvaluesOnly);
  Matrix Sr = symmetrize(S);
  const double top = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  if (eig.eigenvalues().minCoeff() <= 1e-12 * top) {
    const double ridge = 1e-8 * std::max(Sr.trace() / double(Sr.rows()), 1.0);
    Sr += ridge * Matrix::Identity(Sr.rows(), Sr.cols());
    warnings.push_back(std::string("M-step: singular moment matrix for ") + what +
                       "; ridge-regularized solve");
  }
  return Sr.ldlt().solve(B.transpose()).transpose();
}

void normalize_gauge(SSMParameters& p) {
  const auto d = p.latent_dim();
  Vector scale(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double norm = p.H.col(j).norm();
    if (!(norm > 1e-12)) {
      scale(j) = 1.0;
      continue;
    }
    Eigen::Index arg = 0;
    p.H.col(j).cwiseAbs().maxCoeff(&arg);
    scale(j) = p.H(arg, j) < 0 ? -norm : norm;
  }
  const Matrix D = scale.asDiagonal();
  const Matrix Dinv = scale.cwiseInverse().asDiagonal();
  p.H = p.H * Dinv;
  p.A = D * p.A * Dinv;
  p.Q = symmetrize(D * p.Q * D);
  p.m0 = D * p.m0;
  p.P0 = symmetrize(D * p.P0 * D);
}

}  // namespace

void SSMParameters::validate() const {
  const auto d = A.rows();
  const auto m = H.rows();
  if (d < 1 || A.cols() != d) throw ShapeError("SSM: A must be square with d >= 1");
  if (Q.rows() != d || Q.cols() != d) throw ShapeError("SSM: Q must be d x d");
  if (H.cols() != d || m < 1) throw ShapeError("SSM: H must be m x d with m >= 1");
  if (r_obs.size() != m) throw ShapeError("SSM: R_obs must have m diagonal entries");
  if (m0.size() != d || P0.rows() != d || P0.cols() != d) throw ShapeError("SSM: m0/P0 must have dimension d");
  for (const auto* mat : {&A, &Q, &H, &P0}) require_finite(*mat, "SSM parameters");
  require_finite(r_obs, "SSM R_obs");
  require_finite(m0, "SSM m0");
  if (!is_psd(Q, 1e-9)) throw NumericError("SSM: Q is not symmetric PSD");
  if (!is_psd(P0, 1e-9)) throw NumericError("SSM: P0 is not symmetric PSD");
  if (!(r_obs.minCoeff() > 0.0)) throw NumericError("SSM: R_obs diagonal must be positive");
  if (!(delta > 0.0) || !std::isfinite(delta)) throw NumericError("SSM: delta must be positive");
  if (!feature_names.empty() && static_cast<Eigen::Index>(feature_names.size()) != m)
    throw ShapeError("SSM: feature name count does not match m");
  if (center.size() != 0 && center.size() != m) throw ShapeError("SSM: center size does not match m");
  if (scale.size() != 0 && scale.size() != m) throw ShapeError("SSM: scale size does not match m");
}

io::json SSMParameters::to_json() const {
  io::json j = {
      {"format", "trajectwin.ssm"},
      {"version", 1},
      {"latent_dim", latent_dim()},
      {"obs_dim", obs_dim()},
      {"delta", delta},
      {"A", io::matrix_to_json(A)},
      {"Q", io::matrix_to_json(Q)},
      {"H", io::matrix_to_json(H)},
      {"R_obs", io::matrix_to_json(R_obs())},
      {"m0", io::matrix_to_json(m0)},
      {"P0", io::matrix_to_json(P0)},
  };
  j["features"] = feature_names;
  j["center"] = io::vector_to_json(center);
  j["scale"] = io::vector_to_json(scale);
  return j;
}

SSMParameters SSMParameters::from_json(const io::json& j) {
  io::require_document(j, "trajectwin.ssm", 1);
  SSMParameters p;
  try {
    p.delta = j.at("delta").get<double>();
    p.A = io::matrix_from_json(j.at("A"));
    p.Q = io::matrix_from_json(j.at("Q"));
    p.H = io::matrix_from_json(j.at("H"));
    const Matrix R = io::matrix_from_json(j.at("R_obs"));
    if (R.rows() != R.cols()) throw SchemaError("R_obs must be square");
    if ((R - Matrix(R.diagonal().asDiagonal())).cwiseAbs().maxCoeff() > 0.0)
      throw SchemaError("R_obs must be diagonal");
    p.r_obs = R.diagonal();
    p.m0 = io::matrix_from_json(j.at("m0"));
    p.P0 = io::matrix_from_json(j.at("P0"));
    if (j.contains("features")) p.feature_names = j.at("features").get<std::vector<std::string>>();
    if (j.contains("center")) p.center = io::vector_from_json(j.at("center"));
    if (j.contains("scale")) p.scale = io::vector_from_json(j.at("scale"));
    if (j.at("latent_dim").get<Eigen::Index>() != p.A.rows() || j.at("obs_dim").get<Eigen::Index>() != p.H.rows())
      throw SchemaError("SSM document: declared dimensions do not match matrices");
  } catch (const io::json::exception& e) {
    throw SchemaError(std::string("SSM document: ") + e.what());
  }
  p.validate();
  return p;
}

Observation Observation::full(const Vector& v) {
  return {v, std::vector<bool>(static_cast<std::size_t>(v.size()), true)};
}

Observation Observation::missing(Eigen::Index m) {
  return {Vector::Zero(m), std::vector<bool>(static_cast<std::size_t>(m), false)};
}

std::size_t Observation::present_count() const {
  return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
}

int steps_for_gap(double gap_months, double delta) {
  return std::max(1, static_cast<int>(std::lround(gap_months / delta)));
}

GaussianBelief predict(const GaussianBelief& belief, const SSMParameters& params, double gap_months) {
  if (!std::isfinite(gap_months) || !(gap_months > 0.0)) throw NumericError("predict: gap must be positive and finite");
  require_finite(belief.mean, "predict: belief mean");
  require_finite(belief.cov, "predict: belief covariance");
  GaussianBelief out = belief;
  const int steps = steps_for_gap(gap_months, params.delta);
  for (int s = 0; s < steps; ++s) out = predict_one(out, params);
  out.time = belief.time + gap_months;
  return out;
}

UpdateResult update(const GaussianBelief& belief, const Observation& obs, const SSMParameters& params) {
  const auto m = params.obs_dim();
  if (obs.values.size() != m || static_cast<Eigen::Index>(obs.present.size()) != m)
    throw ShapeError("update: observation dimension does not match H");
  UpdateResult res;
  res.belief = belief;
  for (Eigen::Index i = 0; i < m; ++i)
    if (obs.present[static_cast<std::size_t>(i)]) res.rows.push_back(i);
  if (res.rows.empty()) return res;

  const auto p = static_cast<Eigen::Index>(res.rows.size());
  const auto d = params.latent_dim();
  Matrix Hp(p, d);
  Vector xp(p), rp(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    Hp.row(k) = params.H.row(res.rows[static_cast<std::size_t>(k)]);
    xp(k) = obs.values(res.rows[static_cast<std::size_t>(k)]);
    rp(k) = params.r_obs(res.rows[static_cast<std::size_t>(k)]);
  }
  require_finite(xp, "update: observation");
  const Matrix& P = belief.cov;
  res.innovation = xp - Hp * belief.mean;
  res.innovation_cov = symmetrize(Hp * P * Hp.transpose() + Matrix(rp.asDiagonal()));
  Eigen::LLT<Matrix> llt(res.innovation_cov);
  if (llt.info() != Eigen::Success) {
    std::ostringstream rows;
    for (auto r : res.rows) rows << (rows.tellp() > 0 ? "," : "") << r;
    throw NumericError("update: singular innovation covariance for observation rows " + rows.str());
  }
  const Matrix PHt = P * Hp.transpose();
  const Matrix K = llt.solve(PHt.transpose()).transpose();
  const Matrix IKH = Matrix::Identity(d, d) - K * Hp;
  res.belief.mean = belief.mean + K * res.innovation;
  res.belief.cov = symmetrize(IKH * P * IKH.transpose() + K * rp.asDiagonal() * K.transpose());

  const Matrix L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const Vector w = llt.matrixL().solve(res.innovation);
  res.log_density = -0.5 * (double(p) * kLog2Pi + logdet + w.squaredNorm());
  return res;
}

FilterResult filter_trajectory(const ObservedTrajectory& trajectory, const SSMParameters& params) {
  FilterResult out;
  if (trajectory.times.empty()) return out;
  auto run = run_grid(trajectory, params);
  out.log_likelihood = run.log_likelihood;
  for (std::size_t j = 0; j < trajectory.times.size(); ++j) {
    const auto node = run.node_of_visit[j];
    out.beliefs.push_back({run.xf[node], run.Pf[node], trajectory.times[j]});
  }
  out.updates = std::move(run.updates);
  return out;
}

std::vector<GaussianBelief> smooth_trajectory(const ObservedTrajectory& trajectory, const SSMParameters& params) {
  std::vector<GaussianBelief> out;
  if (trajectory.times.empty()) return out;
  const auto run = run_grid(trajectory, params);
  const auto sm = rts(run, params);
  for (std::size_t j = 0; j < trajectory.times.size(); ++j) {
    const auto node = run.node_of_visit[j];
    out.push_back({sm.x[node], sm.P[node], trajectory.times[j]});
  }
  return out;
}

double log_likelihood(const std::vector<ObservedTrajectory>& cohort, const SSMParameters& params, int threads) {
  std::vector<double> per(cohort.size(), 0.0);
  parallel_for(cohort.size(), threads, [&](std::size_t i) {
    if (!cohort[i].times.empty()) per[i] = run_grid(cohort[i], params).log_likelihood;
  });
  double total = 0.0;
  for (double v : per) total += v;
  return total;
}

SSMParameters initialize(const std::vector<ObservedTrajectory>& cohort, int latent_dim, double delta,
                         const EmConfig& config) {
  if (cohort.empty()) throw DataError("fit_em: empty cohort");
  if (latent_dim < 1) throw UsageError("fit_em: latent dimension must be >= 1");
  if (!(delta > 0.0)) throw UsageError("fit_em: delta must be positive");
  Eigen::Index m = -1;
  for (const auto& t : cohort)
    if (!t.observations.empty()) {
      m = t.observations.front().values.size();
      break;
    }
  if (m < 1) throw DataError("fit_em: cohort has no observations");
  const Eigen::Index d = latent_dim;

  // Pooled moments with per-feature availability; missing entries are
  // mean-filled for the covariance estimate used only at initialization.
  Vector sum = Vector::Zero(m), cnt = Vector::Zero(m);
  for (const auto& t : cohort)
    for (const auto& o : t.observations) {
      if (o.values.size() != m) throw ShapeError("fit_em: inconsistent observation dimension");
      for (Eigen::Index i = 0; i < m; ++i)
        if (o.present[static_cast<std::size_t>(i)]) {
          sum(i) += o.values(i);
          cnt(i) += 1.0;
        }
    }
  for (Eigen::Index i = 0; i < m; ++i)
    if (cnt(i) < 2.0) throw DataError("fit_em: feature " + std::to_string(i) + " has fewer than two observations");
  const Vector mean = sum.cwiseQuotient(cnt);
  Matrix cov = Matrix::Zero(m, m);
  double n = 0.0;
  for (const auto& t : cohort)
    for (const auto& o : t.observations) {
      Vector c(m);
      for (Eigen::Index i = 0; i < m; ++i) c(i) = o.present[static_cast<std::size_t>(i)] ? o.values(i) - mean(i) : 0.0;
      cov += c * c.transpose();
      n += 1.0;
    }
  cov /= std::max(n - 1.0, 1.0);
  cov = symmetrize(cov);

  SSMParameters p;
  p.delta = delta;
  p.A = 0.9 * Matrix::Identity(d, d);
  p.Q = 0.1 * Matrix::Identity(d, d);
  const double stationary = 0.1 / (1.0 - 0.81);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  Rng rng(derive_seed(config.seed, "ssm-init"));
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double base_scale = std::sqrt(std::max(cov.diagonal().mean(), 1e-12));
  p.H = Matrix::Zero(m, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    // Columns beyond the observation dimension reuse the leading directions at
    // half scale with faster dynamics; pure jitter leaves EM at a saddle.
    const Eigen::Index k = m - 1 - (j % m);  // eigenvalues ascend
    const double lambda = std::max(eig.eigenvalues()(k), 1e-12);
    const double share = j < m ? 0.75 : 0.25;
    p.H.col(j) = eig.eigenvectors().col(k) * std::sqrt(share * lambda / stationary);
    if (j >= m) p.A(j, j) = 0.5;
    for (Eigen::Index i = 0; i < m; ++i) p.H(i, j) += 0.01 * base_scale * jitter(rng);
  }
  if (config.fixed_emission) {
    if (config.fixed_emission->rows() != m || config.fixed_emission->cols() != d)
      throw ShapeError("fit_em: fixed emission matrix has wrong shape");
    p.H = *config.fixed_emission;
  }
  const Vector explained = (p.H * p.H.transpose()).diagonal() * stationary;
  p.r_obs = (cov.diagonal() - explained).cwiseMax(0.25 * cov.diagonal()).cwiseMax(1e-8);

  // First-visit statistics projected onto the latent space.
  const Matrix proj = (p.H.transpose() * p.H + 1e-8 * Matrix::Identity(d, d)).ldlt().solve(p.H.transpose());
  std::vector<Vector> z0;
  for (const auto& t : cohort) {
    if (t.observations.empty()) continue;
    const auto& o = t.observations.front();
    Vector filled(m);
    for (Eigen::Index i = 0; i < m; ++i) filled(i) = o.present[static_cast<std::size_t>(i)] ? o.values(i) : mean(i);
    z0.push_back(proj * filled);
  }
  p.m0 = Vector::Zero(d);
  for (const auto& z : z0) p.m0 += z;
  p.m0 /= double(z0.size());
  p.P0 = Matrix::Zero(d, d);
  for (const auto& z : z0) p.P0 += (z - p.m0) * (z - p.m0).transpose();
  p.P0 = p.P0 / std::max(double(z0.size()) - 1.0, 1.0) + 0.1 * stationary * Matrix::Identity(d, d);
  p.P0 = clip_psd(p.P0, 1e-8);
  if (!config.fixed_emission) normalize_gauge(p);
  return p;
}

EmResult fit_em(const std::vector<ObservedTrajectory>& cohort, int latent_dim, double delta, const EmConfig& config) {
  EmResult res;
  res.params = initialize(cohort, latent_dim, delta, config);
  const auto m = res.params.obs_dim();
  const int threads = std::max(config.threads, 1);

  Moments mo = cohort_moments(cohort, res.params, threads);
  res.trace.push_back(mo.log_likelihood);
  for (int it = 0; it < config.max_iters; ++it) {
    SSMParameters next = res.params;
    if (mo.transitions > 0.0) {
      next.A = right_solve(mo.S10, mo.S00, res.warnings, "A");
      next.Q = clip_psd((mo.S11 - next.A * mo.S10.transpose()) / mo.transitions, 1e-10);
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      const double n_i = mo.count(i);
      if (n_i < 1.0) continue;
      if (!config.fixed_emission) {
        next.H.row(i) = right_solve(mo.syz[ii].transpose(), mo.szz[ii], res.warnings, "H").row(0);
      }
      const Vector h = next.H.row(i).transpose();
      const double resid = mo.syy(i) - 2.0 * h.dot(mo.syz[ii]) + h.dot(mo.szz[ii] * h);
      next.r_obs(i) = std::max(resid / n_i, 1e-10);
    }
    const double patients = static_cast<double>(std::count_if(
        cohort.begin(), cohort.end(), [](const ObservedTrajectory& t) { return !t.times.empty(); }));
    next.m0 = mo.x0 / patients;
    next.P0 = clip_psd(mo.xx0 / patients - next.m0 * next.m0.transpose(), 1e-10);
    if (!config.fixed_emission) normalize_gauge(next);

    Moments next_mo = cohort_moments(cohort, next, threads);
    const double prev = res.trace.back();
    res.params = std::move(next);
    mo = std::move(next_mo);
    res.trace.push_back(mo.log_likelihood);
    res.iterations = it + 1;
    if (std::abs(mo.log_likelihood - prev) <= config.tol * std::max(1.0, std::abs(prev))) {
      res.converged = true;
      break;
    }
  }
  std::sort(res.warnings.begin(), res.warnings.end());
  res.warnings.erase(std::unique(res.warnings.begin(), res.warnings.end()), res.warnings.end());
  return res;
}

ForecastDistribution forecast(const GaussianBelief& belief, const SSMParameters& params,
                              const std::vector<double>& horizons) {
  ForecastDistribution out;
  double last = 0.0;
  for (double h : horizons) {
    if (!(h > last)) throw UsageError("forecast: horizons must be positive and strictly increasing");
    last = h;
    const auto z = predict(belief, params, h);
    ForecastEntry e;
    e.time = z.time;
    e.mean = params.H * z.mean;
    e.cov = symmetrize(params.H * z.cov * params.H.transpose() + params.R_obs());
    require_finite(e.cov, "forecast covariance");
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace trajectwin::ssm
