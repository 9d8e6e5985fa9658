#include "trajectwin/vvuq.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <ostream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

namespace trajectwin::vvuq {

namespace {

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal_distribution<double>(), p); }

double chi_square_quantile(double level, std::size_t dof) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(double(dof)), level);
}

void check_level(double level, const char* what) {
  if (!(level > 0.0 && level < 1.0)) throw UsageError(std::string(what) + ": level must lie in (0, 1)");
}

std::string feature_label(const ssm::SSMParameters& params, Eigen::Index row) {
  const auto r = static_cast<std::size_t>(row);
  return r < params.feature_names.size() ? params.feature_names[r] : "x" + std::to_string(row);
}

double mahalanobis(const ssm::UpdateResult& upd) {
  Eigen::LLT<Matrix> llt(upd.innovation_cov);
  const Vector w = llt.matrixL().solve(upd.innovation);
  return w.squaredNorm();
}

}  // namespace

IntervalForecast gaussian_interval(double mean, double sd, double level, std::string feature, double time) {
  check_level(level, "gaussian_interval");
  if (!(sd >= 0.0)) throw NumericError("gaussian_interval: sd must be non-negative");
  const double half = normal_quantile(0.5 * (1.0 + level)) * sd;
  return {mean - half, mean + half, level, std::move(feature), time};
}

double picp(const std::vector<IntervalForecast>& intervals, const std::vector<double>& targets) {
  if (intervals.empty()) throw DataError("picp: no intervals");
  if (intervals.size() != targets.size()) throw ShapeError("picp: intervals and targets differ in length");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    if (intervals[i].lower > intervals[i].upper) throw DataError("picp: interval with lower > upper");
    if (targets[i] >= intervals[i].lower && targets[i] <= intervals[i].upper) ++inside;
  }
  return double(inside) / double(intervals.size());
}

double crps_gaussian(double mean, double sd, double target) {
  if (!(sd >= 0.0)) throw NumericError("crps_gaussian: sd must be non-negative");
  if (sd == 0.0) return std::abs(mean - target);
  const double z = (target - mean) / sd;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

std::string_view action_name(ActionHint hint) { return hint == ActionHint::Refit ? "refit" : "review"; }

std::vector<AnomalyFlag> detect_anomalies(const ssm::ObservedTrajectory& trajectory, const ssm::SSMParameters& params,
                                          double level) {
  check_level(level, "detect_anomalies");
  std::vector<AnomalyFlag> flags;
  if (trajectory.times.empty()) return flags;
  ssm::GaussianBelief belief{params.m0, params.P0, trajectory.times.front()};
  for (std::size_t j = 0; j < trajectory.times.size(); ++j) {
    if (j > 0) belief = ssm::predict(belief, params, trajectory.times[j] - trajectory.times[j - 1]);
    auto upd = ssm::update(belief, trajectory.observations[j], params);
    if (upd.rows.empty()) continue;
    const double stat = mahalanobis(upd);
    const double threshold = chi_square_quantile(level, upd.rows.size());
    if (stat > threshold) {
      AnomalyFlag f;
      f.patient_id = trajectory.patient_id;
      f.time = trajectory.times[j];
      for (auto r : upd.rows) f.features.push_back(feature_label(params, r));
      f.magnitude = stat;
      f.threshold = threshold;
      f.level = level;
      flags.push_back(std::move(f));
      continue;
    }
    belief = std::move(upd.belief);
  }
  return flags;
}

CalibrationReport calibrate(const std::vector<ssm::ObservedTrajectory>& cohort, const ssm::SSMParameters& params,
                            double level) {
  check_level(level, "calibrate");
  const auto m = params.obs_dim();
  std::vector<std::size_t> n(static_cast<std::size_t>(m), 0), inside(n.size(), 0);
  std::vector<double> crps(n.size(), 0.0);
  const double zq = normal_quantile(0.5 * (1.0 + level));
  for (const auto& traj : cohort) {
    if (traj.times.empty()) continue;
    ssm::GaussianBelief belief = ssm::update({params.m0, params.P0, traj.times.front()}, traj.observations.front(), params).belief;
    for (std::size_t j = 1; j < traj.times.size(); ++j) {
      const auto fc = ssm::forecast(belief, params, {traj.times[j] - traj.times[j - 1]}).entries.front();
      const auto& obs = traj.observations[j];
      for (Eigen::Index i = 0; i < m; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (!obs.present[k]) continue;
        const double sd = std::sqrt(fc.cov(i, i));
        const double y = obs.values(i);
        ++n[k];
        if (y >= fc.mean(i) - zq * sd && y <= fc.mean(i) + zq * sd) ++inside[k];
        crps[k] += crps_gaussian(fc.mean(i), sd, y);
      }
      belief = ssm::update(ssm::predict(belief, params, traj.times[j] - traj.times[j - 1]), obs, params).belief;
    }
  }
  CalibrationReport rep;
  std::size_t tn = 0, tin = 0;
  double tc = 0.0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    tn += n[k];
    tin += inside[k];
    tc += crps[k];
    if (n[k] == 0) continue;
    rep.rows.push_back(
        {feature_label(params, static_cast<Eigen::Index>(k)), n[k], level, double(inside[k]) / double(n[k]), crps[k] / double(n[k])});
  }
  if (tn == 0) throw DataError("calibrate: no visit follows an earlier visit; nothing to score");
  rep.rows.push_back({"all", tn, level, double(tin) / double(tn), tc / double(tn)});
  return rep;
}

void write_calibration_csv(std::ostream& out, const CalibrationReport& report) {
  out << "feature,n,level,picp,mean_crps\n";
  for (const auto& r : report.rows)
    out << io::csv_escape(r.feature) << ',' << r.n << ',' << io::format_double(r.level) << ','
        << io::format_double(r.picp) << ',' << io::format_double(r.mean_crps) << '\n';
}

GroupKey parse_group_key(std::string_view text) {
  if (text == "sex") return GroupKey::Sex;
  if (text == "apoe4") return GroupKey::APOE4;
  if (text == "age" || text == "age-band" || text == "age_band") return GroupKey::AgeBand;
  throw UsageError("unknown group key '" + std::string(text) + "' (expected sex, apoe4 or age-band)");
}

std::string_view group_key_name(GroupKey key) {
  switch (key) {
    case GroupKey::Sex: return "sex";
    case GroupKey::APOE4: return "apoe4";
    case GroupKey::AgeBand: return "age-band";
  }
  return "";
}

namespace {

std::string group_of(const PatientTrajectory& p, GroupKey key) {
  for (const auto& v : p.visits) {
    const auto& d = v.demographics;
    switch (key) {
      case GroupKey::Sex:
        if (d.sex) return *d.sex == Sex::Female ? "Female" : "Male";
        break;
      case GroupKey::APOE4:
        if (d.apoe4_count) return std::to_string(*d.apoe4_count);
        break;
      case GroupKey::AgeBand:
        if (d.age) {
          const long lo = static_cast<long>(std::floor(*d.age / 10.0)) * 10;
          return std::to_string(lo) + "-" + std::to_string(lo + 9);
        }
        break;
    }
  }
  return "missing";
}

}  // namespace

std::vector<SubgroupRow> subgroup_report(const ablation::EvalReport& report, const Cohort& cohort, GroupKey key,
                                         std::size_t min_n) {
  std::map<std::string, std::string, std::less<>> group;
  for (const auto& p : cohort) group[p.patient_id] = group_of(p, key);

  std::vector<SubgroupRow> rows;
  for (std::size_t s = 0; s < report.results.size(); ++s) {
    std::map<std::string, SubgroupRow> acc;
    for (const auto& pr : report.predictions) {
      if (pr.spec != s) continue;
      const auto it = group.find(pr.patient_id);
      if (it == group.end()) throw DataError("subgroup_report: patient " + pr.patient_id + " not in cohort");
      auto& r = acc[it->second];
      r.spec = report.results[s].spec.name;
      r.group = it->second;
      ++r.n;
      if (pr.adas13) {
        const double e = *pr.adas13 - pr.target.adas13;
        r.adas13_sse += e * e;
        ++r.n_adas13;
      }
      if (pr.ventricles) {
        const double e = *pr.ventricles - pr.target.ventricles;
        r.ventricles_sse += e * e;
        ++r.n_ventricles;
      }
      if (pr.diagnosis) {
        ++r.n_diagnosis;
        if (*pr.diagnosis == static_cast<int>(pr.target.diagnosis)) ++r.correct;
      }
    }
    for (auto& [name, r] : acc) {
      r.suppressed = r.n < min_n;
      if (r.n_adas13) r.adas13_rmse = std::sqrt(r.adas13_sse / double(r.n_adas13));
      if (r.n_ventricles) r.ventricles_rmse = std::sqrt(r.ventricles_sse / double(r.n_ventricles));
      if (r.n_diagnosis) r.accuracy = double(r.correct) / double(r.n_diagnosis);
      rows.push_back(r);
    }
  }
  if (rows.empty() || std::all_of(rows.begin(), rows.end(), [](const SubgroupRow& r) { return r.suppressed; }))
    throw DataError("subgroup_report: every subgroup has fewer than " + std::to_string(min_n) +
                    " test pairs; use a larger cohort or a larger test fraction");
  return rows;
}

void write_subgroup_csv(std::ostream& out, const std::vector<SubgroupRow>& rows) {
  out << "spec,group,n,suppressed,adas13_rmse,ventricles_rmse,accuracy\n";
  for (const auto& r : rows) {
    out << io::csv_escape(r.spec) << ',' << io::csv_escape(r.group) << ',' << r.n << ',' << (r.suppressed ? 1 : 0);
    if (r.suppressed) {
      out << ",NA,NA,NA\n";
      continue;
    }
    out << ',' << (r.n_adas13 ? io::format_double(r.adas13_rmse) : "NA") << ','
        << (r.n_ventricles ? io::format_double(r.ventricles_rmse) : "NA") << ','
        << (r.n_diagnosis ? io::format_double(r.accuracy) : "NA") << '\n';
  }
}

}  // namespace trajectwin::vvuq
