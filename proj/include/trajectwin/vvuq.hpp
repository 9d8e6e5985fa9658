#pragma once

// Forecast calibration (interval coverage, Gaussian CRPS), innovation-based
// anomaly flags on the filtering loop, and subgroup disaggregation of
// evaluation reports.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "trajectwin/ablation.hpp"
#include "trajectwin/data_model.hpp"
#include "trajectwin/ssm.hpp"

namespace trajectwin::vvuq {

struct IntervalForecast {
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;  // nominal coverage
  std::string feature;
  double time = 0.0;
};

// Central interval mean +- z_{(1+level)/2} * sd.
IntervalForecast gaussian_interval(double mean, double sd, double level, std::string feature = {}, double time = 0.0);

// Fraction of targets inside [lower, upper], boundaries included.
double picp(const std::vector<IntervalForecast>& intervals, const std::vector<double>& targets);

double crps_gaussian(double mean, double sd, double target);

enum class ActionHint { Refit, Review };
std::string_view action_name(ActionHint hint);

struct AnomalyFlag {
  std::string patient_id;
  double time = 0.0;
  std::vector<std::string> features;  // observed rows of the flagged visit
  double magnitude = 0.0;             // innovation' S^-1 innovation
  double threshold = 0.0;             // chi-square quantile for the observed row count
  double level = 0.0;
  ActionHint hint = ActionHint::Review;
};

// `level` in (0, 1) selects the chi-square quantile. Flagged visits are not
// assimilated, so one corrupted visit cannot contaminate the beliefs used to
// judge the visits after it.
std::vector<AnomalyFlag> detect_anomalies(const ssm::ObservedTrajectory& trajectory, const ssm::SSMParameters& params,
                                          double level);

struct CalibrationRow {
  std::string feature;
  std::size_t n = 0;
  double level = 0.0;
  double picp = 0.0;
  double mean_crps = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationRow> rows;  // one per feature, then "all"
};

// One-step-ahead (next visit) forecasts for every visit after the first:
// filter the preceding visits, forecast over the gap and score each present
// feature.
CalibrationReport calibrate(const std::vector<ssm::ObservedTrajectory>& cohort, const ssm::SSMParameters& params,
                            double level);
void write_calibration_csv(std::ostream& out, const CalibrationReport& report);

enum class GroupKey { Sex, APOE4, AgeBand };
GroupKey parse_group_key(std::string_view text);
std::string_view group_key_name(GroupKey key);

struct SubgroupRow {
  std::string spec;
  std::string group;
  std::size_t n = 0;  // test pairs in the group
  bool suppressed = false;
  double adas13_rmse = 0.0;
  double ventricles_rmse = 0.0;
  double accuracy = 0.0;
  double adas13_sse = 0.0;
  double ventricles_sse = 0.0;
  std::size_t n_adas13 = 0, n_ventricles = 0, n_diagnosis = 0, correct = 0;
};

// Groups test-pair predictions by the patient's baseline demographics (age
// bands are decades). Rows keep squared-error sums even when suppressed so
// that groups add up to the pooled totals.
std::vector<SubgroupRow> subgroup_report(const ablation::EvalReport& report, const Cohort& cohort, GroupKey key,
                                         std::size_t min_n = 10);
void write_subgroup_csv(std::ostream& out, const std::vector<SubgroupRow>& rows);

}  // namespace trajectwin::vvuq
