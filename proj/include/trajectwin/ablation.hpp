#pragma once

// Modality-ablation harness: feature-panel assembly, the LOCF baseline, the
// recurrent and state-space predictors, the evaluation report and its
// renderings, trend summaries and permutation importance.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "trajectwin/data_model.hpp"
#include "trajectwin/io.hpp"
#include "trajectwin/rnn.hpp"
#include "trajectwin/ssm.hpp"

namespace trajectwin::ablation {

enum class Modality : std::uint8_t { Cognitive = 1, Mri = 2, Demographics = 4 };
enum class PredictorKind { LOCF, Recurrent, SSM };

std::string_view predictor_name(PredictorKind kind);

struct AblationSpec {
  std::string name;
  unsigned modalities = 0;  // bitwise OR of Modality
  PredictorKind predictor = PredictorKind::LOCF;

  bool has(Modality m) const { return (modalities & static_cast<unsigned>(m)) != 0; }
  // Flat feature indices, in concatenation order.
  std::vector<std::size_t> features() const;
  int width() const { return static_cast<int>(features().size()); }
  void validate() const;

  // "name=cognitive+mri:recurrent"; the predictor defaults to recurrent and
  // the name to the modality string.
  static AblationSpec parse(std::string_view text);
  std::string to_string() const;
};

// LOCF, cognitive, MRI, cognitive+MRI and the full model.
std::vector<AblationSpec> default_specs();

// Fused input vector of one history visit; optionally appends the gap since
// the previous visit (months / 12).
Vector assemble_features(const HistoryVisit& visit, const AblationSpec& spec, bool include_gap = false);
std::vector<Vector> assemble_history(const SequencePair& pair, const AblationSpec& spec, bool include_gap = false);

struct LocfPrediction {
  std::optional<double> adas13;
  std::optional<double> ventricles;
  std::optional<Diagnosis> diagnosis;
};

// Most recent observed value of each target in the history.
LocfPrediction locf_predict(const std::vector<HistoryVisit>& history);

// sqrt(mean((p - t)^2)); throws DataError on empty or mismatched input.
double standardized_rmse(const std::vector<double>& predictions, const std::vector<double>& targets);

enum class TargetKind { ADAS13, Ventricles };
std::string_view target_name(TargetKind target);

struct AblationConfig {
  SplitRatios ratios;
  SplitMode mode = SplitMode::PatientDisjoint;
  std::uint64_t seed = 42;
  rnn::RNNConfig rnn;
  bool include_gap = false;
  int ssm_latent_dim = 4;
  double ssm_delta = 6.0;
  int ssm_max_iters = 50;
  double ssm_tol = 1e-6;
  int threads = 1;
};

struct PreparedData {
  std::size_t records = 0;  // raw visits
  CleanCohort clean;
  std::vector<SequencePair> pairs;
  CohortSplit split;
};

// Enumerates pairs, splits them, computes train-only statistics and builds
// the standardized pairs (in the same order as the split indices).
PreparedData prepare(const Cohort& cohort, const AblationConfig& config);

struct PairPrediction {
  std::size_t spec = 0;
  std::string patient_id;
  std::size_t target_visit = 0;
  double target_time = 0.0;
  bool synthetic = false;
  std::optional<double> adas13;
  std::optional<double> ventricles;
  std::optional<double> adas13_sd;  // predictive sd, SSM only
  std::optional<double> ventricles_sd;
  std::optional<int> diagnosis;
  PairTarget target;
};

struct SpecResult {
  AblationSpec spec;
  bool failed = false;
  std::string error;
  double adas13_rmse = 0.0;
  double ventricles_rmse = 0.0;
  double accuracy = 0.0;
  // Mean Gaussian CRPS; point predictors use sd = 0, so this is the MAE.
  double adas13_crps = 0.0;
  double ventricles_crps = 0.0;
  std::size_t n_adas13 = 0, n_ventricles = 0, n_diagnosis = 0;
  // Test pairs without a usable prediction (LOCF target never observed).
  std::size_t excluded_adas13 = 0, excluded_ventricles = 0, excluded_diagnosis = 0;
  rnn::TrainingTrace trace;
  Warnings warnings;
};

struct FoldCounts {
  std::size_t pairs = 0;
  std::size_t patients = 0;
  std::size_t synthetic_pairs = 0;
  std::size_t synthetic_patients = 0;
};

struct EvalReport {
  std::uint64_t seed = 0;
  SplitMode mode = SplitMode::PatientDisjoint;
  std::size_t records = 0;
  std::size_t cleaned_visits = 0;
  std::size_t eligible_visits = 0;
  std::size_t pairs = 0;
  FoldCounts train, validation, test;
  std::vector<std::string> dropped_features;
  std::vector<SpecResult> results;
  std::vector<PairPrediction> predictions;  // test pairs, spec-major
  Warnings warnings;
};

EvalReport run_ablation(const PreparedData& data, const std::vector<AblationSpec>& specs,
                        const AblationConfig& config);
EvalReport run_ablation(const Cohort& cohort, const std::vector<AblationSpec>& specs, const AblationConfig& config);

// Aligned text mirroring the model / ADAS13 RMSE / Ventricles RMSE table.
std::string format_table(const EvalReport& report);
io::json report_to_json(const EvalReport& report);
void write_predictions_csv(std::ostream& out, const EvalReport& report);
void write_trace_csv(std::ostream& out, const rnn::TrainingTrace& trace);

// Per-pair prediction of (ADAS13, Ventricles) from a history.
using PairPredictor = std::function<std::array<double, 2>(const std::vector<HistoryVisit>&)>;

PairPredictor recurrent_predictor(const rnn::RNNParameters& params, const AblationSpec& spec, bool include_gap);

// SSM over the ablation spec's features plus both targets; missing values are masked.
struct SsmPredictor {
  ssm::SSMParameters params;
  std::vector<std::size_t> features;  // flat indices forming the observation vector
  std::size_t adas13_row = 0, ventricles_row = 0;

  static std::vector<std::size_t> observation_features(const AblationSpec& spec, const StandardizationStats& stats);
  ssm::ObservedTrajectory observe(const std::vector<HistoryVisit>& visits) const;
  ssm::ForecastEntry predict(const std::vector<HistoryVisit>& history, double target_time) const;
};

// EM on the training fold, each patient truncated after its last training target.
SsmPredictor fit_ssm_predictor(const PreparedData& data, const AblationSpec& spec, const AblationConfig& config,
                               Warnings& warnings);

ssm::ObservedTrajectory observe_clean(const CleanTrajectory& trajectory, const std::vector<std::size_t>& features,
                                      std::size_t visits);

struct TrendRow {
  long bin = 0;
  Diagnosis group = Diagnosis::CN;
  double mean = 0.0;
  std::optional<double> standard_error;  // missing when n = 1
  std::size_t n = 0;
};

// Visits grouped by baseline diagnosis and floor(t / bin_months).
std::vector<TrendRow> trend_summary(const Cohort& cohort, std::string_view feature, double bin_months);
void write_trend_csv(std::ostream& out, const std::vector<TrendRow>& rows);

// Mean over repeats of RMSE(permuted) - RMSE(baseline) for one target, where
// the feature's (value, observed) entries are pooled over all history visits
// of all pairs and shuffled.
double permutation_importance(const PairPredictor& predictor, const std::vector<SequencePair>& pairs,
                              std::size_t feature, TargetKind target, int repeats, std::uint64_t seed);

}  // namespace trajectwin::ablation
