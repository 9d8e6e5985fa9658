#pragma once

// Cohort schema, CSV ingestion, train-only cleaning and the construction of
// history -> next-visit sequence pairs and their folds.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "trajectwin/common.hpp"

namespace trajectwin {

enum class Diagnosis : std::uint8_t { CN = 0, MCI = 1, AD = 2 };
enum class Sex : std::uint8_t { Male = 0, Female = 1 };

inline constexpr std::size_t kDiagnosisClasses = 3;
inline constexpr std::size_t kCognitiveSlots = 8;  // 7 scores + one reserved slot
inline constexpr std::size_t kCognitiveFeatures = 7;
inline constexpr std::size_t kMriFeatures = 7;
inline constexpr std::size_t kDemographicFeatures = 4;
inline constexpr std::size_t kFeatureCount =
    kCognitiveFeatures + kMriFeatures + kDemographicFeatures;

// Flat feature indexing used everywhere downstream of ingestion. The order is
// the fused-vector concatenation order: cognitive, MRI, demographics.
namespace feature {
enum : std::size_t {
  CDRSB = 0,
  ADAS11,
  ADAS13,
  MMSE,
  RAVLT_immediate,
  FAQ,
  MOCA,
  Ventricles,
  Hippocampus,
  WholeBrain,
  Entorhinal,
  Fusiform,
  MidTemp,
  ICV,
  Age,
  Sex,
  Education,
  APOE4,
};
}  // namespace feature

std::string_view feature_name(std::size_t index);
std::optional<std::size_t> feature_index(std::string_view name);
std::vector<std::string> all_feature_names();

std::string_view diagnosis_name(Diagnosis dx);
std::optional<Diagnosis> parse_diagnosis(std::string_view text);

struct Demographics {
  std::optional<double> age;  // years at baseline
  std::optional<Sex> sex;
  std::optional<double> education;  // years
  std::optional<int> apoe4_count;   // 0..2
};

struct VisitRecord {
  std::string patient_id;
  double t = 0.0;  // months since baseline
  std::optional<Diagnosis> diagnosis;
  std::array<std::optional<double>, kCognitiveSlots> cognitive{};
  std::array<std::optional<double>, kMriFeatures> mri{};
  Demographics demographics;
  bool synthetic = false;

  std::optional<double> feature(std::size_t index) const;
  void set_feature(std::size_t index, std::optional<double> value);
  // Missing optional fields, diagnosis included.
  std::size_t missing_count() const;
  bool has_complete_targets() const;
};

struct PatientTrajectory {
  std::string patient_id;
  std::vector<VisitRecord> visits;  // strictly increasing t

  bool synthetic() const { return !visits.empty() && visits.front().synthetic; }
  std::optional<Diagnosis> baseline_diagnosis() const;
};

using Cohort = std::vector<PatientTrajectory>;

// Throws DataError on any invariant violation (ordering, ids, ranges).
void validate(const PatientTrajectory& trajectory);

// Maps canonical field names (RID, M, DX, ADAS13, ..., SYNTH) to the column
// names present in a file.
struct ColumnMap {
  std::map<std::string, std::string, std::less<>> columns;

  static ColumnMap defaults();
  // Reads `canonical=actual` lines; blank lines and '#' comments are skipped.
  static ColumnMap from_mapping(std::istream& in);
  const std::string& column_for(std::string_view canonical) const;
};

struct IngestResult {
  Cohort cohort;
  Warnings warnings;
  std::size_t rows = 0;
  std::size_t duplicates_removed = 0;
};

IngestResult ingest_csv(std::istream& in, const ColumnMap& schema = ColumnMap::defaults());

// Writes the canonical schema (default column names plus SYNTH).
void write_cohort_csv(std::ostream& out, const Cohort& cohort);

struct StandardizationStats {
  std::array<double, kFeatureCount> median{};
  std::array<double, kFeatureCount> mean{};
  std::array<double, kFeatureCount> sd{};
  std::vector<std::size_t> dropped;  // constant or unobserved on the training split

  bool is_dropped(std::size_t index) const;
  double standardize(std::size_t index, double value) const;
  double destandardize(std::size_t index, double z) const;
};

struct CleanVisit {
  double t = 0.0;
  std::array<double, kFeatureCount> values{};     // imputed, then z-scored
  std::array<bool, kFeatureCount> observed{};     // presence before imputation
  std::optional<Diagnosis> diagnosis;
  bool target_eligible = false;                   // ADAS13, Ventricles, DX all present
};

struct CleanTrajectory {
  std::string patient_id;
  bool synthetic = false;
  std::vector<CleanVisit> visits;
};

struct CleanCohort {
  std::vector<CleanTrajectory> trajectories;
  StandardizationStats stats;
  Warnings warnings;

  std::size_t visit_count() const;
  std::size_t eligible_visit_count() const;
};

CleanCohort clean_and_standardize(const Cohort& cohort, const std::set<std::string>& train_ids);

struct HistoryVisit {
  double t = 0.0;
  double gap_months = 0.0;  // 0 for the first visit
  std::array<double, kFeatureCount> values{};
  std::array<bool, kFeatureCount> observed{};
  std::optional<Diagnosis> diagnosis;
};

struct PairTarget {
  double adas13 = 0.0;      // standardized
  double ventricles = 0.0;  // standardized
  Diagnosis diagnosis = Diagnosis::CN;
};

struct SequencePair {
  std::string patient_id;
  bool synthetic = false;
  std::size_t target_visit = 0;  // index within the patient's visits
  double target_time = 0.0;
  std::vector<HistoryVisit> history;  // visits 0..target_visit-1
  PairTarget target;
};

std::vector<SequencePair> build_sequence_pairs(const CleanCohort& cohort);

// Identity of a pair before cleaning: eligibility depends only on raw
// presence, so keys can be enumerated (and split) before statistics exist.
struct PairKey {
  std::string patient_id;
  std::size_t target_visit = 0;
  bool synthetic = false;
  auto operator<=>(const PairKey&) const = default;
};

std::vector<PairKey> enumerate_pairs(const Cohort& cohort);
std::vector<PairKey> pair_keys(const std::vector<SequencePair>& pairs);

enum class SplitMode { PatientDisjoint, PairLevel };
std::string_view split_mode_name(SplitMode mode);
SplitMode parse_split_mode(std::string_view text);

struct SplitRatios {
  double train = 0.8;
  double validation = 0.15;
  double test = 0.05;
};

struct CohortSplit {
  SplitMode mode = SplitMode::PatientDisjoint;
  std::uint64_t seed = 0;
  // Indices into the pair list the split was built from, ascending.
  std::vector<std::size_t> train, validation, test;
  // Patient folds (patient-disjoint mode only), in shuffled order.
  std::vector<std::string> train_patients, validation_patients, test_patients;
};

CohortSplit split_cohort(const std::vector<PairKey>& pairs, const SplitRatios& ratios,
                         SplitMode mode, std::uint64_t seed);

// Patients whose visits may inform standardization statistics: the training
// patients in patient-disjoint mode, or every patient owning a training pair
// in pair-level mode.
std::set<std::string> training_patients(const CohortSplit& split,
                                        const std::vector<PairKey>& pairs);

}  // namespace trajectwin
