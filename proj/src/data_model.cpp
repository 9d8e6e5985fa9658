#include "trajectwin/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "trajectwin/io.hpp"

namespace trajectwin {

namespace {

constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "CDRSB",      "ADAS11",      "ADAS13",     "MMSE",       "RAVLT_immediate", "FAQ",
    "MOCA",       "Ventricles",  "Hippocampus", "WholeBrain", "Entorhinal",     "Fusiform",
    "MidTemp",    "ICV",         "AGE",        "PTGENDER",   "PTEDUCAT",       "APOE4",
};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<Sex> parse_sex(std::string_view cell) {
  const auto s = lower(io::trim(cell));
  if (s == "male" || s == "m" || s == "0") return Sex::Male;
  if (s == "female" || s == "f" || s == "1") return Sex::Female;
  return std::nullopt;
}

double median_of(std::vector<double> v) {
  const auto n = v.size();
  std::sort(v.begin(), v.end());
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string_view feature_name(std::size_t index) {
  if (index >= kFeatureCount) throw ShapeError("feature index out of range");
  return kFeatureNames[index];
}

std::optional<std::size_t> feature_index(std::string_view name) {
  for (std::size_t i = 0; i < kFeatureCount; ++i)
    if (kFeatureNames[i] == name) return i;
  return std::nullopt;
}

std::vector<std::string> all_feature_names() {
  return {kFeatureNames.begin(), kFeatureNames.end()};
}

std::string_view diagnosis_name(Diagnosis dx) {
  switch (dx) {
    case Diagnosis::CN: return "CN";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::AD: return "AD";
  }
  return "?";
}

std::optional<Diagnosis> parse_diagnosis(std::string_view text) {
  auto s = lower(io::trim(text));
  // Conversion labels ("MCI to Dementia") name the destination state.
  if (const auto pos = s.rfind(" to "); pos != std::string::npos) s = s.substr(pos + 4);
  if (s == "cn" || s == "nl" || s == "smc" || s == "0") return Diagnosis::CN;
  if (s == "mci" || s == "emci" || s == "lmci" || s == "1") return Diagnosis::MCI;
  if (s == "ad" || s == "dementia" || s == "2") return Diagnosis::AD;
  return std::nullopt;
}

std::optional<double> VisitRecord::feature(std::size_t index) const {
  if (index < kCognitiveFeatures) return cognitive[index];
  if (index < kCognitiveFeatures + kMriFeatures) return mri[index - kCognitiveFeatures];
  switch (index) {
    case feature::Age: return demographics.age;
    case feature::Sex:
      if (!demographics.sex) return std::nullopt;
      return static_cast<double>(*demographics.sex);
    case feature::Education: return demographics.education;
    case feature::APOE4:
      if (!demographics.apoe4_count) return std::nullopt;
      return static_cast<double>(*demographics.apoe4_count);
    default: throw ShapeError("feature index out of range");
  }
}

void VisitRecord::set_feature(std::size_t index, std::optional<double> value) {
  if (index < kCognitiveFeatures) {
    cognitive[index] = value;
  } else if (index < kCognitiveFeatures + kMriFeatures) {
    mri[index - kCognitiveFeatures] = value;
  } else if (index == feature::Age) {
    demographics.age = value;
  } else if (index == feature::Sex) {
    demographics.sex = value ? std::optional<Sex>(*value >= 0.5 ? Sex::Female : Sex::Male)
                             : std::nullopt;
  } else if (index == feature::Education) {
    demographics.education = value;
  } else if (index == feature::APOE4) {
    demographics.apoe4_count =
        value ? std::optional<int>(static_cast<int>(std::lround(*value))) : std::nullopt;
  } else {
    throw ShapeError("feature index out of range");
  }
}

std::size_t VisitRecord::missing_count() const {
  std::size_t n = diagnosis ? 0 : 1;
  for (std::size_t i = 0; i < kFeatureCount; ++i)
    if (!feature(i)) ++n;
  return n;
}

bool VisitRecord::has_complete_targets() const {
  return diagnosis.has_value() && cognitive[feature::ADAS13].has_value() &&
         mri[feature::Ventricles - kCognitiveFeatures].has_value();
}

std::optional<Diagnosis> PatientTrajectory::baseline_diagnosis() const {
  for (const auto& v : visits)
    if (v.diagnosis) return v.diagnosis;
  return std::nullopt;
}

void validate(const PatientTrajectory& trajectory) {
  for (std::size_t i = 0; i < trajectory.visits.size(); ++i) {
    const auto& v = trajectory.visits[i];
    if (v.patient_id != trajectory.patient_id)
      throw DataError("visit patient id mismatch in trajectory " + trajectory.patient_id);
    if (!(v.t >= 0.0) || !std::isfinite(v.t))
      throw DataError("negative or non-finite visit time for patient " + trajectory.patient_id);
    if (i > 0 && !(v.t > trajectory.visits[i - 1].t))
      throw DataError("visit times not strictly increasing for patient " + trajectory.patient_id);
    if (v.demographics.apoe4_count && (*v.demographics.apoe4_count < 0 || *v.demographics.apoe4_count > 2))
      throw DataError("APOE4 count outside {0,1,2} for patient " + trajectory.patient_id);
    const auto& icv = v.mri[feature::ICV - kCognitiveFeatures];
    if (icv && !(*icv > 0.0)) throw DataError("non-positive ICV for patient " + trajectory.patient_id);
  }
}

ColumnMap ColumnMap::defaults() {
  ColumnMap map;
  for (auto name : {"RID", "M", "DX", "SYNTH"}) map.columns.emplace(name, name);
  for (auto name : kFeatureNames) map.columns.emplace(std::string(name), std::string(name));
  return map;
}

ColumnMap ColumnMap::from_mapping(std::istream& in) {
  ColumnMap map = defaults();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = io::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw SchemaError("mapping line " + std::to_string(line_no) + ": expected key=value");
    const std::string key(io::trim(body.substr(0, eq)));
    const std::string value(io::trim(body.substr(eq + 1)));
    auto it = map.columns.find(key);
    if (it == map.columns.end())
      throw SchemaError("mapping line " + std::to_string(line_no) + ": unknown field '" + key + "'");
    it->second = value;
  }
  return map;
}

const std::string& ColumnMap::column_for(std::string_view canonical) const {
  auto it = columns.find(canonical);
  if (it == columns.end()) throw SchemaError("no column binding for " + std::string(canonical));
  return it->second;
}

IngestResult ingest_csv(std::istream& in, const ColumnMap& schema) {
  IngestResult result;
  std::vector<std::string> header;
  if (!io::read_csv_record(in, header) || (header.size() == 1 && io::trim(header[0]).empty())) {
    throw DataError("empty cohort file");
  }
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < header.size(); ++i) position.emplace(std::string(io::trim(header[i])), i);

  auto locate = [&](std::string_view canonical) -> std::optional<std::size_t> {
    auto it = position.find(schema.column_for(canonical));
    if (it == position.end()) return std::nullopt;
    return it->second;
  };
  std::vector<std::string> missing;
  const auto id_col = locate("RID");
  const auto time_col = locate("M");
  if (!id_col) missing.push_back(schema.column_for("RID"));
  if (!time_col) missing.push_back(schema.column_for("M"));
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw SchemaError("missing mandatory columns: " + names);
  }
  const auto dx_col = locate("DX");
  const auto synth_col = locate("SYNTH");
  std::array<std::optional<std::size_t>, kFeatureCount> feature_cols;
  for (std::size_t f = 0; f < kFeatureCount; ++f) feature_cols[f] = locate(kFeatureNames[f]);

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<VisitRecord>> by_patient;
  std::vector<std::string> row;
  std::size_t invalid_cells = 0;
  std::size_t row_no = 1;
  while (io::read_csv_record(in, row)) {
    ++row_no;
    if (row.size() == 1 && io::trim(row[0]).empty()) continue;
    ++result.rows;
    auto cell = [&](std::optional<std::size_t> col) -> std::string_view {
      if (!col || *col >= row.size()) return {};
      return row[*col];
    };
    VisitRecord v;
    v.patient_id = std::string(io::trim(cell(id_col)));
    const auto t = io::parse_number(cell(time_col));
    if (v.patient_id.empty() || !t) {
      result.warnings.push_back("row " + std::to_string(row_no) + ": missing patient id or time, skipped");
      continue;
    }
    if (*t < 0.0) throw DataError("row " + std::to_string(row_no) + ": negative visit time");
    v.t = *t;
    v.diagnosis = parse_diagnosis(cell(dx_col));
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      if (!feature_cols[f]) continue;
      const auto text = cell(feature_cols[f]);
      if (f == feature::Sex) {
        v.demographics.sex = parse_sex(text);
        continue;
      }
      auto value = io::parse_number(text);
      if (value && f == feature::APOE4 && !(*value == 0.0 || *value == 1.0 || *value == 2.0)) {
        value.reset();
        ++invalid_cells;
      }
      if (value && f == feature::ICV && !(*value > 0.0)) {
        value.reset();
        ++invalid_cells;
      }
      v.set_feature(f, value);
    }
    if (synth_col) {
      const auto s = lower(io::trim(cell(synth_col)));
      v.synthetic = (s == "1" || s == "true" || s == "yes");
    }
    auto [it, inserted] = by_patient.try_emplace(v.patient_id);
    if (inserted) order.push_back(v.patient_id);
    it->second.push_back(std::move(v));
  }
  if (result.rows == 0) throw DataError("empty cohort file");
  if (invalid_cells > 0)
    result.warnings.push_back(std::to_string(invalid_cells) + " out-of-range cells treated as missing");

  for (const auto& id : order) {
    auto& rows = by_patient[id];
    // Stable sort keeps first occurrence ahead among equal times.
    std::stable_sort(rows.begin(), rows.end(),
                     [](const VisitRecord& a, const VisitRecord& b) { return a.t < b.t; });
    PatientTrajectory traj;
    traj.patient_id = id;
    for (auto& v : rows) {
      if (!traj.visits.empty() && traj.visits.back().t == v.t) {
        ++result.duplicates_removed;
        if (v.missing_count() < traj.visits.back().missing_count()) traj.visits.back() = std::move(v);
        continue;
      }
      traj.visits.push_back(std::move(v));
    }
    validate(traj);
    result.cohort.push_back(std::move(traj));
  }
  if (result.duplicates_removed > 0)
    result.warnings.push_back(std::to_string(result.duplicates_removed) + " duplicate (patient, time) rows resolved");
  return result;
}

void write_cohort_csv(std::ostream& out, const Cohort& cohort) {
  out << "RID,M,DX";
  for (auto name : kFeatureNames) out << ',' << name;
  out << ",SYNTH\n";
  for (const auto& traj : cohort) {
    for (const auto& v : traj.visits) {
      out << io::csv_escape(v.patient_id) << ',' << io::format_double(v.t) << ',';
      if (v.diagnosis) out << diagnosis_name(*v.diagnosis);
      for (std::size_t f = 0; f < kFeatureCount; ++f) {
        out << ',';
        if (f == feature::Sex) {
          if (v.demographics.sex) out << (*v.demographics.sex == Sex::Female ? "Female" : "Male");
          continue;
        }
        if (const auto value = v.feature(f)) out << io::format_double(*value);
      }
      out << ',' << (v.synthetic ? 1 : 0) << '\n';
    }
  }
}

bool StandardizationStats::is_dropped(std::size_t index) const {
  return std::find(dropped.begin(), dropped.end(), index) != dropped.end();
}

double StandardizationStats::standardize(std::size_t index, double value) const {
  if (is_dropped(index)) return 0.0;
  return (value - mean[index]) / sd[index];
}

double StandardizationStats::destandardize(std::size_t index, double z) const {
  if (is_dropped(index)) return median[index];
  return z * sd[index] + mean[index];
}

std::size_t CleanCohort::visit_count() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.visits.size();
  return n;
}

std::size_t CleanCohort::eligible_visit_count() const {
  std::size_t n = 0;
  for (const auto& t : trajectories)
    for (const auto& v : t.visits) n += v.target_eligible ? 1 : 0;
  return n;
}

CleanCohort clean_and_standardize(const Cohort& cohort, const std::set<std::string>& train_ids) {
  if (train_ids.empty()) throw DataError("clean_and_standardize: empty training patient set");
  CleanCohort out;
  auto& stats = out.stats;
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    std::vector<double> values;
    for (const auto& traj : cohort) {
      if (!train_ids.contains(traj.patient_id)) continue;
      for (const auto& v : traj.visits)
        if (const auto x = v.feature(f)) values.push_back(*x);
    }
    stats.median[f] = values.empty() ? 0.0 : median_of(values);
    if (values.size() < 2) {
      stats.mean[f] = stats.median[f];
      stats.sd[f] = 0.0;
    } else {
      const double n = static_cast<double>(values.size());
      const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
      double ss = 0.0;
      for (double x : values) ss += (x - mean) * (x - mean);
      stats.mean[f] = mean;
      stats.sd[f] = std::sqrt(ss / (n - 1.0));
    }
    const double scale = std::max(1.0, std::abs(stats.mean[f]));
    if (!(stats.sd[f] > 1e-12 * scale)) {
      stats.dropped.push_back(f);
      out.warnings.push_back("feature " + std::string(kFeatureNames[f]) +
                             " is constant or unobserved on the training split; dropped");
    }
  }
  for (const auto& traj : cohort) {
    CleanTrajectory ct;
    ct.patient_id = traj.patient_id;
    ct.synthetic = traj.synthetic();
    for (const auto& v : traj.visits) {
      CleanVisit cv;
      cv.t = v.t;
      cv.diagnosis = v.diagnosis;
      cv.target_eligible = v.has_complete_targets();
      for (std::size_t f = 0; f < kFeatureCount; ++f) {
        const auto x = v.feature(f);
        cv.observed[f] = x.has_value();
        cv.values[f] = stats.standardize(f, x.value_or(stats.median[f]));
      }
      ct.visits.push_back(cv);
    }
    out.trajectories.push_back(std::move(ct));
  }
  return out;
}

std::vector<SequencePair> build_sequence_pairs(const CleanCohort& cohort) {
  std::vector<SequencePair> pairs;
  for (const auto& traj : cohort.trajectories) {
    std::vector<HistoryVisit> history;
    for (std::size_t k = 0; k < traj.visits.size(); ++k) {
      const auto& v = traj.visits[k];
      if (k >= 1 && v.target_eligible) {
        SequencePair pair;
        pair.patient_id = traj.patient_id;
        pair.synthetic = traj.synthetic;
        pair.target_visit = k;
        pair.target_time = v.t;
        pair.history = history;
        pair.target.adas13 = v.values[feature::ADAS13];
        pair.target.ventricles = v.values[feature::Ventricles];
        pair.target.diagnosis = *v.diagnosis;
        pairs.push_back(std::move(pair));
      }
      HistoryVisit h;
      h.t = v.t;
      h.gap_months = history.empty() ? 0.0 : v.t - history.back().t;
      h.values = v.values;
      h.observed = v.observed;
      h.diagnosis = v.diagnosis;
      history.push_back(h);
    }
  }
  return pairs;
}

std::vector<PairKey> enumerate_pairs(const Cohort& cohort) {
  std::vector<PairKey> keys;
  for (const auto& traj : cohort)
    for (std::size_t k = 1; k < traj.visits.size(); ++k)
      if (traj.visits[k].has_complete_targets())
        keys.push_back({traj.patient_id, k, traj.visits[k].synthetic});
  return keys;
}

std::vector<PairKey> pair_keys(const std::vector<SequencePair>& pairs) {
  std::vector<PairKey> keys;
  keys.reserve(pairs.size());
  for (const auto& p : pairs) keys.push_back({p.patient_id, p.target_visit, p.synthetic});
  return keys;
}

std::string_view split_mode_name(SplitMode mode) {
  return mode == SplitMode::PatientDisjoint ? "patient-disjoint" : "pair-level";
}

SplitMode parse_split_mode(std::string_view text) {
  if (text == "patient-disjoint" || text == "patient") return SplitMode::PatientDisjoint;
  if (text == "pair-level" || text == "pair") return SplitMode::PairLevel;
  throw UsageError("unknown split mode '" + std::string(text) + "' (patient-disjoint|pair-level)");
}

CohortSplit split_cohort(const std::vector<PairKey>& pairs, const SplitRatios& ratios,
                         SplitMode mode, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.validation > 0 && ratios.test > 0))
    throw UsageError("split ratios must be positive");
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9)
    throw UsageError("split ratios must sum to 1");

  CohortSplit split;
  split.mode = mode;
  split.seed = seed;
  Rng rng(derive_seed(seed, "split"));

  auto fold_sizes = [&](std::size_t n) {
    const auto val = static_cast<std::size_t>(std::floor(ratios.validation * double(n) + 1e-9));
    const auto test = static_cast<std::size_t>(std::floor(ratios.test * double(n) + 1e-9));
    const std::size_t train = n - val - test;
    if (train == 0 || val == 0 || test == 0)
      throw DataError("split would leave an empty fold (" + std::to_string(n) + " units)");
    return std::array<std::size_t, 3>{train, val, test};
  };

  if (mode == SplitMode::PairLevel) {
    std::vector<std::size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto sizes = fold_sizes(idx.size());
    split.train.assign(idx.begin(), idx.begin() + sizes[0]);
    split.validation.assign(idx.begin() + sizes[0], idx.begin() + sizes[0] + sizes[1]);
    split.test.assign(idx.begin() + sizes[0] + sizes[1], idx.end());
  } else {
    std::vector<std::string> patients;
    std::set<std::string> seen;
    for (const auto& p : pairs)
      if (seen.insert(p.patient_id).second) patients.push_back(p.patient_id);
    std::shuffle(patients.begin(), patients.end(), rng);
    const auto sizes = fold_sizes(patients.size());
    split.train_patients.assign(patients.begin(), patients.begin() + sizes[0]);
    split.validation_patients.assign(patients.begin() + sizes[0], patients.begin() + sizes[0] + sizes[1]);
    split.test_patients.assign(patients.begin() + sizes[0] + sizes[1], patients.end());
    const std::set<std::string> val(split.validation_patients.begin(), split.validation_patients.end());
    const std::set<std::string> test(split.test_patients.begin(), split.test_patients.end());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (val.contains(pairs[i].patient_id)) split.validation.push_back(i);
      else if (test.contains(pairs[i].patient_id)) split.test.push_back(i);
      else split.train.push_back(i);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::set<std::string> training_patients(const CohortSplit& split, const std::vector<PairKey>& pairs) {
  if (split.mode == SplitMode::PatientDisjoint)
    return {split.train_patients.begin(), split.train_patients.end()};
  std::set<std::string> ids;
  for (auto i : split.train) ids.insert(pairs.at(i).patient_id);
  return ids;
}

}  // namespace trajectwin
