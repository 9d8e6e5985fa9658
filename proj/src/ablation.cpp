#include "trajectwin/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "trajectwin/vvuq.hpp"

namespace trajectwin::ablation {

namespace {

std::string modality_string(unsigned modalities) {
  std::string s;
  auto add = [&](Modality m, const char* name) {
    if (modalities & static_cast<unsigned>(m)) s += (s.empty() ? "" : "+") + std::string(name);
  };
  add(Modality::Cognitive, "cognitive");
  add(Modality::Mri, "mri");
  add(Modality::Demographics, "demographics");
  return s.empty() ? "none" : s;
}

std::vector<Vector> assemble(const std::vector<HistoryVisit>& history, const AblationSpec& spec, bool include_gap) {
  std::vector<Vector> out;
  out.reserve(history.size());
  for (const auto& h : history) out.push_back(assemble_features(h, spec, include_gap));
  return out;
}

int argmax(const std::array<double, 3>& logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

rnn::Target rnn_target(const PairTarget& t) { return {t.adas13, t.ventricles, static_cast<int>(t.diagnosis)}; }

FoldCounts fold_counts(const std::vector<SequencePair>& pairs, const std::vector<std::size_t>& idx) {
  FoldCounts c;
  std::set<std::string> patients, synthetic;
  for (auto i : idx) {
    const auto& p = pairs[i];
    ++c.pairs;
    patients.insert(p.patient_id);
    if (p.synthetic) {
      ++c.synthetic_pairs;
      synthetic.insert(p.patient_id);
    }
  }
  c.patients = patients.size();
  c.synthetic_patients = synthetic.size();
  return c;
}

void evaluate_spec(const PreparedData& data, const AblationSpec& spec, std::size_t spec_index,
                   const AblationConfig& config, SpecResult& result, std::vector<PairPrediction>& predictions) {
  result.spec = spec;
  spec.validate();
  std::vector<PairPrediction> preds;
  for (auto i : data.split.test) {
    const auto& p = data.pairs[i];
    PairPrediction pr;
    pr.spec = spec_index;
    pr.patient_id = p.patient_id;
    pr.target_visit = p.target_visit;
    pr.target_time = p.target_time;
    pr.synthetic = p.synthetic;
    pr.target = p.target;
    preds.push_back(std::move(pr));
  }

  if (spec.predictor == PredictorKind::LOCF) {
    for (std::size_t k = 0; k < preds.size(); ++k) {
      const auto l = locf_predict(data.pairs[data.split.test[k]].history);
      preds[k].adas13 = l.adas13;
      preds[k].ventricles = l.ventricles;
      if (l.diagnosis) preds[k].diagnosis = static_cast<int>(*l.diagnosis);
    }
  } else if (spec.predictor == PredictorKind::Recurrent) {
    auto rc = config.rnn;
    rc.input_dimension = spec.width() + (config.include_gap ? 1 : 0);
    rc.seed = derive_seed(config.seed, "rnn");
    std::vector<rnn::Example> train, val;
    for (auto i : data.split.train)
      train.push_back({assemble_history(data.pairs[i], spec, config.include_gap), rnn_target(data.pairs[i].target)});
    for (auto i : data.split.validation)
      val.push_back({assemble_history(data.pairs[i], spec, config.include_gap), rnn_target(data.pairs[i].target)});
    auto fit = rnn::train(train, val, rc);
    result.trace = fit.trace;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      const auto out = rnn::forward(assemble_history(data.pairs[data.split.test[k]], spec, config.include_gap),
                                    fit.params);
      preds[k].adas13 = out.adas13;
      preds[k].ventricles = out.ventricles;
      preds[k].diagnosis = argmax(out.logits);
    }
  } else {
    const auto model = fit_ssm_predictor(data, spec, config, result.warnings);
    for (std::size_t k = 0; k < preds.size(); ++k) {
      const auto& p = data.pairs[data.split.test[k]];
      const auto fc = model.predict(p.history, p.target_time);
      const auto a = static_cast<Eigen::Index>(model.adas13_row), v = static_cast<Eigen::Index>(model.ventricles_row);
      preds[k].adas13 = fc.mean(a);
      preds[k].ventricles = fc.mean(v);
      preds[k].adas13_sd = std::sqrt(fc.cov(a, a));
      preds[k].ventricles_sd = std::sqrt(fc.cov(v, v));
      // Diagnosis is carried forward; the state-space model has no class head.
      if (const auto l = locf_predict(p.history).diagnosis) preds[k].diagnosis = static_cast<int>(*l);
    }
  }

  std::vector<double> pa, ta, pv, tv;
  double crps_a = 0.0, crps_v = 0.0;
  std::size_t correct = 0;
  for (const auto& pr : preds) {
    if (pr.adas13) {
      pa.push_back(*pr.adas13);
      ta.push_back(pr.target.adas13);
      crps_a += vvuq::crps_gaussian(*pr.adas13, pr.adas13_sd.value_or(0.0), pr.target.adas13);
    } else {
      ++result.excluded_adas13;
    }
    if (pr.ventricles) {
      pv.push_back(*pr.ventricles);
      tv.push_back(pr.target.ventricles);
      crps_v += vvuq::crps_gaussian(*pr.ventricles, pr.ventricles_sd.value_or(0.0), pr.target.ventricles);
    } else {
      ++result.excluded_ventricles;
    }
    if (pr.diagnosis) {
      ++result.n_diagnosis;
      if (*pr.diagnosis == static_cast<int>(pr.target.diagnosis)) ++correct;
    } else {
      ++result.excluded_diagnosis;
    }
  }
  if (pa.empty() || pv.empty()) throw DataError("no test pair has a prediction for both targets");
  result.n_adas13 = pa.size();
  result.n_ventricles = pv.size();
  result.adas13_rmse = standardized_rmse(pa, ta);
  result.ventricles_rmse = standardized_rmse(pv, tv);
  result.adas13_crps = crps_a / double(pa.size());
  result.ventricles_crps = crps_v / double(pv.size());
  result.accuracy = result.n_diagnosis ? double(correct) / double(result.n_diagnosis) : 0.0;
  predictions = std::move(preds);
}

std::string fmt4(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

io::json fold_json(const FoldCounts& c) {
  return {{"pairs", c.pairs},
          {"patients", c.patients},
          {"synthetic_pairs", c.synthetic_pairs},
          {"synthetic_patients", c.synthetic_patients}};
}

std::string opt_csv(const std::optional<double>& v) { return v ? io::format_double(*v) : "NA"; }

}  // namespace

SsmPredictor fit_ssm_predictor(const PreparedData& data, const AblationSpec& spec, const AblationConfig& config,
                               Warnings& warnings) {
  SsmPredictor pred;
  pred.features = SsmPredictor::observation_features(spec, data.clean.stats);
  for (std::size_t r = 0; r < pred.features.size(); ++r) {
    if (pred.features[r] == feature::ADAS13) pred.adas13_row = r;
    if (pred.features[r] == feature::Ventricles) pred.ventricles_row = r;
  }
  // Each training patient contributes visits up to its last training target.
  std::map<std::string, std::size_t, std::less<>> horizon;
  for (auto i : data.split.train) {
    const auto& p = data.pairs[i];
    auto& h = horizon[p.patient_id];
    h = std::max(h, p.target_visit + 1);
  }
  std::vector<ssm::ObservedTrajectory> train;
  for (const auto& traj : data.clean.trajectories) {
    const auto it = horizon.find(traj.patient_id);
    if (it != horizon.end()) train.push_back(observe_clean(traj, pred.features, it->second));
  }
  ssm::EmConfig em;
  em.max_iters = config.ssm_max_iters;
  em.tol = config.ssm_tol;
  em.seed = derive_seed(config.seed, "ssm");
  em.threads = 1;
  auto fit = ssm::fit_em(train, config.ssm_latent_dim, config.ssm_delta, em);
  warnings.insert(warnings.end(), fit.warnings.begin(), fit.warnings.end());
  pred.params = std::move(fit.params);
  pred.params.feature_names.clear();
  for (auto f : pred.features) pred.params.feature_names.emplace_back(feature_name(f));
  return pred;
}

std::string_view predictor_name(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::LOCF: return "locf";
    case PredictorKind::Recurrent: return "recurrent";
    case PredictorKind::SSM: return "ssm";
  }
  return "";
}

std::vector<std::size_t> AblationSpec::features() const {
  std::vector<std::size_t> f;
  auto range = [&](std::size_t lo, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f.push_back(lo + i);
  };
  if (has(Modality::Cognitive)) range(0, kCognitiveFeatures);
  if (has(Modality::Mri)) range(kCognitiveFeatures, kMriFeatures);
  if (has(Modality::Demographics)) range(kCognitiveFeatures + kMriFeatures, kDemographicFeatures);
  return f;
}

void AblationSpec::validate() const {
  if (modalities > 7) throw UsageError("ablation spec '" + name + "': unknown modality bits");
  if (modalities == 0 && predictor == PredictorKind::Recurrent)
    throw UsageError("ablation spec '" + name + "': needs at least one modality");
}

AblationSpec AblationSpec::parse(std::string_view text) {
  AblationSpec spec;
  std::string s(io::trim(text));
  std::string name;
  if (const auto eq = s.find('='); eq != std::string::npos) {
    name = std::string(io::trim(std::string_view(s).substr(0, eq)));
    s = s.substr(eq + 1);
  }
  spec.predictor = PredictorKind::Recurrent;
  if (const auto colon = s.rfind(':'); colon != std::string::npos) {
    const auto p = std::string(io::trim(std::string_view(s).substr(colon + 1)));
    if (p == "locf") spec.predictor = PredictorKind::LOCF;
    else if (p == "recurrent" || p == "lstm") spec.predictor = PredictorKind::Recurrent;
    else if (p == "ssm") spec.predictor = PredictorKind::SSM;
    else throw UsageError("unknown predictor '" + p + "' (locf|recurrent|ssm)");
    s = s.substr(0, colon);
  }
  std::string_view rest = io::trim(s);
  if (rest == "locf" && spec.predictor != PredictorKind::SSM) {
    spec.predictor = PredictorKind::LOCF;
    rest = "";
  }
  if (rest == "full") rest = "cognitive+mri+demographics";
  while (!rest.empty() && rest != "none") {
    const auto plus = rest.find('+');
    const auto token = io::trim(rest.substr(0, plus));
    if (token == "cognitive" || token == "cog") spec.modalities |= static_cast<unsigned>(Modality::Cognitive);
    else if (token == "mri") spec.modalities |= static_cast<unsigned>(Modality::Mri);
    else if (token == "demographics" || token == "demo") spec.modalities |= static_cast<unsigned>(Modality::Demographics);
    else throw UsageError("unknown modality '" + std::string(token) + "' (cognitive|mri|demographics)");
    rest = plus == std::string_view::npos ? std::string_view{} : rest.substr(plus + 1);
  }
  if (name.empty()) name = spec.predictor == PredictorKind::LOCF && spec.modalities == 0 ? "locf" : std::string(io::trim(text));
  spec.name = name;
  spec.validate();
  return spec;
}

std::string AblationSpec::to_string() const {
  return name + "=" + modality_string(modalities) + ":" + std::string(predictor_name(predictor));
}

std::vector<AblationSpec> default_specs() {
  const auto cog = static_cast<unsigned>(Modality::Cognitive), mri = static_cast<unsigned>(Modality::Mri),
             demo = static_cast<unsigned>(Modality::Demographics);
  return {{"locf", 0, PredictorKind::LOCF},
          {"cognitive", cog, PredictorKind::Recurrent},
          {"mri", mri, PredictorKind::Recurrent},
          {"cognitive+mri", cog | mri, PredictorKind::Recurrent},
          {"full", cog | mri | demo, PredictorKind::Recurrent}};
}

Vector assemble_features(const HistoryVisit& visit, const AblationSpec& spec, bool include_gap) {
  const auto f = spec.features();
  Vector v(static_cast<Eigen::Index>(f.size()) + (include_gap ? 1 : 0));
  for (std::size_t i = 0; i < f.size(); ++i) v(static_cast<Eigen::Index>(i)) = visit.values[f[i]];
  if (include_gap) v(v.size() - 1) = visit.gap_months / 12.0;
  return v;
}

std::vector<Vector> assemble_history(const SequencePair& pair, const AblationSpec& spec, bool include_gap) {
  return assemble(pair.history, spec, include_gap);
}

LocfPrediction locf_predict(const std::vector<HistoryVisit>& history) {
  if (history.empty()) throw DataError("locf_predict: empty history");
  LocfPrediction p;
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    if (!p.adas13 && it->observed[feature::ADAS13]) p.adas13 = it->values[feature::ADAS13];
    if (!p.ventricles && it->observed[feature::Ventricles]) p.ventricles = it->values[feature::Ventricles];
    if (!p.diagnosis && it->diagnosis) p.diagnosis = it->diagnosis;
  }
  return p;
}

double standardized_rmse(const std::vector<double>& predictions, const std::vector<double>& targets) {
  if (predictions.empty()) throw DataError("standardized_rmse: no predictions");
  if (predictions.size() != targets.size()) throw ShapeError("standardized_rmse: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) s += (predictions[i] - targets[i]) * (predictions[i] - targets[i]);
  return std::sqrt(s / double(predictions.size()));
}

std::string_view target_name(TargetKind target) { return target == TargetKind::ADAS13 ? "ADAS13" : "Ventricles"; }

PreparedData prepare(const Cohort& cohort, const AblationConfig& config) {
  PreparedData d;
  for (const auto& t : cohort) d.records += t.visits.size();
  const auto keys = enumerate_pairs(cohort);
  if (keys.empty()) throw DataError("cohort yields no history-target pairs");
  d.split = split_cohort(keys, config.ratios, config.mode, config.seed);
  d.clean = clean_and_standardize(cohort, training_patients(d.split, keys));
  d.pairs = build_sequence_pairs(d.clean);
  if (pair_keys(d.pairs) != keys) throw Error("internal: pair enumeration disagrees with cleaned pairs");
  return d;
}

EvalReport run_ablation(const PreparedData& data, const std::vector<AblationSpec>& specs,
                        const AblationConfig& config) {
  if (specs.empty()) throw UsageError("run_ablation: no specs");
  EvalReport rep;
  rep.seed = config.seed;
  rep.mode = config.mode;
  rep.records = data.records;
  rep.cleaned_visits = data.clean.visit_count();
  rep.eligible_visits = data.clean.eligible_visit_count();
  rep.pairs = data.pairs.size();
  rep.train = fold_counts(data.pairs, data.split.train);
  rep.validation = fold_counts(data.pairs, data.split.validation);
  rep.test = fold_counts(data.pairs, data.split.test);
  for (auto f : data.clean.stats.dropped) rep.dropped_features.emplace_back(feature_name(f));
  rep.warnings = data.clean.warnings;

  rep.results.resize(specs.size());
  std::vector<std::vector<PairPrediction>> preds(specs.size());
  parallel_for(specs.size(), config.threads, [&](std::size_t s) {
    try {
      evaluate_spec(data, specs[s], s, config, rep.results[s], preds[s]);
    } catch (const std::exception& e) {
      rep.results[s].spec = specs[s];
      rep.results[s].failed = true;
      rep.results[s].error = e.what();
      preds[s].clear();
    }
  });
  for (auto& p : preds) rep.predictions.insert(rep.predictions.end(), p.begin(), p.end());
  return rep;
}

EvalReport run_ablation(const Cohort& cohort, const std::vector<AblationSpec>& specs, const AblationConfig& config) {
  return run_ablation(prepare(cohort, config), specs, config);
}

std::string format_table(const EvalReport& r) {
  std::ostringstream o;
  o << "records " << r.records << ", cleaned visits " << r.cleaned_visits << ", target-eligible visits "
    << r.eligible_visits << ", pairs " << r.pairs << "\n";
  o << "split " << split_mode_name(r.mode) << ", seed " << r.seed << ", pairs train/validation/test " << r.train.pairs
    << "/" << r.validation.pairs << "/" << r.test.pairs << "\n\n";
  std::size_t w = 5;
  for (const auto& s : r.results) w = std::max(w, s.spec.name.size());
  o << std::left << std::setw(int(w)) << "Model" << std::right << std::setw(11) << "Predictor" << std::setw(13)
    << "ADAS13 RMSE" << std::setw(17) << "Ventricles RMSE" << std::setw(10) << "Accuracy" << std::setw(8) << "n"
    << "\n";
  for (const auto& s : r.results) {
    o << std::left << std::setw(int(w)) << s.spec.name << std::right << std::setw(11) << predictor_name(s.spec.predictor);
    if (s.failed) {
      o << "  failed: " << s.error << "\n";
      continue;
    }
    o << std::setw(13) << fmt4(s.adas13_rmse) << std::setw(17) << fmt4(s.ventricles_rmse) << std::setw(10)
      << fmt4(s.accuracy) << std::setw(8) << s.n_adas13 << "\n";
  }
  return o.str();
}

io::json report_to_json(const EvalReport& r) {
  io::json results = io::json::array();
  for (const auto& s : r.results) {
    io::json j = {{"name", s.spec.name},
                  {"spec", s.spec.to_string()},
                  {"predictor", predictor_name(s.spec.predictor)},
                  {"width", s.spec.width()},
                  {"failed", s.failed}};
    if (s.failed) {
      j["error"] = s.error;
    } else {
      j["adas13_rmse"] = s.adas13_rmse;
      j["ventricles_rmse"] = s.ventricles_rmse;
      j["accuracy"] = s.accuracy;
      j["adas13_crps"] = s.adas13_crps;
      j["ventricles_crps"] = s.ventricles_crps;
      j["crps_note"] = s.spec.predictor == PredictorKind::SSM ? "gaussian predictive"
                                                              : "point forecast (sd = 0), equals MAE";
      j["n"] = {{"adas13", s.n_adas13}, {"ventricles", s.n_ventricles}, {"diagnosis", s.n_diagnosis}};
      j["excluded"] = {
          {"adas13", s.excluded_adas13}, {"ventricles", s.excluded_ventricles}, {"diagnosis", s.excluded_diagnosis}};
    }
    if (!s.trace.train_loss.empty()) {
      io::json val = io::json::array();
      for (double v : s.trace.validation_loss) val.push_back(std::isfinite(v) ? io::json(v) : io::json(nullptr));
      j["trace"] = {{"train_loss", s.trace.train_loss}, {"validation_loss", val}};
    }
    j["warnings"] = s.warnings;
    results.push_back(std::move(j));
  }
  return {{"format", "trajectwin.report"},
          {"version", 1},
          {"seed", r.seed},
          {"split_mode", split_mode_name(r.mode)},
          {"records", r.records},
          {"cleaned_visits", r.cleaned_visits},
          {"eligible_visits", r.eligible_visits},
          {"pairs", r.pairs},
          {"folds", {{"train", fold_json(r.train)}, {"validation", fold_json(r.validation)}, {"test", fold_json(r.test)}}},
          {"dropped_features", r.dropped_features},
          {"results", results},
          {"warnings", r.warnings}};
}

void write_predictions_csv(std::ostream& out, const EvalReport& r) {
  out << "spec,patient_id,target_visit,target_time,synthetic,adas13_pred,adas13_sd,adas13_target,ventricles_pred,"
         "ventricles_sd,ventricles_target,diagnosis_pred,diagnosis_target\n";
  for (const auto& p : r.predictions) {
    out << io::csv_escape(r.results[p.spec].spec.name) << ',' << io::csv_escape(p.patient_id) << ',' << p.target_visit
        << ',' << io::format_double(p.target_time) << ',' << (p.synthetic ? 1 : 0) << ',' << opt_csv(p.adas13) << ','
        << opt_csv(p.adas13_sd) << ',' << io::format_double(p.target.adas13) << ',' << opt_csv(p.ventricles) << ','
        << opt_csv(p.ventricles_sd) << ',' << io::format_double(p.target.ventricles) << ','
        << (p.diagnosis ? std::string(diagnosis_name(static_cast<Diagnosis>(*p.diagnosis))) : "NA") << ','
        << diagnosis_name(p.target.diagnosis) << '\n';
  }
}

void write_trace_csv(std::ostream& out, const rnn::TrainingTrace& trace) {
  out << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < trace.train_loss.size(); ++e) {
    const double v = e < trace.validation_loss.size() ? trace.validation_loss[e] : std::nan("");
    out << e + 1 << ',' << io::format_double(trace.train_loss[e]) << ',' << io::format_double(v) << '\n';
  }
}

PairPredictor recurrent_predictor(const rnn::RNNParameters& params, const AblationSpec& spec, bool include_gap) {
  return [params, spec, include_gap](const std::vector<HistoryVisit>& history) {
    const auto out = rnn::forward(assemble(history, spec, include_gap), params);
    return std::array<double, 2>{out.adas13, out.ventricles};
  };
}

std::vector<std::size_t> SsmPredictor::observation_features(const AblationSpec& spec,
                                                            const StandardizationStats& stats) {
  auto f = spec.features();
  f.push_back(feature::ADAS13);
  f.push_back(feature::Ventricles);
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  if (stats.is_dropped(feature::ADAS13) || stats.is_dropped(feature::Ventricles))
    throw DataError("ssm predictor: a target feature is constant on the training split");
  std::erase_if(f, [&](std::size_t i) { return stats.is_dropped(i); });
  return f;
}

ssm::ObservedTrajectory observe_clean(const CleanTrajectory& trajectory, const std::vector<std::size_t>& features,
                                      std::size_t visits) {
  ssm::ObservedTrajectory o;
  o.patient_id = trajectory.patient_id;
  const auto m = static_cast<Eigen::Index>(features.size());
  for (std::size_t k = 0; k < std::min(visits, trajectory.visits.size()); ++k) {
    const auto& v = trajectory.visits[k];
    auto obs = ssm::Observation::missing(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      const auto f = features[static_cast<std::size_t>(r)];
      if (v.observed[f]) {
        obs.values(r) = v.values[f];
        obs.present[static_cast<std::size_t>(r)] = true;
      }
    }
    o.times.push_back(v.t);
    o.observations.push_back(std::move(obs));
  }
  return o;
}

ssm::ObservedTrajectory SsmPredictor::observe(const std::vector<HistoryVisit>& visits) const {
  ssm::ObservedTrajectory o;
  const auto m = static_cast<Eigen::Index>(features.size());
  for (const auto& v : visits) {
    auto obs = ssm::Observation::missing(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      const auto f = features[static_cast<std::size_t>(r)];
      if (v.observed[f]) {
        obs.values(r) = v.values[f];
        obs.present[static_cast<std::size_t>(r)] = true;
      }
    }
    o.times.push_back(v.t);
    o.observations.push_back(std::move(obs));
  }
  return o;
}

ssm::ForecastEntry SsmPredictor::predict(const std::vector<HistoryVisit>& history, double target_time) const {
  if (history.empty()) throw DataError("ssm predictor: empty history");
  const auto filtered = ssm::filter_trajectory(observe(history), params);
  const auto& last = filtered.beliefs.back();
  return ssm::forecast(last, params, {target_time - last.time}).entries.front();
}

std::vector<TrendRow> trend_summary(const Cohort& cohort, std::string_view feature, double bin_months) {
  if (!(bin_months > 0.0)) throw UsageError("trend_summary: bin width must be positive");
  const auto f = feature_index(feature);
  if (!f) {
    std::string names;
    for (const auto& n : all_feature_names()) names += (names.empty() ? "" : ", ") + n;
    throw UsageError("unknown feature '" + std::string(feature) + "'; valid names: " + names);
  }
  std::map<std::pair<long, Diagnosis>, std::vector<double>> cells;
  for (const auto& p : cohort) {
    const auto g = p.baseline_diagnosis();
    if (!g) continue;
    for (const auto& v : p.visits)
      if (const auto x = v.feature(*f)) cells[{static_cast<long>(std::floor(v.t / bin_months)), *g}].push_back(*x);
  }
  std::vector<TrendRow> rows;
  for (const auto& [key, xs] : cells) {
    TrendRow r;
    r.bin = key.first;
    r.group = key.second;
    r.n = xs.size();
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / double(r.n);
    if (r.n > 1) {
      double ss = 0.0;
      for (double x : xs) ss += (x - r.mean) * (x - r.mean);
      r.standard_error = std::sqrt(ss / double(r.n - 1)) / std::sqrt(double(r.n));
    }
    rows.push_back(r);
  }
  return rows;
}

void write_trend_csv(std::ostream& out, const std::vector<TrendRow>& rows) {
  out << "bin,group,mean,standard_error,n\n";
  for (const auto& r : rows)
    out << r.bin << ',' << diagnosis_name(r.group) << ',' << io::format_double(r.mean) << ','
        << opt_csv(r.standard_error) << ',' << r.n << '\n';
}

double permutation_importance(const PairPredictor& predictor, const std::vector<SequencePair>& pairs,
                              std::size_t feature, TargetKind target, int repeats, std::uint64_t seed) {
  if (feature >= kFeatureCount) throw UsageError("permutation_importance: feature index out of range");
  if (repeats < 1) throw UsageError("permutation_importance: repeats must be >= 1");
  if (pairs.empty()) throw DataError("permutation_importance: no pairs");
  const auto idx = target == TargetKind::ADAS13 ? 0 : 1;
  std::vector<double> truth;
  for (const auto& p : pairs) truth.push_back(idx == 0 ? p.target.adas13 : p.target.ventricles);
  auto score = [&](const std::vector<std::vector<HistoryVisit>>& histories) {
    std::vector<double> pred;
    pred.reserve(histories.size());
    for (const auto& h : histories) pred.push_back(predictor(h)[static_cast<std::size_t>(idx)]);
    return standardized_rmse(pred, truth);
  };
  std::vector<std::vector<HistoryVisit>> histories;
  std::vector<std::pair<double, bool>> pool;
  for (const auto& p : pairs) {
    histories.push_back(p.history);
    for (const auto& h : p.history) pool.emplace_back(h.values[feature], h.observed[feature]);
  }
  const double base = score(histories);
  Rng rng(derive_seed(seed, "permutation"));
  double total = 0.0;
  for (int r = 0; r < repeats; ++r) {
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t k = 0;
    for (auto& h : histories)
      for (auto& v : h) {
        v.values[feature] = pool[k].first;
        v.observed[feature] = pool[k].second;
        ++k;
      }
    total += score(histories) - base;
  }
  return total / double(repeats);
}

}  // namespace trajectwin::ablation
