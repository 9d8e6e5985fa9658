#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "support.hpp"
#include "trajectwin/ablation.hpp"
#include "trajectwin/synth.hpp"

using namespace trajectwin;
using namespace trajectwin::ablation;
using testing::visit;

namespace {

HistoryVisit history_visit(double adas13, bool adas_seen, double ventricles, bool vent_seen) {
  HistoryVisit h;
  h.values[feature::ADAS13] = adas13;
  h.observed[feature::ADAS13] = adas_seen;
  h.values[feature::Ventricles] = ventricles;
  h.observed[feature::Ventricles] = vent_seen;
  h.diagnosis = Diagnosis::MCI;
  return h;
}

AblationConfig quick_config(std::uint64_t seed = 42) {
  AblationConfig cfg;
  cfg.seed = seed;
  cfg.rnn.epochs = 2;
  cfg.rnn.hidden_size = 6;
  cfg.rnn.layers = 1;
  cfg.ssm_latent_dim = 2;
  cfg.ssm_max_iters = 5;
  return cfg;
}

const Cohort& small_cohort() {
  static const Cohort c = synth::simulate_cohort(synth::fixture_spec(), 80, 7).cohort;
  return c;
}

}  // namespace

TEST_CASE("panel widths and names") {
  const auto specs = default_specs();
  REQUIRE(specs.size() == 5);
  CHECK(specs[0].predictor == PredictorKind::LOCF);
  std::map<std::string, int> widths;
  for (const auto& s : specs)
    if (s.predictor == PredictorKind::Recurrent) widths[s.name] = s.width();
  CHECK(widths["cognitive"] == 7);
  CHECK(widths["mri"] == 7);
  CHECK(widths["cognitive+mri"] == 14);
  CHECK(widths["full"] == 18);
  const auto full = AblationSpec::parse("full");
  const auto f = full.features();
  CHECK(std::is_sorted(f.begin(), f.end()));
  CHECK(f.front() == feature::CDRSB);
  CHECK(f.back() == feature::APOE4);
}

TEST_CASE("spec parsing") {
  const auto s = AblationSpec::parse("fused=mri+cognitive:ssm");
  CHECK(s.name == "fused");
  CHECK(s.predictor == PredictorKind::SSM);
  CHECK(s.has(Modality::Cognitive));
  CHECK(s.has(Modality::Mri));
  CHECK_FALSE(s.has(Modality::Demographics));
  CHECK(AblationSpec::parse(s.to_string()).modalities == s.modalities);
  CHECK(AblationSpec::parse("cognitive").predictor == PredictorKind::Recurrent);
  CHECK(AblationSpec::parse("cognitive").name == "cognitive");
  CHECK(AblationSpec::parse("locf").predictor == PredictorKind::LOCF);
  CHECK_THROWS_AS(AblationSpec::parse("x=none"), UsageError);
  CHECK_THROWS_AS(AblationSpec::parse("x=genetics"), UsageError);
  CHECK_THROWS_AS(AblationSpec::parse("x=mri:boosting"), UsageError);
  CHECK_NOTHROW(AblationSpec::parse("targets=none:ssm").validate());
}

TEST_CASE("feature assembly order and gap input") {
  HistoryVisit h;
  for (std::size_t f = 0; f < kFeatureCount; ++f) h.values[f] = double(f);
  h.gap_months = 18.0;
  const auto spec = AblationSpec::parse("cognitive+mri");
  const auto x = assemble_features(h, spec);
  REQUIRE(x.size() == 14);
  for (Eigen::Index i = 0; i < 14; ++i) CHECK(x(i) == double(i));
  const auto g = assemble_features(h, AblationSpec::parse("mri"), true);
  REQUIRE(g.size() == 8);
  CHECK(g(0) == double(feature::Ventricles));
  CHECK(g(7) == doctest::Approx(1.5));
}

TEST_CASE("LOCF baseline") {
  SUBCASE("last value") {
    const auto p = locf_predict({history_visit(0.2, true, 0.0, true), history_visit(0.5, true, 0.0, true)});
    CHECK(p.adas13 == 0.5);
    CHECK(p.diagnosis == Diagnosis::MCI);
  }
  SUBCASE("carry back past a missing value") {
    const auto p = locf_predict({history_visit(0.0, true, -0.1, true), history_visit(0.3, true, 9.0, false)});
    CHECK(p.ventricles == -0.1);
  }
  SUBCASE("never observed") {
    const auto p = locf_predict({history_visit(0.0, false, 0.0, false)});
    CHECK_FALSE(p.adas13.has_value());
    CHECK_FALSE(p.ventricles.has_value());
  }
  SUBCASE("constant histories have zero error") {
    std::vector<double> pred, truth;
    for (double c : {-1.0, 0.0, 0.7, 2.5}) {
      const auto p = locf_predict({history_visit(c, true, c, true), history_visit(c, true, c, true)});
      pred.push_back(*p.adas13);
      truth.push_back(c);
    }
    CHECK(standardized_rmse(pred, truth) == 0.0);
  }
}

TEST_CASE("standardized RMSE") {
  CHECK(standardized_rmse({1.0, 2.0}, {1.0, 2.0}) == 0.0);
  CHECK(standardized_rmse({0.0, 0.0}, {1.0, 1.0}) == 1.0);
  CHECK(standardized_rmse({0.0, 2.0}, {1.0, 1.0}) == 1.0);
  CHECK_THROWS_AS(standardized_rmse({}, {}), DataError);
  CHECK_THROWS_AS(standardized_rmse({1.0}, {1.0, 2.0}), ShapeError);

  Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> p(101), t(101);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = n(rng);
    t[i] = n(rng);
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) ss += (p[i] - t[i]) * (p[i] - t[i]);
  const double brute = std::sqrt(ss / double(p.size()));
  CHECK(standardized_rmse(p, t) == brute);
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> p2, t2;
  for (auto i : order) {
    p2.push_back(p[i]);
    t2.push_back(t[i]);
  }
  CHECK(standardized_rmse(p2, t2) == doctest::Approx(brute).epsilon(1e-15));
}

TEST_CASE("trend summary") {
  SUBCASE("degenerate bins") {
    Cohort c{{"a", {visit("a", 0, 5.0), visit("a", 14, 7.0)}}, {"b", {visit("b", 2, 5.0)}}};
    const auto rows = trend_summary(c, "ADAS13", 12.0);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].bin == 0);
    CHECK(rows[0].n == 2);
    REQUIRE(rows[0].standard_error.has_value());
    CHECK(*rows[0].standard_error == 0.0);
    CHECK(rows[1].n == 1);
    CHECK_FALSE(rows[1].standard_error.has_value());
    std::ostringstream out;
    write_trend_csv(out, rows);
    CHECK(out.str() == "bin,group,mean,standard_error,n\n0,CN,5,0,2\n1,CN,7,NA,1\n");
  }
  SUBCASE("AD rises above CN") {
    auto spec = synth::fixture_spec();
    for (auto& g : spec.groups) {
      g.transition_hazard = 0.0;
      if (g.group == Diagnosis::CN) g.slope_mean[feature::ADAS13] = g.slope_sd[feature::ADAS13] = 0.0;
    }
    spec.diagnosis_missing = 0.0;
    const auto sim = synth::simulate_cohort(spec, 300, 5);
    const auto rows = trend_summary(sim.cohort, "ADAS13", 12.0);
    std::optional<double> cn, ad;
    for (const auto& r : rows)
      if (r.bin == 4) (r.group == Diagnosis::CN ? cn : ad) = r.mean;
    REQUIRE(cn.has_value());
    REQUIRE(ad.has_value());
    CHECK(*ad > *cn);
  }
  SUBCASE("means match a brute-force grouping") {
    const auto& c = small_cohort();
    for (const auto& r : trend_summary(c, "Hippocampus", 6.0)) {
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& p : c) {
        if (p.baseline_diagnosis() != r.group) continue;
        for (const auto& v : p.visits)
          if (v.feature(feature::Hippocampus) && long(std::floor(v.t / 6.0)) == r.bin) {
            s += *v.feature(feature::Hippocampus);
            ++n;
          }
      }
      CHECK(n == r.n);
      CHECK(std::abs(s / double(n) - r.mean) <= 1e-12 * std::abs(r.mean));
    }
  }
  CHECK_THROWS_AS(trend_summary(small_cohort(), "NotAFeature", 12.0), UsageError);
  CHECK_THROWS_AS(trend_summary(small_cohort(), "ADAS13", 0.0), UsageError);
}

TEST_CASE("prepare keeps counts consistent") {
  const auto cfg = quick_config();
  const auto data = prepare(small_cohort(), cfg);
  std::size_t visits = 0;
  for (const auto& p : small_cohort()) visits += p.visits.size();
  CHECK(data.records == visits);
  CHECK(data.clean.visit_count() == visits);
  CHECK(data.pairs.size() == enumerate_pairs(small_cohort()).size());
  CHECK(data.split.train.size() + data.split.validation.size() + data.split.test.size() == data.pairs.size());
}

TEST_CASE("ablation report structure and determinism") {
  const auto cfg = quick_config();
  const std::vector<AblationSpec> specs{AblationSpec::parse("locf"), AblationSpec::parse("cognitive"),
                                        AblationSpec::parse("again=locf:locf"), AblationSpec::parse("s=mri:ssm")};
  const auto rep = run_ablation(small_cohort(), specs, cfg);
  REQUIRE(rep.results.size() == specs.size());
  CHECK(rep.pairs == rep.train.pairs + rep.validation.pairs + rep.test.pairs);
  CHECK(rep.predictions.size() == specs.size() * rep.test.pairs);
  for (std::size_t k = 1; k < rep.predictions.size(); ++k) CHECK(rep.predictions[k - 1].spec <= rep.predictions[k].spec);
  for (const auto& r : rep.results) {
    CHECK_FALSE(r.failed);
    CHECK(r.adas13_rmse >= 0.0);
    CHECK(r.ventricles_rmse >= 0.0);
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
    CHECK(r.n_adas13 + r.excluded_adas13 == rep.test.pairs);
    CHECK(r.n_ventricles + r.excluded_ventricles == rep.test.pairs);
  }
  // LOCF twice in one report.
  CHECK(rep.results[0].adas13_rmse == rep.results[2].adas13_rmse);
  CHECK(rep.results[0].ventricles_rmse == rep.results[2].ventricles_rmse);
  // Point predictors score CRPS as the mean absolute error.
  double mae = 0.0;
  std::size_t n = 0;
  for (const auto& p : rep.predictions)
    if (p.spec == 0 && p.adas13) {
      mae += std::abs(*p.adas13 - p.target.adas13);
      ++n;
    }
  CHECK(rep.results[0].adas13_crps == doctest::Approx(mae / double(n)).epsilon(1e-12));
  CHECK(rep.results[1].trace.train_loss.size() == std::size_t(cfg.rnn.epochs));
  for (const auto& p : rep.predictions)
    if (p.spec == 3) CHECK(p.adas13_sd.has_value());

  const auto again = run_ablation(small_cohort(), specs, cfg);
  CHECK(report_to_json(again).dump() == report_to_json(rep).dump());
  auto threaded = cfg;
  threaded.threads = 3;
  CHECK(report_to_json(run_ablation(small_cohort(), specs, threaded)).dump() == report_to_json(rep).dump());

  const auto table = format_table(rep);
  CHECK(table.find("ADAS13 RMSE") != std::string::npos);
  CHECK(table.find("Ventricles RMSE") != std::string::npos);
  CHECK(table.find("cognitive") != std::string::npos);
  const auto j = report_to_json(rep);
  CHECK(j.at("format") == "trajectwin.report");
  std::ostringstream pc, tc;
  write_predictions_csv(pc, rep);
  write_trace_csv(tc, rep.results[1].trace);
  const std::string predictions = pc.str(), trace = tc.str();
  CHECK(std::count(predictions.begin(), predictions.end(), '\n') == long(rep.predictions.size()) + 1);
  CHECK(std::count(trace.begin(), trace.end(), '\n') == cfg.rnn.epochs + 1);
}

TEST_CASE("the SSM predictor observes its panels plus both targets") {
  const auto cfg = quick_config();
  const auto data = prepare(small_cohort(), cfg);
  const auto feats = SsmPredictor::observation_features(AblationSpec::parse("t=none:ssm"), data.clean.stats);
  CHECK(feats == std::vector<std::size_t>{feature::ADAS13, feature::Ventricles});
  const auto mri = SsmPredictor::observation_features(AblationSpec::parse("m=mri:ssm"), data.clean.stats);
  CHECK(mri.size() == 8);
  CHECK(std::count(mri.begin(), mri.end(), std::size_t(feature::ADAS13)) == 1);
  Warnings w;
  const auto pred = fit_ssm_predictor(data, AblationSpec::parse("t=none:ssm"), cfg, w);
  CHECK(pred.params.feature_names == std::vector<std::string>{"ADAS13", "Ventricles"});
  const auto& pair = data.pairs[data.split.test.front()];
  const auto fc = pred.predict(pair.history, pair.target_time);
  CHECK(fc.mean.size() == 2);
  CHECK(fc.cov(0, 0) > 0.0);
  CHECK(fc.time == pair.target_time);
}

TEST_CASE("augmented cohorts report synthetic counts per fold") {
  const auto& real = small_cohort();
  const auto aug = synth::augment(real, synth::fixture_spec(), {{Diagnosis::AD, 0.5}, {Diagnosis::MCI, 0.25}}, 9);
  std::size_t synthetic_visits = 0;
  for (const auto& p : aug.cohort)
    if (p.synthetic()) synthetic_visits += p.visits.size();
  const auto cfg = quick_config();
  const auto data = prepare(aug.cohort, cfg);
  std::size_t clean_synthetic = 0;
  for (const auto& t : data.clean.trajectories)
    if (t.synthetic) clean_synthetic += t.visits.size();
  CHECK(clean_synthetic == synthetic_visits);

  const auto rep = run_ablation(data, {AblationSpec::parse("locf")}, cfg);
  std::size_t synthetic_pairs = 0;
  for (const auto& k : enumerate_pairs(aug.cohort)) synthetic_pairs += k.synthetic;
  CHECK(synthetic_pairs > 0);
  CHECK(rep.train.synthetic_pairs + rep.validation.synthetic_pairs + rep.test.synthetic_pairs == synthetic_pairs);
  std::size_t synthetic_patients = 0;
  for (const auto& [g, n] : aug.synthetic_patients) synthetic_patients += n;
  CHECK(rep.train.synthetic_patients + rep.validation.synthetic_patients + rep.test.synthetic_patients <=
        synthetic_patients);
  const auto j = report_to_json(rep);
  CHECK(j.dump().find("synthetic_pairs") != std::string::npos);
}

TEST_CASE("permutation importance") {
  const auto cfg = quick_config();
  const auto data = prepare(small_cohort(), cfg);
  const auto spec = AblationSpec::parse("full");

  // Predicts the last observed ventricle value and nothing else.
  const PairPredictor ventricle_only = [](const std::vector<HistoryVisit>& h) {
    const auto l = locf_predict(h);
    return std::array<double, 2>{0.0, l.ventricles.value_or(0.0)};
  };
  std::vector<SequencePair> pairs;
  for (auto i : data.split.train) pairs.push_back(data.pairs[i]);
  SUBCASE("ignored features score zero") {
    CHECK(permutation_importance(ventricle_only, pairs, feature::Hippocampus, TargetKind::Ventricles, 3, 1) == 0.0);
  }
  SUBCASE("constant features score zero") {
    auto flat = pairs;
    for (auto& p : flat)
      for (auto& h : p.history) {
        h.values[feature::Ventricles] = 0.25;
        h.observed[feature::Ventricles] = true;
      }
    CHECK(permutation_importance(ventricle_only, flat, feature::Ventricles, TargetKind::Ventricles, 3, 1) == 0.0);
  }
  SUBCASE("a target driven by one feature ranks it first") {
    // Rebind each ventricle target to the last history value so that a fitted
    // recurrent model has only that feature to learn from.
    auto driven = data.pairs;
    for (auto& p : driven) p.target.ventricles = p.history.back().values[feature::Ventricles];
    std::vector<rnn::Example> train;
    for (auto i : data.split.train) {
      const auto& p = driven[i];
      train.push_back({assemble_history(p, spec), {p.target.adas13, p.target.ventricles, int(p.target.diagnosis)}});
    }
    rnn::RNNConfig rc;
    rc.input_dimension = spec.width();
    rc.hidden_size = 16;
    rc.layers = 1;
    rc.epochs = 30;
    rc.learning_rate = 5e-3;
    rc.dropout_rate = 0.0;
    rc.loss_weights = {0.0, 1.0, 0.0};
    rc.seed = 4;
    const auto fit = rnn::train(train, {}, rc);
    const auto predictor = recurrent_predictor(fit.params, spec, false);
    std::vector<SequencePair> eval;
    for (auto i : data.split.train) eval.push_back(driven[i]);
    double best = -1e300;
    std::size_t best_feature = kFeatureCount;
    for (auto f : spec.features()) {
      const double s = permutation_importance(predictor, eval, f, TargetKind::Ventricles, 2, 11);
      if (s > best) {
        best = s;
        best_feature = f;
      }
    }
    CHECK(best_feature == feature::Ventricles);
  }
  CHECK_THROWS_AS(permutation_importance(ventricle_only, pairs, kFeatureCount, TargetKind::ADAS13, 1, 1), UsageError);
  CHECK_THROWS_AS(permutation_importance(ventricle_only, {}, 0, TargetKind::ADAS13, 1, 1), DataError);
}
