#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "trajectwin/synth.hpp"

using namespace trajectwin;
using namespace trajectwin::synth;

namespace {

std::string cohort_text(const Cohort& c) {
  std::ostringstream out;
  write_cohort_csv(out, c);
  return out.str();
}

SimSpec noiseless_spec() {
  SimSpec s = fixture_spec();
  for (auto& g : s.groups) {
    g.noise_sd.fill(0.0);
    g.transition_hazard = 0.0;
  }
  s.jitter_sd = 0.0;
  s.dropout_probability = 0.0;
  s.cognitive_missing = s.mri_missing = s.demographics_missing = s.diagnosis_missing = 0.0;
  return s;
}

struct Moments {
  double mean = 0.0, sd = 0.0;
  std::size_t n = 0;
};

template <class F>
Moments moments(const SimulationResult& r, F value) {
  Moments m;
  double sum = 0.0, sq = 0.0;
  for (const auto& t : r.truth) {
    const double v = value(t);
    sum += v;
    sq += v * v;
    ++m.n;
  }
  m.mean = sum / double(m.n);
  m.sd = std::sqrt((sq - double(m.n) * m.mean * m.mean) / double(m.n - 1));
  return m;
}

}  // namespace

TEST_CASE("simulation is seed-deterministic and thread-invariant") {
  const auto spec = fixture_spec();
  const auto a = simulate_cohort(spec, 40, 5);
  const auto b = simulate_cohort(spec, 40, 5);
  const auto c = simulate_cohort(spec, 40, 5, 3);
  CHECK(cohort_text(a.cohort) == cohort_text(b.cohort));
  CHECK(cohort_text(a.cohort) == cohort_text(c.cohort));
  CHECK(cohort_text(a.cohort) != cohort_text(simulate_cohort(spec, 40, 6).cohort));
  for (const auto& p : a.cohort) CHECK_NOTHROW(validate(p));
}

TEST_CASE("noise-free trajectories are exactly linear on the visit grid") {
  const auto r = simulate_cohort(noiseless_spec(), 20, 3);
  REQUIRE(r.cohort.size() == 20);
  for (std::size_t i = 0; i < r.cohort.size(); ++i) {
    const auto& p = r.cohort[i];
    const auto& truth = r.truth[i];
    CHECK(p.visits.size() == 11);
    for (std::size_t j = 0; j < p.visits.size(); ++j) {
      const auto& v = p.visits[j];
      CHECK(v.t == 6.0 * double(j));
      CHECK(v.diagnosis == truth.group);
      for (std::size_t f = 0; f < kClinicalFeatures; ++f) {
        if (f == feature::ICV) continue;  // clamped at 1
        REQUIRE(v.feature(f).has_value());
        CHECK(*v.feature(f) == truth.baseline[f] + truth.slope[f] * v.t);
      }
    }
  }
}

TEST_CASE("panel missingness") {
  auto spec = noiseless_spec();
  spec.mri_missing = 1.0;
  const auto r = simulate_cohort(spec, 10, 1);
  for (const auto& p : r.cohort)
    for (const auto& v : p.visits) {
      for (std::size_t f = kCognitiveFeatures; f < kClinicalFeatures; ++f) CHECK_FALSE(v.feature(f).has_value());
      for (std::size_t f = 0; f < kCognitiveFeatures; ++f) CHECK(v.feature(f).has_value());
    }
}

TEST_CASE("conditioning") {
  const auto spec = fixture_spec();

  SUBCASE("diagnostic group") {
    const auto ad = condition(spec, Constraints{Diagnosis::AD, std::nullopt, std::nullopt});
    for (const auto& g : ad.groups) CHECK(g.prevalence == (g.group == Diagnosis::AD ? 1.0 : 0.0));
    for (const auto& t : simulate_cohort(ad, 50, 2).truth) CHECK(t.group == Diagnosis::AD);
    CHECK_THROWS_AS(condition(ad, Constraints{Diagnosis::CN, std::nullopt, std::nullopt}), UsageError);
  }
  SUBCASE("APOE4 count") {
    const auto c = condition(spec, Constraints{std::nullopt, 2, std::nullopt});
    for (const auto& p : simulate_cohort(c, 50, 2).cohort)
      for (const auto& v : p.visits)
        if (v.demographics.apoe4_count) CHECK(*v.demographics.apoe4_count == 2);
    CHECK_THROWS_AS(condition(spec, Constraints{std::nullopt, 3, std::nullopt}), UsageError);
  }
  SUBCASE("age range leaves the clinical marginals unchanged") {
    const auto c = condition(spec, Constraints{std::nullopt, std::nullopt, std::make_pair(70.0, 75.0)});
    const auto conditioned = simulate_cohort(c, 1000, 17);
    const auto plain = simulate_cohort(spec, 1000, 18);
    for (const auto& t : conditioned.truth) {
      CHECK(t.baseline_age >= 70.0);
      CHECK(t.baseline_age <= 75.0);
    }
    for (std::size_t f : {feature::ADAS13, feature::MMSE, feature::Ventricles, feature::Hippocampus}) {
      const auto a = moments(conditioned, [f](const PatientTruth& t) { return t.baseline[f]; });
      const auto b = moments(plain, [f](const PatientTruth& t) { return t.baseline[f]; });
      const double se = std::sqrt(a.sd * a.sd / double(a.n) + b.sd * b.sd / double(b.n));
      CHECK(std::abs(a.mean - b.mean) < 4.0 * se);
    }
    CHECK_THROWS_AS(condition(spec, Constraints{std::nullopt, std::nullopt, std::make_pair(80.0, 70.0)}), UsageError);
  }
}

TEST_CASE("augmentation") {
  const auto spec = fixture_spec();
  const auto real = simulate_cohort(condition(spec, Constraints{Diagnosis::AD, std::nullopt, std::nullopt}), 10, 4).cohort;

  const auto same = augment(real, spec, {{Diagnosis::AD, 0.0}}, 1);
  CHECK(cohort_text(same.cohort) == cohort_text(real));
  CHECK(same.synthetic_patients.empty());

  const auto more = augment(real, spec, {{Diagnosis::AD, 0.5}, {Diagnosis::CN, 1.0}}, 1);
  REQUIRE(more.cohort.size() == 15);
  CHECK(more.synthetic_patients.at(Diagnosis::AD) == 5);
  CHECK_FALSE(more.synthetic_patients.contains(Diagnosis::CN));
  for (std::size_t i = 0; i < more.cohort.size(); ++i) {
    CHECK(more.cohort[i].synthetic() == (i >= 10));
    if (i >= 10) {
      CHECK(more.cohort[i].patient_id.rfind("SYN-AD-", 0) == 0);
      CHECK(more.cohort[i].baseline_diagnosis() == Diagnosis::AD);
    }
  }
  CHECK(cohort_text(augment(real, spec, {{Diagnosis::AD, 0.5}}, 1).cohort) == cohort_text(more.cohort));
  CHECK_THROWS_AS(augment(real, spec, {{Diagnosis::AD, -0.1}}, 1), UsageError);
}

TEST_CASE("random-effect marginals match the simulation settings within three standard errors") {
  const auto spec = condition(fixture_spec(), Constraints{Diagnosis::MCI, std::nullopt, std::nullopt});
  const GroupDynamics* g = nullptr;
  for (const auto& grp : spec.groups)
    if (grp.group == Diagnosis::MCI) g = &grp;
  REQUIRE(g != nullptr);
  const auto r = simulate_cohort(spec, 10000, 23);
  for (std::size_t f = 0; f < kClinicalFeatures; ++f) {
    const auto base = moments(r, [f](const PatientTruth& t) { return t.baseline[f]; });
    const auto slope = moments(r, [f](const PatientTruth& t) { return t.slope[f]; });
    CAPTURE(f);
    CHECK(std::abs(base.mean - g->baseline_mean[f]) < 3.0 * g->baseline_sd[f] / std::sqrt(double(base.n)) + 1e-12);
    CHECK(std::abs(slope.mean - g->slope_mean[f]) < 3.0 * g->slope_sd[f] / std::sqrt(double(slope.n)) + 1e-12);
    if (g->baseline_sd[f] > 0.0) CHECK(base.sd == doctest::Approx(g->baseline_sd[f]).epsilon(0.05));
  }
}

TEST_CASE("checked-in fixture document matches the built-in fixture") {
  std::ifstream in(TRAJECTWIN_FIXTURE_JSON);
  REQUIRE(in.good());
  const auto doc = io::json::parse(in);
  CHECK(doc == fixture_spec().to_json());
  CHECK(SimSpec::from_json(doc).to_json() == doc);
}

TEST_CASE("simulation settings validation") {
  CHECK_NOTHROW(fixture_spec().validate());
  auto s = fixture_spec();
  s.groups[0].prevalence += 0.1;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = fixture_spec();
  s.groups[1].transition_hazard = 1.5;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = fixture_spec();
  s.groups[2].noise_sd[0] = -1.0;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = fixture_spec();
  s.horizon = 0.0;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = fixture_spec();
  s.panel_coupling = 1.2;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s.groups.clear();
  CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("state-space trajectories") {
  const auto params = scalar_reference_params();
  const auto r = simulate_state_space(params, {feature::ADAS13}, 30, 8, 9);
  REQUIRE(r.cohort.size() == 30);
  for (const auto& p : r.cohort) {
    REQUIRE(p.visits.size() == 8);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(p.visits[j].t == params.delta * double(j));
      CHECK(p.visits[j].feature(feature::ADAS13).has_value());
    }
  }
  CHECK(cohort_text(r.cohort) == cohort_text(simulate_state_space(params, {feature::ADAS13}, 30, 8, 9).cohort));
}
