#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>

#include "support.hpp"
#include "trajectwin/synth.hpp"
#include "trajectwin/vvuq.hpp"

using namespace trajectwin;
using namespace trajectwin::vvuq;

namespace {

double crps_oracle(double mu, double sd, double y) {
  const double z = (y - mu) / sd;
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(M_PI));
}

// Draws from the scalar reference model on the base grid.
std::vector<ssm::ObservedTrajectory> reference_cohort(std::size_t patients, std::size_t visits, std::uint64_t seed) {
  const auto p = synth::scalar_reference_params();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<ssm::ObservedTrajectory> out(patients);
  for (std::size_t i = 0; i < patients; ++i) {
    out[i].patient_id = "R" + std::to_string(i);
    double z = p.m0(0) + std::sqrt(p.P0(0, 0)) * n(rng);
    for (std::size_t j = 0; j < visits; ++j) {
      if (j > 0) z = p.A(0, 0) * z + std::sqrt(p.Q(0, 0)) * n(rng);
      out[i].times.push_back(p.delta * double(j));
      out[i].observations.push_back(ssm::Observation::full(Vector::Constant(1, p.H(0, 0) * z + std::sqrt(p.r_obs(0)) * n(rng))));
    }
  }
  return out;
}

std::size_t flagged_visits(const std::vector<ssm::ObservedTrajectory>& cohort, double level) {
  const auto p = synth::scalar_reference_params();
  std::size_t total = 0;
  for (const auto& t : cohort) total += detect_anomalies(t, p, level).size();
  return total;
}

}  // namespace

TEST_CASE("central Gaussian intervals") {
  const auto iv = gaussian_interval(1.0, 2.0, 0.95, "ADAS13", 6.0);
  CHECK(iv.lower == doctest::Approx(1.0 - 1.959963985 * 2.0).epsilon(1e-9));
  CHECK(iv.upper == doctest::Approx(1.0 + 1.959963985 * 2.0).epsilon(1e-9));
  CHECK(iv.feature == "ADAS13");
  const auto wide = gaussian_interval(0.0, 1.0, 0.99);
  CHECK(wide.upper > gaussian_interval(0.0, 1.0, 0.8).upper);
}

TEST_CASE("interval coverage fraction") {
  const std::vector<IntervalForecast> ivs(4, gaussian_interval(0.0, 1.0, 0.95));
  CHECK(picp(ivs, {0.0, 0.1, -0.2, 1.0}) == 1.0);
  CHECK(picp(ivs, {5.0, -5.0, 3.0, 10.0}) == 0.0);
  CHECK(picp(ivs, {ivs[0].upper, ivs[0].lower, 5.0, 0.0}) == 0.75);  // boundaries count as inside

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<IntervalForecast> many;
  std::vector<double> targets;
  std::size_t inside = 0;
  for (int k = 0; k < 300; ++k) {
    const double mu = n(rng), sd = 0.1 + std::abs(n(rng));
    many.push_back(gaussian_interval(mu, sd, 0.8));
    targets.push_back(n(rng));
    if (targets.back() >= many.back().lower && targets.back() <= many.back().upper) ++inside;
  }
  CHECK(picp(many, targets) == double(inside) / 300.0);
  CHECK_THROWS(picp(ivs, {0.0}));
}

TEST_CASE("well-specified intervals reach nominal coverage") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<IntervalForecast> ivs;
  std::vector<double> y;
  for (int k = 0; k < 4000; ++k) {
    const double mu = 3.0 * n(rng), sd = 0.5 + std::abs(n(rng));
    ivs.push_back(gaussian_interval(mu, sd, 0.95));
    y.push_back(mu + sd * n(rng));
  }
  const double cover = picp(ivs, y);
  CHECK(cover >= 0.93);
  CHECK(cover <= 0.97);
}

TEST_CASE("Gaussian CRPS") {
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == doctest::Approx(0.23370).epsilon(1e-4));
  CHECK(crps_gaussian(0.0, 0.0, 2.0) == 2.0);
  CHECK(crps_gaussian(1.0, 0.0, -0.5) == 1.5);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const double mu = n(rng), sd = 0.05 + std::abs(n(rng)), y = 2.0 * n(rng), c = 0.1 + std::abs(n(rng));
    CHECK(crps_gaussian(mu, sd, y) == doctest::Approx(crps_oracle(mu, sd, y)).epsilon(1e-10));
    CHECK(crps_gaussian(c * mu, c * sd, c * y) == doctest::Approx(c * crps_gaussian(mu, sd, y)).epsilon(1e-10));
    CHECK(crps_gaussian(mu, sd, y) >= 0.0);
  }
  CHECK(crps_gaussian(0.0, 1e-9, 2.0) == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("anomaly false-positive rate follows the chi-square tail") {
  const auto cohort = reference_cohort(500, 40, 77);
  const double visits = 500.0 * 40.0;
  const double level = 0.99;
  const double expected = (1.0 - level) * visits;
  const double se = std::sqrt(visits * level * (1.0 - level));
  const double flagged = double(flagged_visits(cohort, level));
  CHECK(std::abs(flagged - expected) < 3.0 * se);
  CHECK(double(flagged_visits(cohort, 0.999)) / visits <= 0.003);
}

TEST_CASE("an injected spike is flagged at its visit") {
  const auto p = synth::scalar_reference_params();
  auto traj = reference_cohort(1, 12, 5).front();
  const auto clean = detect_anomalies(traj, p, 0.999);
  CHECK(clean.empty());

  // Marginal sd of an observation under the stationary model.
  const double sd = std::sqrt(p.P0(0, 0) + p.r_obs(0));
  traj.observations[6].values(0) += 10.0 * sd;
  const auto flags = detect_anomalies(traj, p, 0.999);
  REQUIRE(flags.size() == 1);
  CHECK(flags[0].time == traj.times[6]);
  CHECK(flags[0].patient_id == traj.patient_id);
  CHECK(flags[0].features.size() == 1);
  CHECK(flags[0].magnitude > flags[0].threshold);
  CHECK(flags[0].threshold ==
        doctest::Approx(boost::math::quantile(boost::math::chi_squared_distribution<double>(1.0), 0.999)).epsilon(1e-10));
  CHECK(flags[0].level == 0.999);

  traj.observations[8] = ssm::Observation::missing(1);
  for (const auto& f : detect_anomalies(traj, p, 0.999)) CHECK(f.time != traj.times[8]);
  CHECK_THROWS_AS(detect_anomalies(traj, p, 1.0), UsageError);
}

TEST_CASE("calibration report") {
  const auto p = synth::scalar_reference_params();
  const auto cohort = reference_cohort(300, 8, 13);
  const auto rep = calibrate(cohort, p, 0.9);
  REQUIRE(rep.rows.size() == 2);
  CHECK(rep.rows.back().feature == "all");
  CHECK(rep.rows.back().n == 300 * 7);
  CHECK(rep.rows.front().n == rep.rows.back().n);
  CHECK(rep.rows.back().picp == doctest::Approx(0.9).epsilon(0.03));
  CHECK(rep.rows.back().mean_crps > 0.0);
  std::ostringstream out;
  write_calibration_csv(out, rep);
  CHECK(out.str().find("all") != std::string::npos);

  std::vector<ssm::ObservedTrajectory> single(1);
  single[0].times = {0.0};
  single[0].observations = {ssm::Observation::full(Vector::Zero(1))};
  CHECK_THROWS_AS(calibrate(single, p, 0.9), DataError);
}

namespace {

ablation::PairPrediction prediction(const std::string& id, double err_a, double err_v, int dx_pred) {
  ablation::PairPrediction pr;
  pr.patient_id = id;
  pr.target = {1.0, 2.0, Diagnosis::MCI};
  pr.adas13 = 1.0 + err_a;
  pr.ventricles = 2.0 + err_v;
  pr.diagnosis = dx_pred;
  return pr;
}

Cohort demographic_cohort(std::size_t n) {
  Cohort c;
  for (std::size_t i = 0; i < n; ++i) {
    PatientTrajectory p;
    p.patient_id = "S" + std::to_string(i);
    auto v = testing::visit(p.patient_id, 0.0);
    v.demographics.sex = i % 2 ? Sex::Female : Sex::Male;
    v.demographics.age = 60.0 + double(i % 30);
    v.demographics.apoe4_count = int(i % 3);
    p.visits.push_back(v);
    c.push_back(p);
  }
  return c;
}

}  // namespace

TEST_CASE("subgroup disaggregation") {
  const auto cohort = demographic_cohort(60);
  ablation::EvalReport rep;
  rep.results.resize(1);
  rep.results[0].spec.name = "full";
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  double sse_a = 0.0, sse_v = 0.0;
  for (std::size_t i = 0; i < 60; ++i) {
    rep.predictions.push_back(prediction("S" + std::to_string(i), n(rng), n(rng), int(i % 3)));
    sse_a += std::pow(*rep.predictions.back().adas13 - 1.0, 2);
    sse_v += std::pow(*rep.predictions.back().ventricles - 2.0, 2);
  }

  SUBCASE("groups pool back to the totals") {
    for (auto key : {GroupKey::Sex, GroupKey::APOE4, GroupKey::AgeBand}) {
      const auto rows = subgroup_report(rep, cohort, key);
      double a = 0.0, v = 0.0;
      std::size_t count = 0, correct = 0;
      for (const auto& r : rows) {
        a += r.adas13_sse;
        v += r.ventricles_sse;
        count += r.n;
        correct += r.correct;
        if (!r.suppressed) CHECK(r.adas13_rmse == doctest::Approx(std::sqrt(r.adas13_sse / double(r.n_adas13))));
      }
      CHECK(count == 60);
      CHECK(correct == 20);
      CHECK(a == doctest::Approx(sse_a).epsilon(1e-12));
      CHECK(v == doctest::Approx(sse_v).epsilon(1e-12));
    }
    const auto bands = subgroup_report(rep, cohort, GroupKey::AgeBand);
    REQUIRE(bands.size() == 3);
    CHECK(bands[0].group == "60-69");
    CHECK(bands[2].group == "80-89");
  }
  SUBCASE("a single level yields a single row") {
    auto one_sex = cohort;
    for (auto& p : one_sex) p.visits[0].demographics.sex = Sex::Female;
    const auto rows = subgroup_report(rep, one_sex, GroupKey::Sex);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].group == "Female");
    CHECK(rows[0].n == 60);
  }
  SUBCASE("small groups are suppressed") {
    auto skew = cohort;
    for (std::size_t i = 0; i < 60; ++i) skew[i].visits[0].demographics.apoe4_count = i < 3 ? 2 : 0;
    const auto rows = subgroup_report(rep, skew, GroupKey::APOE4);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].group == "2");
    CHECK(rows[1].n == 3);
    CHECK(rows[1].suppressed);
    CHECK_FALSE(rows[0].suppressed);
    std::ostringstream out;
    write_subgroup_csv(out, rows);
    CHECK(out.str().find("full") != std::string::npos);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(subgroup_report(rep, cohort, GroupKey::Sex, 100), DataError);
    CHECK_THROWS_AS(subgroup_report(rep, demographic_cohort(10), GroupKey::Sex), DataError);
    CHECK_THROWS_AS(parse_group_key("height"), UsageError);
    CHECK(parse_group_key("age-band") == GroupKey::AgeBand);
  }
}
