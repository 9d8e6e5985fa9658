#include "trajectwin/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace trajectwin::synth {

namespace {

using FeatureArray = std::array<double, kClinicalFeatures>;

io::json array_json(const FeatureArray& a) { return io::json(std::vector<double>(a.begin(), a.end())); }

FeatureArray array_from(const io::json& j, const char* name) {
  const auto v = j.at(name).get<std::vector<double>>();
  if (v.size() != kClinicalFeatures) throw SchemaError(std::string("sim spec: '") + name + "' needs 14 entries");
  FeatureArray a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

bool probability(double p) { return p >= 0.0 && p <= 1.0; }

std::optional<Diagnosis> next_stage(Diagnosis dx) {
  if (dx == Diagnosis::CN) return Diagnosis::MCI;
  if (dx == Diagnosis::MCI) return Diagnosis::AD;
  return std::nullopt;
}

GroupDynamics make_group(Diagnosis dx, double prevalence, double hazard, const FeatureArray& base,
                         const FeatureArray& base_sd, const FeatureArray& slope, const FeatureArray& noise,
                         double age_mean, std::array<double, 3> apoe4) {
  GroupDynamics g;
  g.group = dx;
  g.prevalence = prevalence;
  g.transition_hazard = hazard;
  g.baseline_mean = base;
  g.baseline_sd = base_sd;
  g.slope_mean = slope;
  for (std::size_t f = 0; f < kClinicalFeatures; ++f) g.slope_sd[f] = 0.5 * std::abs(slope[f]);
  g.noise_sd = noise;
  g.age_mean = age_mean;
  g.apoe4_probabilities = apoe4;
  return g;
}

PatientTruth draw_patient(const SimSpec& spec, std::size_t index, Rng& rng,
                          PatientTrajectory& out) {
  std::vector<double> weights;
  for (const auto& g : spec.groups) weights.push_back(g.prevalence);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const GroupDynamics& g = spec.groups[pick(rng)];
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  PatientTruth truth;
  truth.patient_id = "P" + std::to_string(index + 1);
  truth.group = g.group;

  // Shared intercept/slope factors for the cognitive and MRI panels.
  const double u_cog = normal(rng), s_cog = normal(rng);
  const double u_mri = normal(rng), s_mri = normal(rng);
  const double rho = spec.panel_coupling;
  for (std::size_t f = 0; f < kClinicalFeatures; ++f) {
    const bool cognitive = f < kCognitiveFeatures;
    const double load = rho * spec.direction[f];
    const double own = std::sqrt(std::max(0.0, 1.0 - load * load));
    const double u = cognitive ? u_cog : u_mri;
    const double s = cognitive ? s_cog : s_mri;
    const double eb = normal(rng), es = normal(rng);
    truth.baseline[f] = g.baseline_mean[f] + g.baseline_sd[f] * (load * u + own * eb);
    truth.slope[f] = g.slope_mean[f] + g.slope_sd[f] * (load * s + own * es);
  }

  // Demographics. Conditioning on age is by rejection; bounded attempts then
  // a uniform draw inside the range keep the loop finite for extreme ranges.
  double age = g.age_mean + g.age_sd * normal(rng);
  if (spec.constraints.age_range) {
    const auto [lo, hi] = *spec.constraints.age_range;
    int attempts = 0;
    while ((age < lo || age > hi) && attempts++ < 10000) age = g.age_mean + g.age_sd * normal(rng);
    if (age < lo || age > hi) age = lo + (hi - lo) * unit(rng);
  }
  truth.baseline_age = age;
  const Sex sex = unit(rng) < g.female_probability ? Sex::Female : Sex::Male;
  const double education = std::clamp(std::round(g.education_mean + g.education_sd * normal(rng)), 4.0, 22.0);
  std::discrete_distribution<int> apoe_pick(g.apoe4_probabilities.begin(), g.apoe4_probabilities.end());
  int apoe4 = apoe_pick(rng);
  if (spec.constraints.apoe4) apoe4 = *spec.constraints.apoe4;

  out.patient_id = truth.patient_id;
  out.visits.clear();
  Diagnosis dx = g.group;
  double t = 0.0;
  for (int j = 0;; ++j) {
    if (j > 0) {
      double next = j * spec.visit_interval + (spec.jitter_sd > 0.0 ? spec.jitter_sd * normal(rng) : 0.0);
      next = std::max(next, t + 0.5 * spec.visit_interval);
      if (next > spec.horizon) break;
      if (spec.dropout_probability > 0.0 && unit(rng) < spec.dropout_probability) break;
      const double p_move = 1.0 - std::pow(1.0 - g.transition_hazard, next - t);
      if (const auto stage = next_stage(dx); stage && g.transition_hazard > 0.0 && unit(rng) < p_move) dx = *stage;
      t = next;
    }
    VisitRecord v;
    v.patient_id = truth.patient_id;
    v.t = t;
    const bool cog_missing = unit(rng) < spec.cognitive_missing;
    const bool mri_missing = unit(rng) < spec.mri_missing;
    const bool demo_missing = unit(rng) < spec.demographics_missing;
    const bool dx_missing = unit(rng) < spec.diagnosis_missing;
    for (std::size_t f = 0; f < kClinicalFeatures; ++f) {
      const double noise = g.noise_sd[f] > 0.0 ? g.noise_sd[f] * normal(rng) : 0.0;
      double value = truth.baseline[f] + truth.slope[f] * t + noise;
      if (f == feature::ICV) value = std::max(value, 1.0);
      const bool missing = f < kCognitiveFeatures ? cog_missing : mri_missing;
      if (!missing) v.set_feature(f, value);
    }
    if (!dx_missing) v.diagnosis = dx;
    if (!demo_missing) {
      v.demographics.age = age;  // baseline age, as registry exports carry it
      v.demographics.sex = sex;
      v.demographics.education = education;
      v.demographics.apoe4_count = apoe4;
    }
    out.visits.push_back(std::move(v));
  }
  return truth;
}

}  // namespace

void SimSpec::validate() const {
  if (groups.empty()) throw UsageError("sim spec: no groups");
  double total = 0.0;
  for (const auto& g : groups) {
    if (!(g.prevalence >= 0.0)) throw UsageError("sim spec: negative prevalence");
    if (!probability(g.transition_hazard)) throw UsageError("sim spec: hazard outside [0,1]");
    if (!probability(g.female_probability)) throw UsageError("sim spec: female probability outside [0,1]");
    for (std::size_t f = 0; f < kClinicalFeatures; ++f)
      if (g.baseline_sd[f] < 0 || g.slope_sd[f] < 0 || g.noise_sd[f] < 0)
        throw UsageError("sim spec: standard deviations must be non-negative");
    if (g.age_sd < 0 || g.education_sd < 0) throw UsageError("sim spec: standard deviations must be non-negative");
    double apoe = 0.0;
    for (double p : g.apoe4_probabilities) {
      if (p < 0) throw UsageError("sim spec: negative APOE4 probability");
      apoe += p;
    }
    if (!(apoe > 0)) throw UsageError("sim spec: APOE4 probabilities are all zero");
    total += g.prevalence;
  }
  if (std::abs(total - 1.0) > 1e-9) throw UsageError("sim spec: prevalence weights must sum to 1");
  if (!(horizon > 0.0)) throw UsageError("sim spec: horizon must be positive");
  if (!(visit_interval > 0.0) || jitter_sd < 0.0) throw UsageError("sim spec: invalid visit schedule");
  for (double p : {dropout_probability, cognitive_missing, mri_missing, demographics_missing, diagnosis_missing})
    if (!probability(p)) throw UsageError("sim spec: probabilities must lie in [0,1]");
  if (!(panel_coupling >= 0.0 && panel_coupling <= 1.0)) throw UsageError("sim spec: panel coupling outside [0,1]");
}

io::json SimSpec::to_json() const {
  io::json groups_json = io::json::array();
  for (const auto& g : groups) {
    groups_json.push_back({{"group", diagnosis_name(g.group)},
                           {"prevalence", g.prevalence},
                           {"transition_hazard", g.transition_hazard},
                           {"baseline_mean", array_json(g.baseline_mean)},
                           {"baseline_sd", array_json(g.baseline_sd)},
                           {"slope_mean", array_json(g.slope_mean)},
                           {"slope_sd", array_json(g.slope_sd)},
                           {"noise_sd", array_json(g.noise_sd)},
                           {"age_mean", g.age_mean},
                           {"age_sd", g.age_sd},
                           {"female_probability", g.female_probability},
                           {"education_mean", g.education_mean},
                           {"education_sd", g.education_sd},
                           {"apoe4_probabilities", g.apoe4_probabilities}});
  }
  io::json c = io::json::object();
  if (constraints.group) c["group"] = diagnosis_name(*constraints.group);
  if (constraints.apoe4) c["apoe4"] = *constraints.apoe4;
  if (constraints.age_range) c["age_range"] = {constraints.age_range->first, constraints.age_range->second};
  auto names = all_feature_names();
  names.resize(kClinicalFeatures);
  return {{"format", "trajectwin.simspec"},
          {"version", 1},
          {"features", names},
          {"groups", groups_json},
          {"visit_interval", visit_interval},
          {"jitter_sd", jitter_sd},
          {"dropout_probability", dropout_probability},
          {"cognitive_missing", cognitive_missing},
          {"mri_missing", mri_missing},
          {"demographics_missing", demographics_missing},
          {"diagnosis_missing", diagnosis_missing},
          {"horizon", horizon},
          {"panel_coupling", panel_coupling},
          {"direction", array_json(direction)},
          {"constraints", c},
          {"seed", seed}};
}

SimSpec SimSpec::from_json(const io::json& j) {
  io::require_document(j, "trajectwin.simspec", 1);
  SimSpec s;
  try {
    for (const auto& gj : j.at("groups")) {
      GroupDynamics g;
      const auto dx = parse_diagnosis(gj.at("group").get<std::string>());
      if (!dx) throw SchemaError("sim spec: unknown group label");
      g.group = *dx;
      g.prevalence = gj.at("prevalence").get<double>();
      g.transition_hazard = gj.value("transition_hazard", 0.0);
      g.baseline_mean = array_from(gj, "baseline_mean");
      g.baseline_sd = array_from(gj, "baseline_sd");
      g.slope_mean = array_from(gj, "slope_mean");
      g.slope_sd = array_from(gj, "slope_sd");
      g.noise_sd = array_from(gj, "noise_sd");
      g.age_mean = gj.value("age_mean", g.age_mean);
      g.age_sd = gj.value("age_sd", g.age_sd);
      g.female_probability = gj.value("female_probability", g.female_probability);
      g.education_mean = gj.value("education_mean", g.education_mean);
      g.education_sd = gj.value("education_sd", g.education_sd);
      if (gj.contains("apoe4_probabilities"))
        g.apoe4_probabilities = gj.at("apoe4_probabilities").get<std::array<double, 3>>();
      s.groups.push_back(g);
    }
    s.visit_interval = j.value("visit_interval", s.visit_interval);
    s.jitter_sd = j.value("jitter_sd", s.jitter_sd);
    s.dropout_probability = j.value("dropout_probability", s.dropout_probability);
    s.cognitive_missing = j.value("cognitive_missing", s.cognitive_missing);
    s.mri_missing = j.value("mri_missing", s.mri_missing);
    s.demographics_missing = j.value("demographics_missing", s.demographics_missing);
    s.diagnosis_missing = j.value("diagnosis_missing", s.diagnosis_missing);
    s.horizon = j.value("horizon", s.horizon);
    s.panel_coupling = j.value("panel_coupling", s.panel_coupling);
    if (j.contains("direction")) s.direction = array_from(j, "direction");
    s.seed = j.value("seed", s.seed);
    if (j.contains("constraints")) {
      const auto& c = j.at("constraints");
      if (c.contains("group")) s.constraints.group = parse_diagnosis(c.at("group").get<std::string>());
      if (c.contains("apoe4")) s.constraints.apoe4 = c.at("apoe4").get<int>();
      if (c.contains("age_range")) {
        const auto r = c.at("age_range").get<std::vector<double>>();
        if (r.size() != 2) throw SchemaError("sim spec: age_range needs two entries");
        s.constraints.age_range = std::make_pair(r[0], r[1]);
      }
    }
  } catch (const io::json::exception& e) {
    throw SchemaError(std::string("sim spec: ") + e.what());
  }
  s.validate();
  return s;
}

SimSpec fixture_spec() {
  SimSpec s;
  // CDRSB ADAS11 ADAS13 MMSE RAVLT FAQ MOCA | Ventricles Hippocampus WholeBrain Entorhinal Fusiform MidTemp ICV
  const FeatureArray sd_base = {0.8, 4.0, 6.0, 2.0, 9.0, 4.0, 3.0, 18000, 950, 100000, 650, 2500, 2800, 150000};
  const FeatureArray noise = {1.2, 5.0, 7.0, 2.6, 10.0, 5.0, 3.6, 14000, 500, 24000, 440, 1400, 1600, 40000};
  // Demographics are drawn identically in every group and carry no signal.
  const std::array<double, 3> apoe4 = {0.55, 0.36, 0.09};
  s.groups.push_back(make_group(
      Diagnosis::CN, 0.35, 0.003,
      {0.1, 6.0, 9.0, 29.0, 45.0, 0.3, 26.0, 33000, 7400, 1050000, 3800, 18000, 20000, 1500000}, sd_base,
      {0.005, 0.02, 0.03, -0.008, -0.03, 0.01, -0.008, 80, -6, -450, -4, -12, -14, 0},
      noise, 73.5, apoe4));
  s.groups.push_back(make_group(
      Diagnosis::MCI, 0.45, 0.010,
      {1.5, 10.0, 16.5, 27.5, 35.0, 2.5, 23.0, 42000, 6700, 1020000, 3400, 17000, 19000, 1550000}, sd_base,
      {0.04, 0.08, 0.14, -0.05, -0.12, 0.08, -0.06, 150, -13, -800, -7, -22, -28, 0},
      noise, 73.5, apoe4));
  s.groups.push_back(make_group(
      Diagnosis::AD, 0.20, 0.0,
      {4.5, 19.0, 30.0, 23.0, 22.0, 13.0, 17.5, 50000, 5700, 980000, 2800, 15500, 16500, 1550000}, sd_base,
      {0.12, 0.30, 0.42, -0.16, -0.16, 0.30, -0.20, 260, -21, -1100, -11, -32, -42, 0},
      noise, 73.5, apoe4));
  s.visit_interval = 6.0;
  s.jitter_sd = 1.0;
  s.dropout_probability = 0.08;
  s.cognitive_missing = 0.1;
  s.mri_missing = 0.2;
  s.demographics_missing = 0.0;
  s.diagnosis_missing = 0.05;
  s.horizon = 60.0;
  s.panel_coupling = 0.95;
  s.direction = {1, 1, 1, -1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 0};
  s.seed = 42;
  return s;
}

SimulationResult simulate_cohort(const SimSpec& spec, std::size_t n_patients, std::uint64_t seed, int threads) {
  spec.validate();
  if (n_patients < 1) throw UsageError("simulate_cohort: n_patients must be >= 1");
  SimulationResult res;
  res.cohort.resize(n_patients);
  res.truth.resize(n_patients);
  parallel_for(n_patients, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    res.truth[i] = draw_patient(spec, i, rng, res.cohort[i]);
  });
  return res;
}

SimSpec condition(const SimSpec& spec, const Constraints& c) {
  SimSpec out = spec;
  if (c.group) {
    if (spec.constraints.group && *spec.constraints.group != *c.group)
      throw UsageError("condition: group constraint conflicts with existing constraint");
    bool found = false;
    for (auto& g : out.groups) {
      const bool match = g.group == *c.group;
      found = found || match;
      g.prevalence = match ? 1.0 : 0.0;
    }
    if (!found) throw UsageError("condition: group " + std::string(diagnosis_name(*c.group)) + " absent from spec");
    out.constraints.group = c.group;
  }
  if (c.apoe4) {
    if (*c.apoe4 < 0 || *c.apoe4 > 2) throw UsageError("condition: APOE4 count must be 0, 1 or 2");
    if (spec.constraints.apoe4 && *spec.constraints.apoe4 != *c.apoe4)
      throw UsageError("condition: APOE4 constraint conflicts with existing constraint");
    double mass = 0.0;
    for (const auto& g : out.groups) mass += g.prevalence * g.apoe4_probabilities[static_cast<std::size_t>(*c.apoe4)];
    if (!(mass > 0.0)) throw UsageError("condition: no group can produce the requested APOE4 count");
    out.constraints.apoe4 = c.apoe4;
  }
  if (c.age_range) {
    auto [lo, hi] = *c.age_range;
    if (spec.constraints.age_range) {
      lo = std::max(lo, spec.constraints.age_range->first);
      hi = std::min(hi, spec.constraints.age_range->second);
    }
    if (!(lo <= hi)) throw UsageError("condition: empty age range");
    out.constraints.age_range = std::make_pair(lo, hi);
  }
  out.validate();
  return out;
}

AugmentResult augment(const Cohort& real, const SimSpec& spec, const std::map<Diagnosis, double>& fractions,
                      std::uint64_t seed) {
  AugmentResult res;
  res.cohort = real;
  std::map<Diagnosis, std::size_t> counts;
  std::set<std::string> ids;
  for (const auto& p : real) {
    ids.insert(p.patient_id);
    if (p.synthetic()) continue;
    if (const auto dx = p.baseline_diagnosis()) ++counts[*dx];
  }
  for (const auto& [dx, fraction] : fractions) {
    if (fraction < 0.0) throw UsageError("augment: fractions must be non-negative");
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(counts[dx])));
    if (n == 0) continue;
    const auto conditioned = condition(spec, Constraints{dx, std::nullopt, std::nullopt});
    auto sim = simulate_cohort(conditioned, n, derive_seed(seed, diagnosis_name(dx)));
    for (std::size_t i = 0; i < sim.cohort.size(); ++i) {
      auto& p = sim.cohort[i];
      std::string id = "SYN-" + std::string(diagnosis_name(dx)) + "-" + std::to_string(i + 1);
      while (ids.contains(id)) id += "x";
      ids.insert(id);
      p.patient_id = id;
      for (auto& v : p.visits) {
        v.patient_id = id;
        v.synthetic = true;
      }
      res.cohort.push_back(std::move(p));
    }
    res.synthetic_patients[dx] = n;
  }
  return res;
}

SimulationResult simulate_state_space(const ssm::SSMParameters& params, const std::vector<std::size_t>& slots,
                                      std::size_t n_patients, std::size_t visits, std::uint64_t seed) {
  params.validate();
  if (static_cast<Eigen::Index>(slots.size()) != params.obs_dim())
    throw ShapeError("simulate_state_space: one feature slot per observed dimension required");
  const auto d = params.latent_dim();
  const auto m = params.obs_dim();
  const Matrix Lq = Eigen::LLT<Matrix>(params.Q + 1e-300 * Matrix::Identity(d, d)).matrixL();
  const Matrix L0 = Eigen::LLT<Matrix>(params.P0 + 1e-300 * Matrix::Identity(d, d)).matrixL();
  SimulationResult res;
  for (std::size_t i = 0; i < n_patients; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](Eigen::Index n) {
      Vector e(n);
      for (Eigen::Index k = 0; k < n; ++k) e(k) = normal(rng);
      return e;
    };
    PatientTrajectory traj;
    traj.patient_id = "S" + std::to_string(i + 1);
    Vector z = params.m0 + L0 * draw(d);
    for (std::size_t j = 0; j < visits; ++j) {
      if (j > 0) z = params.A * z + Lq * draw(d);
      const Vector x = params.H * z + params.r_obs.cwiseSqrt().cwiseProduct(draw(m));
      VisitRecord v;
      v.patient_id = traj.patient_id;
      v.t = static_cast<double>(j) * params.delta;
      for (Eigen::Index k = 0; k < m; ++k) v.set_feature(slots[static_cast<std::size_t>(k)], x(k));
      traj.visits.push_back(std::move(v));
    }
    res.truth.push_back({traj.patient_id, Diagnosis::CN, {}, {}, 0.0});
    res.cohort.push_back(std::move(traj));
  }
  return res;
}

ssm::SSMParameters scalar_reference_params() {
  ssm::SSMParameters p;
  p.A = Matrix::Constant(1, 1, 0.9);
  p.Q = Matrix::Constant(1, 1, 0.1);
  p.H = Matrix::Constant(1, 1, 1.0);
  p.r_obs = Vector::Constant(1, 0.2);
  p.m0 = Vector::Zero(1);
  p.P0 = Matrix::Constant(1, 1, 0.1 / (1.0 - 0.81));
  p.delta = 6.0;
  return p;
}

}  // namespace trajectwin::synth
