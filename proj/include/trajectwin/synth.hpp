#pragma once

// Parametric conditional cohort simulator: linear mixed-effects trajectories
// (random intercept + random slope + noise) per diagnostic group, with
// jittered visit schedules, study dropout, modality-level missingness and
// hazard-driven diagnosis transitions.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trajectwin/data_model.hpp"
#include "trajectwin/io.hpp"
#include "trajectwin/ssm.hpp"

namespace trajectwin::synth {

// Cognitive and MRI features; demographics are generated separately.
inline constexpr std::size_t kClinicalFeatures = kCognitiveFeatures + kMriFeatures;

struct GroupDynamics {
  Diagnosis group = Diagnosis::CN;
  std::array<double, kClinicalFeatures> baseline_mean{};
  std::array<double, kClinicalFeatures> baseline_sd{};
  std::array<double, kClinicalFeatures> slope_mean{};  // per month
  std::array<double, kClinicalFeatures> slope_sd{};
  std::array<double, kClinicalFeatures> noise_sd{};
  // Monthly probability of progressing to the next stage (CN->MCI, MCI->AD).
  double transition_hazard = 0.0;
  double prevalence = 0.0;

  double age_mean = 73.0;
  double age_sd = 7.0;
  double female_probability = 0.5;
  double education_mean = 16.0;
  double education_sd = 2.5;
  std::array<double, 3> apoe4_probabilities{0.7, 0.25, 0.05};
};

struct Constraints {
  std::optional<Diagnosis> group;
  std::optional<int> apoe4;
  std::optional<std::pair<double, double>> age_range;  // baseline age, inclusive
};

struct SimSpec {
  std::vector<GroupDynamics> groups;
  double visit_interval = 6.0;  // months
  double jitter_sd = 0.0;       // months, applied to follow-up visits
  double dropout_probability = 0.0;
  // Per-visit probability that a whole panel is missing.
  double cognitive_missing = 0.0;
  double mri_missing = 0.0;
  double demographics_missing = 0.0;
  double diagnosis_missing = 0.0;
  double horizon = 60.0;  // months
  // Correlation of the random effects within a modality panel, shared
  // through one intercept and one slope factor per panel.
  double panel_coupling = 0.0;
  // Sign with which each feature loads on its panel factors.
  std::array<double, kClinicalFeatures> direction{};
  Constraints constraints;
  std::uint64_t seed = 42;

  void validate() const;
  io::json to_json() const;
  static SimSpec from_json(const io::json& j);
};

// The in-repo fixture: couples ADAS13 to the cognitive panel and Ventricles to
// the MRI panel, with demographics carrying no trajectory signal.
SimSpec fixture_spec();

struct PatientTruth {
  std::string patient_id;
  Diagnosis group = Diagnosis::CN;
  std::array<double, kClinicalFeatures> baseline{};
  std::array<double, kClinicalFeatures> slope{};
  double baseline_age = 0.0;
};

struct SimulationResult {
  Cohort cohort;
  std::vector<PatientTruth> truth;
};

// Patient i draws from its own generator seeded by derive_seed(seed, i), so
// generation order and thread count do not affect the output.
SimulationResult simulate_cohort(const SimSpec& spec, std::size_t n_patients, std::uint64_t seed, int threads = 1);

SimSpec condition(const SimSpec& spec, const Constraints& constraints);

struct AugmentResult {
  Cohort cohort;
  std::map<Diagnosis, std::size_t> synthetic_patients;
};

// Appends round(fraction * real count) synthetic patients per baseline group.
AugmentResult augment(const Cohort& real, const SimSpec& spec, const std::map<Diagnosis, double>& fractions,
                      std::uint64_t seed);

// Trajectories drawn from a linear-Gaussian state-space model, one visit per
// base step, observations written into `feature_slots` (size m).
SimulationResult simulate_state_space(const ssm::SSMParameters& params, const std::vector<std::size_t>& feature_slots,
                                      std::size_t n_patients, std::size_t visits, std::uint64_t seed);

// A=0.9, Q=0.1, H=1, R_obs=0.2, stationary initial state, delta=6.
ssm::SSMParameters scalar_reference_params();

}  // namespace trajectwin::synth
