#include "trajectwin/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "trajectwin/ablation.hpp"
#include "trajectwin/data_model.hpp"
#include "trajectwin/rnn.hpp"
#include "trajectwin/ssm.hpp"
#include "trajectwin/synth.hpp"
#include "trajectwin/tensor.hpp"
#include "trajectwin/vvuq.hpp"

namespace trajectwin::cli {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr std::string_view kCommands[] = {"simulate", "ingest",     "fit-ssm",   "fit-rnn", "forecast", "ablate",
                                          "tensor-fit", "calibrate", "detect", "importance", "trend"};

// Options that describe how a run executes rather than what it computes.
// They are left out of the manifest so that manifests agree across thread
// counts and manifest locations.
const std::set<std::string> kExecutionOptions = {"help", "config", "threads", "manifest"};

struct Common {
  std::uint64_t seed = 42;
  int threads = 0;
  std::string config;
  std::string manifest;
};

// Collects everything a command reads and writes; outputs are committed
// together at the end so a failing run leaves no partial files.
struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string command;
  Common common;
  std::vector<std::string> inputs;
  std::vector<std::pair<std::string, std::string>> outputs;
  std::string default_manifest_dir = ".";

  int threads() const { return common.threads > 0 ? common.threads : default_thread_count(); }

  std::string read(const std::string& path) {
    inputs.push_back(path);
    return io::read_file(path);
  }
  void write(const std::string& path, std::string content) { outputs.emplace_back(path, std::move(content)); }
  void manifest_near(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    default_manifest_dir = parent.empty() ? "." : parent.string();
  }
};

using Runner = std::function<void(Context&)>;

std::vector<std::string> split_list(std::string_view text, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(sep, start), text.size());
    const auto tok = io::trim(text.substr(start, end - start));
    if (!tok.empty()) out.emplace_back(tok);
    start = end + 1;
  }
  return out;
}

std::vector<double> parse_doubles(std::string_view text, const char* what) {
  std::vector<double> out;
  for (const auto& tok : split_list(text)) {
    const auto v = io::parse_number(tok);
    if (!v) throw UsageError(std::string(what) + ": '" + tok + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

std::size_t feature_or_throw(std::string_view name) {
  const auto f = feature_index(name);
  if (!f) {
    std::string names;
    for (const auto& n : all_feature_names()) names += (names.empty() ? "" : ", ") + n;
    throw UsageError("unknown feature '" + std::string(name) + "'; valid names: " + names);
  }
  return *f;
}

Diagnosis diagnosis_or_throw(std::string_view text) {
  const auto dx = parse_diagnosis(text);
  if (!dx) throw UsageError("unknown diagnosis '" + std::string(text) + "' (CN|MCI|AD)");
  return *dx;
}

json parse_json_text(const std::string& text, const std::string& path) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(path + ": invalid JSON: " + e.what());
  }
}

Cohort load_cohort(Context& ctx, const std::string& path, const std::string& mapping = {}) {
  ColumnMap schema = ColumnMap::defaults();
  if (!mapping.empty()) {
    std::istringstream m(ctx.read(mapping));
    schema = ColumnMap::from_mapping(m);
  }
  std::istringstream in(ctx.read(path));
  auto res = ingest_csv(in, schema);
  for (const auto& w : res.warnings) ctx.err << "warning: " << w << "\n";
  return std::move(res.cohort);
}

std::string cohort_csv(const Cohort& cohort) {
  std::ostringstream o;
  write_cohort_csv(o, cohort);
  return o.str();
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void add_out(CLI::App& app, std::string& target, const std::string& description) {
  app.add_option("--out", target, description)->required();
}

SplitRatios parse_ratios(std::string_view text) {
  const auto r = parse_doubles(text, "--ratios");
  if (r.size() != 3) throw UsageError("--ratios expects three values train,validation,test");
  return {r[0], r[1], r[2]};
}

struct RnnOptions {
  rnn::RNNConfig config;
  void add(CLI::App& app) {
    app.add_option("--layers", config.layers, "Stacked recurrent layers");
    app.add_option("--hidden", config.hidden_size, "Hidden units per layer");
    app.add_option("--dropout", config.dropout_rate, "Dropout between layers");
    app.add_option("--lr", config.learning_rate, "Adam learning rate");
    app.add_option("--batch", config.batch_size, "Mini-batch size");
    app.add_option("--epochs", config.epochs, "Training epochs");
  }
};

struct SplitOptions {
  std::string ratios = "0.8,0.15,0.05";
  std::string mode = "patient-disjoint";
  bool include_gap = false;
  void add(CLI::App& app) {
    app.add_option("--ratios", ratios, "Train,validation,test fractions");
    app.add_option("--split-mode", mode, "patient-disjoint or pair-level");
    app.add_flag("--include-gap", include_gap, "Append the inter-visit gap to recurrent inputs");
  }
  ablation::AblationConfig config(const Context& ctx, const rnn::RNNConfig& rnn) const {
    ablation::AblationConfig c;
    c.ratios = parse_ratios(ratios);
    c.mode = parse_split_mode(mode);
    c.seed = ctx.common.seed;
    c.rnn = rnn;
    c.include_gap = include_gap;
    c.threads = ctx.threads();
    return c;
  }
};

// Observation sequences in model units for the features named by params.
std::vector<ssm::ObservedTrajectory> observe_raw(const Cohort& cohort, const std::vector<std::size_t>& features,
                                                 const Vector& center, const Vector& scale) {
  std::vector<ssm::ObservedTrajectory> out;
  const auto m = static_cast<Eigen::Index>(features.size());
  for (const auto& p : cohort) {
    ssm::ObservedTrajectory o;
    o.patient_id = p.patient_id;
    for (const auto& v : p.visits) {
      auto obs = ssm::Observation::missing(m);
      for (Eigen::Index r = 0; r < m; ++r) {
        if (const auto x = v.feature(features[static_cast<std::size_t>(r)])) {
          obs.values(r) = (*x - center(r)) / scale(r);
          obs.present[static_cast<std::size_t>(r)] = true;
        }
      }
      o.times.push_back(v.t);
      o.observations.push_back(std::move(obs));
    }
    out.push_back(std::move(o));
  }
  return out;
}

struct LoadedSsm {
  ssm::SSMParameters params;
  std::vector<std::size_t> features;
  Vector center, scale;
};

LoadedSsm load_ssm(Context& ctx, const std::string& path) {
  LoadedSsm l;
  l.params = ssm::SSMParameters::from_json(parse_json_text(ctx.read(path), path));
  const auto m = l.params.obs_dim();
  if (static_cast<Eigen::Index>(l.params.feature_names.size()) != m)
    throw SchemaError(path + ": parameters carry no feature names; refit with fit-ssm");
  for (const auto& n : l.params.feature_names) l.features.push_back(feature_or_throw(n));
  l.center = l.params.center.size() == m ? l.params.center : Vector::Zero(m);
  l.scale = l.params.scale.size() == m ? l.params.scale : Vector::Ones(m);
  return l;
}

// ---------------------------------------------------------------- simulate

Runner setup_simulate(CLI::App& app) {
  struct O {
    std::string spec = "fixture", out, truth, group, augment;
    std::size_t n = 300, visits = 10, p = 4, q = 3;
    int apoe4 = -1, planted_rank = 1;
    std::optional<double> age_min, age_max;
    double noise = 0.01, intercept = 1.0;
    double fraction_cn = 0.0, fraction_mci = 0.0, fraction_ad = 0.0;
  };
  auto o = std::make_shared<O>();
  app.add_option("--spec", o->spec, "fixture, ssm-scalar, tensor or a SimSpec JSON path");
  app.add_option("--n", o->n, "Patients (or samples for --spec tensor)");
  app.add_option("--visits", o->visits, "Visits per patient for --spec ssm-scalar");
  add_out(app, o->out, "Output CSV");
  app.add_option("--truth", o->truth, "Optional ground-truth output");
  app.add_option("--group", o->group, "Condition on baseline group (CN|MCI|AD)");
  app.add_option("--apoe4", o->apoe4, "Condition on APOE4 count (0-2)");
  app.add_option("--age-min", o->age_min, "Lower baseline age bound");
  app.add_option("--age-max", o->age_max, "Upper baseline age bound");
  app.add_option("--augment", o->augment, "Cohort CSV to augment with synthetic patients");
  app.add_option("--fraction-cn", o->fraction_cn, "Synthetic CN patients per real CN patient");
  app.add_option("--fraction-mci", o->fraction_mci, "Synthetic MCI patients per real MCI patient");
  app.add_option("--fraction-ad", o->fraction_ad, "Synthetic AD patients per real AD patient");
  app.add_option("--p", o->p, "Covariate rows for --spec tensor");
  app.add_option("--q", o->q, "Covariate columns for --spec tensor");
  app.add_option("--planted-rank", o->planted_rank, "Coefficient rank for --spec tensor");
  app.add_option("--noise", o->noise, "Outcome noise sd for --spec tensor");
  app.add_option("--intercept", o->intercept, "Outcome intercept for --spec tensor");
  return [o](Context& ctx) {
    const auto seed = ctx.common.seed;
    ctx.manifest_near(o->out);
    if (o->spec == "tensor") {
      if (o->planted_rank < 1) throw UsageError("--planted-rank must be >= 1");
      Rng rng(derive_seed(seed, "tensor-coefficient"));
      std::normal_distribution<double> normal(0.0, 1.0);
      Matrix C = Matrix::Zero(static_cast<Eigen::Index>(o->p), static_cast<Eigen::Index>(o->q));
      for (int r = 0; r < o->planted_rank; ++r) {
        Vector a(C.rows()), b(C.cols());
        for (auto& x : a) x = normal(rng);
        for (auto& x : b) x = normal(rng);
        C += a * b.transpose();
      }
      const auto data = tensor::simulate_dataset(C, o->intercept, o->n, o->noise, seed);
      std::ostringstream s;
      tensor::write_dataset_csv(s, data);
      ctx.write(o->out, s.str());
      if (!o->truth.empty())
        ctx.write(o->truth, dump({{"coefficient", io::matrix_to_json(C)}, {"intercept", o->intercept}}));
      ctx.out << "wrote " << data.size() << " samples of shape " << o->p << "x" << o->q << "\n";
      return;
    }
    if (o->spec == "ssm-scalar") {
      const auto sim = synth::simulate_state_space(synth::scalar_reference_params(), {feature::ADAS13}, o->n,
                                                   o->visits, seed);
      ctx.write(o->out, cohort_csv(sim.cohort));
      if (!o->truth.empty()) ctx.write(o->truth, dump(synth::scalar_reference_params().to_json()));
      ctx.out << "wrote " << sim.cohort.size() << " patients\n";
      return;
    }
    synth::SimSpec spec;
    if (o->spec == "fixture") {
      spec = synth::fixture_spec();
    } else {
      spec = synth::SimSpec::from_json(parse_json_text(ctx.read(o->spec), o->spec));
    }
    synth::Constraints c;
    if (!o->group.empty()) c.group = diagnosis_or_throw(o->group);
    if (o->apoe4 >= 0) c.apoe4 = o->apoe4;
    if (o->age_min || o->age_max) {
      c.age_range = std::make_pair(o->age_min.value_or(0.0), o->age_max.value_or(200.0));
    }
    if (c.group || c.apoe4 || c.age_range) spec = synth::condition(spec, c);

    if (!o->augment.empty()) {
      const auto real = load_cohort(ctx, o->augment);
      const std::map<Diagnosis, double> fractions = {
          {Diagnosis::CN, o->fraction_cn}, {Diagnosis::MCI, o->fraction_mci}, {Diagnosis::AD, o->fraction_ad}};
      const auto res = synth::augment(real, spec, fractions, seed);
      ctx.write(o->out, cohort_csv(res.cohort));
      for (const auto& [dx, n] : res.synthetic_patients)
        ctx.out << "appended " << n << " synthetic " << diagnosis_name(dx) << " patients\n";
      return;
    }
    const auto sim = synth::simulate_cohort(spec, o->n, seed, ctx.threads());
    ctx.write(o->out, cohort_csv(sim.cohort));
    if (!o->truth.empty()) {
      std::ostringstream t;
      t << "patient_id,group,baseline_age,feature,baseline,slope\n";
      for (const auto& p : sim.truth)
        for (std::size_t f = 0; f < synth::kClinicalFeatures; ++f)
          t << p.patient_id << ',' << diagnosis_name(p.group) << ',' << io::format_double(p.baseline_age) << ','
            << feature_name(f) << ',' << io::format_double(p.baseline[f]) << ',' << io::format_double(p.slope[f])
            << '\n';
      ctx.write(o->truth, t.str());
    }
    ctx.out << "wrote " << sim.cohort.size() << " patients\n";
  };
}

// ---------------------------------------------------------------- ingest

Runner setup_ingest(CLI::App& app) {
  struct O {
    std::string in, mapping, out, report;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Input CSV")->required();
  app.add_option("--mapping", o->mapping, "Column mapping file (canonical=actual lines)");
  add_out(app, o->out, "Canonical cohort CSV");
  app.add_option("--report", o->report, "Optional ingestion summary JSON");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    ColumnMap schema = ColumnMap::defaults();
    if (!o->mapping.empty()) {
      std::istringstream m(ctx.read(o->mapping));
      schema = ColumnMap::from_mapping(m);
    }
    std::istringstream in(ctx.read(o->in));
    const auto res = ingest_csv(in, schema);
    for (const auto& w : res.warnings) ctx.err << "warning: " << w << "\n";
    ctx.write(o->out, cohort_csv(res.cohort));
    std::size_t visits = 0;
    for (const auto& p : res.cohort) visits += p.visits.size();
    if (!o->report.empty())
      ctx.write(o->report, dump({{"rows", res.rows},
                                 {"patients", res.cohort.size()},
                                 {"visits", visits},
                                 {"duplicates_removed", res.duplicates_removed},
                                 {"pairs", enumerate_pairs(res.cohort).size()},
                                 {"warnings", res.warnings}}));
    ctx.out << res.cohort.size() << " patients, " << visits << " visits, " << res.duplicates_removed
            << " duplicates removed\n";
  };
}

// ---------------------------------------------------------------- fit-ssm

Runner setup_fit_ssm(CLI::App& app) {
  struct O {
    std::string in, out, trace, features = "ADAS13";
    int d = 1, max_iters = 200;
    double delta = 6.0, tol = 1e-8;
    bool raw = false;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Parameter JSON");
  app.add_option("--trace", o->trace, "Optional log-likelihood trace CSV");
  app.add_option("--features", o->features, "Comma-separated observed features");
  app.add_option("--d", o->d, "Latent dimension");
  app.add_option("--delta", o->delta, "Base step in months");
  app.add_option("--max-iters", o->max_iters, "EM iterations");
  app.add_option("--tol", o->tol, "Relative log-likelihood tolerance");
  app.add_flag("--raw", o->raw, "Fit on raw values instead of z-scores");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto cohort = load_cohort(ctx, o->in);
    std::vector<std::size_t> features;
    for (const auto& n : split_list(o->features)) features.push_back(feature_or_throw(n));
    if (features.empty()) throw UsageError("--features: no features given");
    const auto m = static_cast<Eigen::Index>(features.size());
    Vector center = Vector::Zero(m), scale = Vector::Ones(m);
    if (!o->raw) {
      for (Eigen::Index r = 0; r < m; ++r) {
        double s = 0.0, ss = 0.0;
        std::size_t n = 0;
        for (const auto& p : cohort)
          for (const auto& v : p.visits)
            if (const auto x = v.feature(features[static_cast<std::size_t>(r)])) {
              s += *x;
              ++n;
            }
        if (n < 2) throw DataError("fit-ssm: feature " + std::string(feature_name(features[std::size_t(r)])) +
                                   " has fewer than two observations");
        const double mean = s / double(n);
        for (const auto& p : cohort)
          for (const auto& v : p.visits)
            if (const auto x = v.feature(features[static_cast<std::size_t>(r)])) ss += (*x - mean) * (*x - mean);
        const double sd = std::sqrt(ss / double(n - 1));
        if (!(sd > 0.0)) throw DataError("fit-ssm: feature is constant");
        center(r) = mean;
        scale(r) = sd;
      }
    }
    const auto obs = observe_raw(cohort, features, center, scale);
    ssm::EmConfig em;
    em.max_iters = o->max_iters;
    em.tol = o->tol;
    em.seed = derive_seed(ctx.common.seed, "ssm");
    em.threads = ctx.threads();
    auto fit = ssm::fit_em(obs, o->d, o->delta, em);
    for (const auto& w : fit.warnings) ctx.err << "warning: " << w << "\n";
    fit.params.feature_names.clear();
    for (auto f : features) fit.params.feature_names.emplace_back(feature_name(f));
    fit.params.center = center;
    fit.params.scale = scale;
    auto doc = fit.params.to_json();
    doc["fit"] = {{"iterations", fit.iterations},
                  {"converged", fit.converged},
                  {"log_likelihood", fit.trace.back()},
                  {"warnings", fit.warnings}};
    ctx.write(o->out, dump(doc));
    if (!o->trace.empty()) {
      std::ostringstream t;
      t << "iteration,log_likelihood\n";
      for (std::size_t i = 0; i < fit.trace.size(); ++i) t << i << ',' << io::format_double(fit.trace[i]) << '\n';
      ctx.write(o->trace, t.str());
    }
    ctx.out << "EM " << (fit.converged ? "converged" : "stopped") << " after " << fit.iterations
            << " iterations, log-likelihood " << io::format_double(fit.trace.back()) << "\n";
  };
}

// ---------------------------------------------------------------- fit-rnn

Runner setup_fit_rnn(CLI::App& app) {
  struct O {
    std::string in, out, trace, spec = "full";
    RnnOptions rnn;
    SplitOptions split;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Parameter JSON");
  app.add_option("--trace", o->trace, "Optional loss trace CSV (epoch, train_loss, val_loss)");
  app.add_option("--spec", o->spec, "Modality set, e.g. cognitive+mri");
  o->rnn.add(app);
  o->split.add(app);
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto cohort = load_cohort(ctx, o->in);
    auto spec = ablation::AblationSpec::parse(o->spec);
    if (spec.predictor != ablation::PredictorKind::Recurrent) throw UsageError("fit-rnn: spec must be recurrent");
    const auto cfg = o->split.config(ctx, o->rnn.config);
    const auto data = ablation::prepare(cohort, cfg);
    for (const auto& w : data.clean.warnings) ctx.err << "warning: " << w << "\n";
    auto rc = cfg.rnn;
    rc.input_dimension = spec.width() + (cfg.include_gap ? 1 : 0);
    rc.seed = derive_seed(cfg.seed, "rnn");
    std::vector<rnn::Example> train, val;
    auto example = [&](std::size_t i) {
      const auto& p = data.pairs[i];
      return rnn::Example{ablation::assemble_history(p, spec, cfg.include_gap),
                          {p.target.adas13, p.target.ventricles, static_cast<int>(p.target.diagnosis)}};
    };
    for (auto i : data.split.train) train.push_back(example(i));
    for (auto i : data.split.validation) val.push_back(example(i));
    const auto res = rnn::train(train, val, rc);
    auto doc = res.params.to_json();
    doc["spec"] = spec.to_string();
    doc["include_gap"] = cfg.include_gap;
    ctx.write(o->out, dump(doc));
    if (!o->trace.empty()) {
      std::ostringstream t;
      ablation::write_trace_csv(t, res.trace);
      ctx.write(o->trace, t.str());
    }
    ctx.out << "trained on " << train.size() << " pairs; final train loss "
            << io::format_double(res.trace.train_loss.back()) << "\n";
  };
}

// ---------------------------------------------------------------- forecast

Runner setup_forecast(CLI::App& app) {
  struct O {
    std::string params, in, out, beliefs, horizons = "6,12,24", patient;
  };
  auto o = std::make_shared<O>();
  app.add_option("--params", o->params, "SSM parameter JSON")->required();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Forecast CSV (patient_id, time, feature, mean, variance)");
  app.add_option("--beliefs", o->beliefs, "Optional filtered-belief CSV");
  app.add_option("--horizons", o->horizons, "Months ahead of each patient's last visit");
  app.add_option("--patient", o->patient, "Restrict to one patient id");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto model = load_ssm(ctx, o->params);
    const auto cohort = load_cohort(ctx, o->in);
    const auto horizons = parse_doubles(o->horizons, "--horizons");
    const auto obs = observe_raw(cohort, model.features, model.center, model.scale);
    std::ostringstream f, b;
    f << "patient_id,time,feature,mean,variance\n";
    b << "patient_id,time,state,mean,variance\n";
    std::size_t count = 0;
    for (const auto& traj : obs) {
      if (!o->patient.empty() && traj.patient_id != o->patient) continue;
      if (traj.times.empty()) continue;
      ++count;
      const auto filt = ssm::filter_trajectory(traj, model.params);
      for (const auto& bel : filt.beliefs)
        for (Eigen::Index k = 0; k < bel.mean.size(); ++k)
          b << io::csv_escape(traj.patient_id) << ',' << io::format_double(bel.time) << ",z" << k << ','
            << io::format_double(bel.mean(k)) << ',' << io::format_double(bel.cov(k, k)) << '\n';
      const auto fc = ssm::forecast(filt.beliefs.back(), model.params, horizons);
      for (const auto& e : fc.entries)
        for (Eigen::Index r = 0; r < e.mean.size(); ++r) {
          const double s = model.scale(r);
          f << io::csv_escape(traj.patient_id) << ',' << io::format_double(e.time) << ','
            << model.params.feature_names[static_cast<std::size_t>(r)] << ','
            << io::format_double(e.mean(r) * s + model.center(r)) << ',' << io::format_double(e.cov(r, r) * s * s)
            << '\n';
        }
    }
    if (!o->patient.empty() && count == 0) throw DataError("patient " + o->patient + " not found");
    ctx.write(o->out, f.str());
    if (!o->beliefs.empty()) ctx.write(o->beliefs, b.str());
    ctx.out << "forecast " << count << " patients at " << horizons.size() << " horizons\n";
  };
}

// ---------------------------------------------------------------- ablate

Runner setup_ablate(CLI::App& app) {
  struct O {
    std::string in, out_dir = "ablation", specs, subgroup;
    int ssm_d = 4, ssm_iters = 50;
    std::size_t min_n = 10;
    RnnOptions rnn;
    SplitOptions split;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  app.add_option("--out-dir", o->out_dir, "Directory for report.txt, report.json, predictions.csv, traces.csv");
  app.add_option("--specs", o->specs,
                 "Comma-separated specs name=modalities:predictor (default: locf and the four recurrent panels)");
  app.add_option("--ssm-d", o->ssm_d, "Latent dimension of ssm specs");
  app.add_option("--ssm-iters", o->ssm_iters, "EM iterations of ssm specs");
  app.add_option("--subgroup", o->subgroup, "Also disaggregate by sex, apoe4 or age-band");
  app.add_option("--min-n", o->min_n, "Smallest reported subgroup");
  o->rnn.add(app);
  o->split.add(app);
  return [o](Context& ctx) {
    ctx.default_manifest_dir = o->out_dir;
    const auto cohort = load_cohort(ctx, o->in);
    std::vector<ablation::AblationSpec> specs;
    if (o->specs.empty()) specs = ablation::default_specs();
    for (const auto& s : split_list(o->specs)) specs.push_back(ablation::AblationSpec::parse(s));
    auto cfg = o->split.config(ctx, o->rnn.config);
    cfg.ssm_latent_dim = o->ssm_d;
    cfg.ssm_max_iters = o->ssm_iters;
    const auto report = ablation::run_ablation(cohort, specs, cfg);
    for (const auto& w : report.warnings) ctx.err << "warning: " << w << "\n";
    const auto table = ablation::format_table(report);
    const fs::path dir(o->out_dir);
    ctx.write((dir / "report.txt").string(), table);
    ctx.write((dir / "report.json").string(), dump(ablation::report_to_json(report)));
    std::ostringstream p, t;
    ablation::write_predictions_csv(p, report);
    ctx.write((dir / "predictions.csv").string(), p.str());
    t << "spec,epoch,train_loss,val_loss\n";
    for (const auto& r : report.results)
      for (std::size_t e = 0; e < r.trace.train_loss.size(); ++e)
        t << io::csv_escape(r.spec.name) << ',' << e + 1 << ',' << io::format_double(r.trace.train_loss[e]) << ','
          << io::format_double(r.trace.validation_loss[e]) << '\n';
    ctx.write((dir / "traces.csv").string(), t.str());
    if (!o->subgroup.empty()) {
      const auto key = vvuq::parse_group_key(o->subgroup);
      const auto rows = vvuq::subgroup_report(report, cohort, key, o->min_n);
      std::ostringstream s;
      vvuq::write_subgroup_csv(s, rows);
      const std::string stem = "subgroups_" + std::string(vvuq::group_key_name(key));
      ctx.write((dir / (stem + ".csv")).string(), s.str());
      json j = json::array();
      for (const auto& r : rows) {
        json row = {{"spec", r.spec}, {"group", r.group}, {"n", r.n}, {"suppressed", r.suppressed}};
        if (!r.suppressed) {
          row["adas13_rmse"] = r.adas13_rmse;
          row["ventricles_rmse"] = r.ventricles_rmse;
          row["accuracy"] = r.accuracy;
        }
        j.push_back(row);
      }
      ctx.write((dir / (stem + ".json")).string(),
                dump({{"key", vvuq::group_key_name(key)}, {"min_n", o->min_n}, {"rows", j}}));
    }
    ctx.out << table;
  };
}

// ---------------------------------------------------------------- tensor-fit

Runner setup_tensor_fit(CLI::App& app) {
  struct O {
    std::string in, out, trace, lambdas = "0,0.001,0.01,0.1,1,10";
    int rank = 0, max_rank = 3, max_iters = 500;
    double lambda = 0.0, validation_fraction = 0.2, tol = 1e-12;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Dataset CSV")->required();
  add_out(app, o->out, "Model JSON");
  app.add_option("--trace", o->trace, "Optional objective trace CSV");
  app.add_option("--rank", o->rank, "Fixed rank; 0 selects rank and lambda on a validation subsplit");
  app.add_option("--lambda", o->lambda, "Ridge strength for a fixed rank");
  app.add_option("--max-rank", o->max_rank, "Largest rank considered by selection");
  app.add_option("--lambdas", o->lambdas, "Lambda grid for selection");
  app.add_option("--validation-fraction", o->validation_fraction, "Held-out fraction for selection");
  app.add_option("--max-iters", o->max_iters, "ALS sweeps");
  app.add_option("--tol", o->tol, "Relative objective tolerance");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    std::istringstream in(ctx.read(o->in));
    const auto data = tensor::read_dataset_csv(in);
    tensor::CpConfig cp;
    cp.max_iters = o->max_iters;
    cp.tol = o->tol;
    cp.seed = derive_seed(ctx.common.seed, "cp");
    json doc;
    int rank = o->rank;
    double lambda = o->lambda;
    if (o->rank == 0) {
      tensor::RankSelectConfig rs;
      rs.validation_fraction = o->validation_fraction;
      rs.seed = ctx.common.seed;
      rs.fit = cp;
      rs.threads = ctx.threads();
      const auto sel = tensor::rank_select(data, o->max_rank, parse_doubles(o->lambdas, "--lambdas"), rs);
      rank = sel.rank;
      lambda = sel.lambda;
      json cands = json::array();
      for (const auto& c : sel.candidates)
        cands.push_back({{"rank", c.rank}, {"lambda", c.lambda}, {"validation_mse", c.validation_mse}});
      doc = sel.model.to_json();
      doc["selection"] = {{"candidates", cands}, {"validation_fraction", o->validation_fraction}};
    }
    // The reported trace is from a fit on the full dataset at the chosen (rank, lambda).
    const auto full = tensor::cp_fit(data, rank, lambda, cp);
    for (const auto& w : full.warnings) ctx.err << "warning: " << w << "\n";
    if (o->rank != 0) {
      doc = full.model.to_json();
    } else {
      const auto residual = doc["residual_variance"];
      auto sel = doc["selection"];
      doc = full.model.to_json();
      doc["residual_variance"] = residual;
      doc["selection"] = sel;
    }
    doc["sweeps"] = full.sweeps;
    ctx.write(o->out, dump(doc));
    if (!o->trace.empty()) {
      std::ostringstream t;
      t << "step,objective\n";
      for (std::size_t i = 0; i < full.objective.size(); ++i) t << i << ',' << io::format_double(full.objective[i]) << '\n';
      ctx.write(o->trace, t.str());
    }
    ctx.out << "rank " << rank << ", lambda " << io::format_double(lambda) << ", objective "
            << io::format_double(full.objective.back()) << "\n";
  };
}

// ---------------------------------------------------------------- calibrate

Runner setup_calibrate(CLI::App& app) {
  struct O {
    std::string params, in, out_dir = "calibration";
    double level = 0.95;
  };
  auto o = std::make_shared<O>();
  app.add_option("--params", o->params, "SSM parameter JSON")->required();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  app.add_option("--out-dir", o->out_dir, "Directory for calibration.csv and calibration.json");
  app.add_option("--level", o->level, "Nominal interval coverage");
  return [o](Context& ctx) {
    ctx.default_manifest_dir = o->out_dir;
    const auto model = load_ssm(ctx, o->params);
    const auto cohort = load_cohort(ctx, o->in);
    const auto rep = vvuq::calibrate(observe_raw(cohort, model.features, model.center, model.scale), model.params,
                                     o->level);
    std::ostringstream c;
    vvuq::write_calibration_csv(c, rep);
    json rows = json::array();
    for (const auto& r : rep.rows)
      rows.push_back({{"feature", r.feature}, {"n", r.n}, {"level", r.level}, {"picp", r.picp}, {"mean_crps", r.mean_crps}});
    const fs::path dir(o->out_dir);
    ctx.write((dir / "calibration.csv").string(), c.str());
    ctx.write((dir / "calibration.json").string(),
              dump({{"units", "model scale (fit-ssm z-scores unless --raw)"}, {"rows", rows}}));
    const auto& all = rep.rows.back();
    ctx.out << "PICP " << io::format_double(all.picp) << " at nominal " << io::format_double(o->level) << " over "
            << all.n << " targets; mean CRPS " << io::format_double(all.mean_crps) << "\n";
  };
}

// ---------------------------------------------------------------- detect

Runner setup_detect(CLI::App& app) {
  struct O {
    std::string params, in, out;
    double level = 0.999;
  };
  auto o = std::make_shared<O>();
  app.add_option("--params", o->params, "SSM parameter JSON")->required();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Anomaly CSV");
  app.add_option("--level", o->level, "Chi-square quantile level of the threshold");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto model = load_ssm(ctx, o->params);
    const auto cohort = load_cohort(ctx, o->in);
    const auto obs = observe_raw(cohort, model.features, model.center, model.scale);
    std::vector<std::vector<vvuq::AnomalyFlag>> per(obs.size());
    parallel_for(obs.size(), ctx.threads(),
                 [&](std::size_t i) { per[i] = vvuq::detect_anomalies(obs[i], model.params, o->level); });
    std::ostringstream s;
    s << "patient_id,time,features,magnitude,threshold,level,hint\n";
    std::size_t n = 0, visits = 0;
    for (const auto& t : obs) visits += t.times.size();
    for (const auto& flags : per)
      for (const auto& f : flags) {
        ++n;
        std::string feats;
        for (const auto& x : f.features) feats += (feats.empty() ? "" : ";") + x;
        s << io::csv_escape(f.patient_id) << ',' << io::format_double(f.time) << ',' << io::csv_escape(feats) << ','
          << io::format_double(f.magnitude) << ',' << io::format_double(f.threshold) << ','
          << io::format_double(f.level) << ',' << vvuq::action_name(f.hint) << '\n';
      }
    ctx.write(o->out, s.str());
    ctx.out << n << " of " << visits << " visits flagged";
    if (n > 0) ctx.out << "; review them, and consider refitting with fit-ssm if the deviations persist";
    ctx.out << "\n";
  };
}

// ---------------------------------------------------------------- importance

Runner setup_importance(CLI::App& app) {
  struct O {
    std::string in, out, spec = "full", target = "both", fold = "test", params;
    int repeats = 5;
    RnnOptions rnn;
    SplitOptions split;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Importance CSV");
  app.add_option("--spec", o->spec, "Modality set of the recurrent predictor");
  app.add_option("--params", o->params, "Use fitted recurrent parameters instead of training");
  app.add_option("--target", o->target, "ADAS13, Ventricles or both");
  app.add_option("--fold", o->fold, "Pairs to permute: train, validation or test");
  app.add_option("--repeats", o->repeats, "Permutations per feature");
  o->rnn.add(app);
  o->split.add(app);
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto cohort = load_cohort(ctx, o->in);
    const auto spec = ablation::AblationSpec::parse(o->spec);
    if (spec.predictor != ablation::PredictorKind::Recurrent) throw UsageError("importance: spec must be recurrent");
    const auto cfg = o->split.config(ctx, o->rnn.config);
    const auto data = ablation::prepare(cohort, cfg);
    rnn::RNNParameters params;
    if (!o->params.empty()) {
      params = rnn::RNNParameters::from_json(parse_json_text(ctx.read(o->params), o->params));
    } else {
      auto rc = cfg.rnn;
      rc.input_dimension = spec.width() + (cfg.include_gap ? 1 : 0);
      rc.seed = derive_seed(cfg.seed, "rnn");
      std::vector<rnn::Example> train, val;
      for (auto i : data.split.train) {
        const auto& p = data.pairs[i];
        train.push_back({ablation::assemble_history(p, spec, cfg.include_gap),
                         {p.target.adas13, p.target.ventricles, static_cast<int>(p.target.diagnosis)}});
      }
      for (auto i : data.split.validation) {
        const auto& p = data.pairs[i];
        val.push_back({ablation::assemble_history(p, spec, cfg.include_gap),
                       {p.target.adas13, p.target.ventricles, static_cast<int>(p.target.diagnosis)}});
      }
      params = rnn::train(train, val, rc).params;
    }
    const auto predictor = ablation::recurrent_predictor(params, spec, cfg.include_gap);
    const std::vector<std::size_t>* fold = nullptr;
    if (o->fold == "train") fold = &data.split.train;
    else if (o->fold == "validation") fold = &data.split.validation;
    else if (o->fold == "test") fold = &data.split.test;
    else throw UsageError("--fold must be train, validation or test");
    std::vector<SequencePair> pairs;
    for (auto i : *fold) pairs.push_back(data.pairs[i]);
    std::vector<ablation::TargetKind> targets;
    if (o->target == "ADAS13" || o->target == "both") targets.push_back(ablation::TargetKind::ADAS13);
    if (o->target == "Ventricles" || o->target == "both") targets.push_back(ablation::TargetKind::Ventricles);
    if (targets.empty()) throw UsageError("--target must be ADAS13, Ventricles or both");
    const auto features = spec.features();
    std::ostringstream s;
    s << "target,feature,importance,rank\n";
    for (auto t : targets) {
      std::vector<double> score(features.size());
      parallel_for(features.size(), ctx.threads(), [&](std::size_t k) {
        score[k] = ablation::permutation_importance(predictor, pairs, features[k], t, o->repeats,
                                                    derive_seed(cfg.seed, features[k]));
      });
      std::vector<std::size_t> order(features.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
      for (std::size_t r = 0; r < order.size(); ++r)
        s << ablation::target_name(t) << ',' << feature_name(features[order[r]]) << ','
          << io::format_double(score[order[r]]) << ',' << r + 1 << '\n';
    }
    ctx.write(o->out, s.str());
    ctx.out << "permutation importance over " << pairs.size() << " " << o->fold << " pairs\n";
  };
}

// ---------------------------------------------------------------- trend

Runner setup_trend(CLI::App& app) {
  struct O {
    std::string in, out, feature = "ADAS13";
    double bin = 12.0;
  };
  auto o = std::make_shared<O>();
  app.add_option("--in", o->in, "Cohort CSV")->required();
  add_out(app, o->out, "Trend CSV (bin, group, mean, standard_error, n)");
  app.add_option("--feature", o->feature, "Feature name");
  app.add_option("--bin", o->bin, "Bin width in months");
  return [o](Context& ctx) {
    ctx.manifest_near(o->out);
    const auto cohort = load_cohort(ctx, o->in);
    const auto rows = ablation::trend_summary(cohort, o->feature, o->bin);
    std::ostringstream s;
    ablation::write_trend_csv(s, rows);
    ctx.write(o->out, s.str());
    ctx.out << rows.size() << " bins\n";
  };
}

Runner setup(const std::string& command, CLI::App& app) {
  if (command == "simulate") return setup_simulate(app);
  if (command == "ingest") return setup_ingest(app);
  if (command == "fit-ssm") return setup_fit_ssm(app);
  if (command == "fit-rnn") return setup_fit_rnn(app);
  if (command == "forecast") return setup_forecast(app);
  if (command == "ablate") return setup_ablate(app);
  if (command == "tensor-fit") return setup_tensor_fit(app);
  if (command == "calibrate") return setup_calibrate(app);
  if (command == "detect") return setup_detect(app);
  if (command == "importance") return setup_importance(app);
  if (command == "trend") return setup_trend(app);
  throw UsageError("unknown subcommand '" + command + "'");
}

std::string usage() {
  std::string s = "usage: trajectwin <subcommand> [options]\nsubcommands:";
  for (auto c : kCommands) s += " " + std::string(c);
  return s + "\nrun 'trajectwin <subcommand> --help' for options\n";
}

std::string normalize_key(std::string key) {
  key = std::string(io::trim(key));
  while (!key.empty() && key.front() == '-') key.erase(key.begin());
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string json_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number()) return io::format_double(v.get<double>());
  if (v.is_array()) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + json_scalar(x);
    return s;
  }
  throw SchemaError("config values must be scalars or arrays");
}

// key -> value pairs from a JSON object, a run manifest or key=value lines.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path, const std::string& command,
                                                             std::string& text_out) {
  text_out = io::read_file(path);
  std::vector<std::pair<std::string, std::string>> kv;
  const auto first = text_out.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text_out[first] == '{') {
    auto j = parse_json_text(text_out, path);
    if (j.value("format", "") == "trajectwin.manifest") {
      if (j.value("command", "") != command)
        throw UsageError("manifest " + path + " records subcommand '" + j.value("command", "") + "', not '" +
                         command + "'");
      j = j.at("config");
    }
    if (!j.is_object()) throw SchemaError(path + ": config must be a JSON object");
    for (const auto& [k, v] : j.items()) kv.emplace_back(normalize_key(k), json_scalar(v));
    return kv;
  }
  std::istringstream in(text_out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = io::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw SchemaError(path + " line " + std::to_string(n) + ": expected key=value");
    kv.emplace_back(normalize_key(std::string(t.substr(0, eq))), std::string(io::trim(t.substr(eq + 1))));
  }
  return kv;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int execute(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    err << usage();
    return 1;
  }
  const std::string command = args[0];
  if (command == "--help" || command == "-h" || command == "help") {
    out << usage();
    return 0;
  }
  if (command == "--version") {
    out << "trajectwin " << kVersion << "\n";
    return 0;
  }
  if (std::find(std::begin(kCommands), std::end(kCommands), command) == std::end(kCommands)) {
    err << "error: unknown subcommand '" << command << "'\n" << usage();
    return 1;
  }

  CLI::App app{"trajectwin " + command, "trajectwin " + command};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  Context ctx{out, err, command, {}, {}, {}, "."};
  app.add_option("--seed", ctx.common.seed, "Seed for every random stream");
  app.add_option("--threads", ctx.common.threads, "Worker threads (default TRAJECTWIN_THREADS or 1)");
  app.add_option("--config", ctx.common.config, "Config file: key=value lines, JSON object or run manifest");
  app.add_option("--manifest", ctx.common.manifest, "Manifest path (default next to the outputs)");
  const auto runner = setup(command, app);

  // Config values are spliced in ahead of the command line so that flags win.
  std::vector<std::string> tokens;
  std::string config_path, config_text;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (!config_path.empty()) {
    for (const auto& [k, v] : read_config(config_path, command, config_text)) {
      if (kExecutionOptions.contains(k)) continue;
      if (app.get_option_no_throw("--" + k) == nullptr) {
        err << "warning: config key '" << k << "' is not an option of " << command << "; ignored\n";
        continue;
      }
      tokens.push_back("--" + k + "=" + v);
    }
  }
  tokens.insert(tokens.end(), args.begin() + 1, args.end());
  std::reverse(tokens.begin(), tokens.end());
  try {
    app.parse(tokens);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }
  if (!config_path.empty()) ctx.inputs.push_back(config_path);

  runner(ctx);

  json config = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const auto& name = opt->get_single_name();
    if (name.empty() || kExecutionOptions.contains(name)) continue;
    auto value = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    if (!value.empty()) config[name] = std::move(value);  // unset options are omitted
  }
  json inputs = json::object(), outputs = json::object();
  for (const auto& p : ctx.inputs) inputs[p] = io::sha256_hex(io::read_file(p));
  for (const auto& [p, content] : ctx.outputs) outputs[p] = io::sha256_hex(content);
  const json manifest = {{"format", "trajectwin.manifest"},
                         {"version", 1},
                         {"command", command},
                         {"config", config},
                         {"seed", ctx.common.seed},
                         {"inputs", inputs},
                         {"outputs", outputs},
                         {"versions", {{"trajectwin", kVersion}, {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                                               std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                                               std::to_string(EIGEN_MINOR_VERSION)}}},
                         {"timestamp", timestamp()}};
  for (const auto& [p, content] : ctx.outputs) io::atomic_write(p, content);
  const std::string manifest_path =
      ctx.common.manifest.empty() ? (fs::path(ctx.default_manifest_dir) / "run_manifest.json").string()
                                  : ctx.common.manifest;
  io::atomic_write(manifest_path, dump(manifest));
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return execute(args, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "error: malformed document: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 3;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace trajectwin::cli
