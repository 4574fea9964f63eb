#include "wifiloc/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <Eigen/Core>
#include <json.hpp>

#include "wifiloc/radio_map.hpp"

namespace wifiloc::eval {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto a = item.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = item.find_last_not_of(" \t\r");
    out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

double parse_number(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, "not a number: '" + s + "'");
  }
}

template <class T>
void write_file(const std::filesystem::path& path, T&& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  writer(out);
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("percentile of an empty set");
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

ErrorReport summarize_errors(std::vector<double> errors, double warmup_cutoff) {
  if (errors.empty()) throw ValidationError("no estimates left after warmup");
  ErrorReport r;
  r.warmup_cutoff = warmup_cutoff;
  r.errors = std::move(errors);
  std::vector<double> s = r.errors;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  r.mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
  r.median = n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  r.max = s.back();
  r.p95 = nearest_rank(s, 0.95);
  for (std::size_t i = 0; i < n; ++i) {
    if (i + 1 < n && s[i + 1] == s[i]) continue;
    r.cdf.emplace_back(s[i], static_cast<double>(i + 1) / static_cast<double>(n));
  }
  return r;
}

ErrorReport compute_metrics(std::span<const TimedLocation> estimates,
                            std::span<const TimedLocation> truth, double warmup, double tolerance) {
  if (truth.empty()) throw ValidationError("empty truth trajectory");
  if (!std::is_sorted(truth.begin(), truth.end(),
                      [](const TimedLocation& a, const TimedLocation& b) { return a.t < b.t; }))
    throw ValidationError("truth trajectory is not time ordered");
  const double cutoff = truth.front().t + warmup;
  std::vector<double> errors;
  for (const auto& e : estimates) {
    if (e.t < cutoff - 1e-9) continue;
    auto it = std::lower_bound(truth.begin(), truth.end(), e.t,
                               [](const TimedLocation& a, double t) { return a.t < t; });
    const TimedLocation* best = nullptr;
    if (it != truth.end()) best = &*it;
    if (it != truth.begin()) {
      const TimedLocation* prev = &*std::prev(it);
      if (!best || e.t - prev->t <= best->t - e.t) best = prev;
    }
    if (best && std::abs(best->t - e.t) <= tolerance + 1e-9) errors.push_back(distance(e.location, best->location));
  }
  if (errors.empty()) throw ValidationError("estimates and truth do not overlap after warmup");
  return summarize_errors(std::move(errors), warmup);
}

void write_cdf_csv(const ErrorReport& report, std::ostream& out) {
  out << "error,fraction\n";
  for (const auto& [e, f] : report.cdf) out << format_double(e) << ',' << format_double(f) << '\n';
}

std::vector<TimedLocation> read_locations_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  const auto header = split(line, ',');
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  auto ct = column("t");
  auto cx = column("x"), cy = column("y");
  if (!cx || !cy) cx = column("est_x"), cy = column("est_y");
  if (!ct || !cx || !cy) throw ParseError(1, "header needs t and x,y or est_x,est_y columns");
  std::vector<TimedLocation> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split(line, ',');
    const std::size_t need = std::max({*ct, *cx, *cy}) + 1;
    if (f.size() < need) throw ParseError(lineno, "too few columns");
    out.push_back({parse_number(f[*ct], lineno), {parse_number(f[*cx], lineno), parse_number(f[*cy], lineno)}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory rows
// ---------------------------------------------------------------------------

void write_trajectory_rows(std::span<const EstimateRow> rows, std::ostream& out) {
  out << kTrajectoryHeader << '\n';
  for (const auto& r : rows) {
    out << format_double(r.t) << ',' << format_double(r.estimate.x) << ',' << format_double(r.estimate.y) << ','
        << format_double(r.truth.x) << ',' << format_double(r.truth.y) << ',' << format_double(r.error) << ','
        << format_double(r.n_eff) << ',' << format_double(r.spread) << '\n';
  }
}

Location truth_at(std::span<const sim::Pose> poses, double t) {
  if (poses.empty()) throw ValidationError("empty trajectory");
  auto it = std::lower_bound(poses.begin(), poses.end(), t, [](const sim::Pose& p, double v) { return p.t < v; });
  if (it == poses.end()) return poses.back().location;
  if (it != poses.begin() && t - std::prev(it)->t <= it->t - t) return std::prev(it)->location;
  return it->location;
}

std::vector<EstimateRow> to_rows(std::span<const fusion::FilterEstimate> estimates,
                                 std::span<const sim::Pose> poses) {
  std::vector<EstimateRow> rows;
  for (const auto& e : estimates) {
    EstimateRow r{e.t, e.location, truth_at(poses, e.t), 0.0, e.n_eff, e.spread};
    r.error = distance(r.estimate, r.truth);
    if (!rows.empty() && std::abs(rows.back().t - e.t) <= 1e-9) {
      rows.back() = r;
    } else {
      rows.push_back(r);
    }
  }
  return rows;
}

ErrorReport report_from_rows(std::span<const EstimateRow> rows, double warmup) {
  std::vector<double> errors;
  for (const auto& r : rows) {
    if (r.t >= warmup - 1e-9) errors.push_back(r.error);
  }
  return summarize_errors(std::move(errors), warmup);
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

ScenarioConfig ScenarioConfig::from_config(const KeyValueConfig& cfg) {
  ScenarioConfig s;
  const auto w = cfg.section("world");
  w.check_keys({"area_w", "area_h", "corridor_pitch", "n_aps", "tx_power", "ploss_exp", "shadow_sigma", "seed"},
               "world");
  s.world = sim::WorldSpec::from_config(w);

  const auto m = cfg.section("map");
  m.check_keys({"n_samples", "loc_noise_sigma", "dropout", "sample_spacing", "walk_length", "seed"}, "map");
  const long long n_samples = m.get_int("n_samples", static_cast<long long>(s.map.n_samples));
  if (n_samples < 2) throw ValidationError("map.n_samples must be at least 2");
  s.map.n_samples = static_cast<std::size_t>(n_samples);
  s.map.loc_noise_sigma = m.get_double("loc_noise_sigma", s.map.loc_noise_sigma);
  s.map.dropout = m.get_double("dropout", s.map.dropout);
  s.map.sample_spacing = m.get_double("sample_spacing", s.map.sample_spacing);
  s.map.walk_length = m.get_double("walk_length", s.map.walk_length);
  s.map_seed = static_cast<std::uint64_t>(m.get_int("seed", static_cast<long long>(s.map_seed)));

  const auto t = cfg.section("trajectory");
  t.check_keys({"duration", "speed", "rate", "frame_rotation", "kidnap_time", "kidnap_min_distance"}, "trajectory");
  s.trajectory.duration = t.get_double("duration", s.trajectory.duration);
  s.trajectory.speed = t.get_double("speed", s.trajectory.speed);
  s.trajectory.rate = t.get_double("rate", s.trajectory.rate);
  if (t.has("frame_rotation")) s.trajectory.frame_rotation = t.get_double("frame_rotation", 0.0);
  if (t.has("kidnap_time")) s.trajectory.kidnap_time = t.get_double("kidnap_time", 0.0);
  s.trajectory.kidnap_min_distance = t.get_double("kidnap_min_distance", s.trajectory.kidnap_min_distance);

  const auto o = cfg.section("odometry");
  o.check_keys({"scale_error", "heading_drift", "noise_sigma"}, "odometry");
  s.odometry.scale_error = o.get_double("scale_error", s.odometry.scale_error);
  s.odometry.heading_drift = o.get_double("heading_drift", s.odometry.heading_drift);
  s.odometry.noise_sigma = o.get_double("noise_sigma", s.odometry.noise_sigma);

  const auto st = cfg.section("stream");
  st.check_keys({"fingerprint_period", "dropout"}, "stream");
  s.stream.fingerprint_period = st.get_double("fingerprint_period", s.stream.fingerprint_period);
  s.stream.dropout = st.get_double("dropout", s.stream.dropout);
  return s;
}

Trial make_trial(const sim::World& world, const ScenarioConfig& cfg, std::uint64_t seed) {
  Trial t;
  t.trajectory = sim::generate_trajectory(world, cfg.trajectory, derive_seed(seed, {1}));
  t.odometry = sim::corrupt_odometry(t.trajectory, cfg.odometry, derive_seed(seed, {2}));
  t.events = sim::online_stream(world, t.trajectory, cfg.stream, derive_seed(seed, {3}), t.odometry);
  return t;
}

MeasurementSource localizer_source(const nn::WifiLocalizer& localizer) {
  return [&localizer](const Fingerprint& fp) -> std::optional<GaussianLocation> {
    try {
      return localizer.localize(fp);
    } catch (const EmptyFingerprintError&) {
      return std::nullopt;
    }
  };
}

MeasurementSource wknn_source(const WknnLocalizer& wknn) {
  return [&wknn](const Fingerprint& fp) -> std::optional<GaussianLocation> {
    if (fp.entries.empty()) return std::nullopt;
    return wknn.localize(fp);
  };
}

std::vector<fusion::FilterEvent> filter_events(std::span<const sim::StreamEvent> events,
                                               const MeasurementSource& source) {
  std::vector<fusion::FilterEvent> out;
  out.reserve(events.size());
  for (const auto& e : events) {
    if (e.kind == sim::EventKind::Odometry) {
      out.emplace_back(e.odometry);
    } else if (e.kind == sim::EventKind::Wifi) {
      if (auto z = source(e.fingerprint)) out.emplace_back(fusion::Measurement{e.t, *z});
    }
  }
  return out;
}

bool is_known_method(const std::string& name) {
  static const std::set<std::string> known{"ekpf", "ekf", "pf", "ekpf-const-sigma", "wknn-only", "wifi-only"};
  return known.count(name) != 0;
}

std::vector<EstimateRow> run_method(const std::string& method, const Trial& trial,
                                    const MethodContext& ctx, std::uint64_t seed) {
  const auto& poses = trial.trajectory.poses;
  if (method == "wknn-only" || method == "wifi-only") {
    const MeasurementSource& src = method == "wknn-only" ? ctx.wknn : ctx.wifi_source;
    std::vector<fusion::FilterEstimate> est;
    for (const auto& e : trial.events) {
      if (e.kind != sim::EventKind::Wifi) continue;
      if (auto z = src(e.fingerprint)) est.push_back({e.t, z->mu, z->sigma, 1.0});
    }
    return to_rows(est, poses);
  }
  fusion::FilterConfig fc = ctx.filter;
  fc.seed = derive_seed(ctx.filter.seed, {seed});
  if (method == "ekpf") {
    fc.method = fusion::Method::Ekpf;
  } else if (method == "ekf") {
    fc.method = fusion::Method::Ekf;
  } else if (method == "pf") {
    fc.method = fusion::Method::Pf;
  } else if (method == "ekpf-const-sigma") {
    fc.method = fusion::Method::Ekpf;
    fc.constant_sigma = ctx.constant_sigma;
  } else {
    throw ValidationError("unknown method '" + method + "'");
  }
  const auto events = filter_events(trial.events, ctx.fusion_source);
  return to_rows(fusion::run_filter(events, fc, ctx.prior), poses);
}

Recovery kidnap_recovery(std::span<const EstimateRow> rows, const Trial& trial, double threshold, double hold) {
  if (!trial.trajectory.kidnap_pose) throw ValidationError("trial has no kidnap");
  Recovery r;
  r.kidnap_time = trial.trajectory.poses[*trial.trajectory.kidnap_pose].t;
  const double t_end = rows.empty() ? 0.0 : rows.back().t;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].t <= r.kidnap_time + 1e-9) continue;
    if (rows[i].t + hold > t_end + 1e-9) break;
    bool ok = true;
    for (std::size_t j = i; j < rows.size() && rows[j].t <= rows[i].t + hold + 1e-9; ++j) {
      if (rows[j].error >= threshold) {
        ok = false;
        break;
      }
    }
    if (ok) {
      r.recovered_at = rows[i].t;
      break;
    }
  }
  if (r.recovered_at) {
    for (const auto& e : trial.events) {
      if (e.kind == sim::EventKind::Wifi && e.t > r.kidnap_time + 1e-9 && e.t <= *r.recovered_at + 1e-9) ++r.fingerprints;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& cfg) {
  static const std::set<std::string> sections{"world", "map", "trajectory", "odometry", "stream", "model",
                                              "train", "filter", "prior", "wknn", "experiment"};
  for (const auto& [k, v] : cfg.values()) {
    const auto dot = k.find('.');
    if (dot == std::string::npos || !sections.count(k.substr(0, dot)))
      throw ValidationError("unknown config key '" + k + "'");
  }
  ExperimentConfig e;
  e.source = cfg;
  e.scenario = ScenarioConfig::from_config(cfg);

  const auto model = cfg.section("model");
  model.check_keys({"d_model", "n_layers", "n_heads", "d_ff", "dropout", "head_hidden", "rss_hidden", "sigma_floor",
                    "residual", "layer_norm", "map_cell_size", "map_standardize", "seed"},
                   "model");
  e.model = nn::LocalizerConfig::from_config(model);

  const auto train = cfg.section("train");
  train.check_keys({"lr", "beta1", "beta2", "weight_decay", "epochs", "batch_size", "seed", "patience", "dropout",
                    "train_ratio", "schedule", "lr_final"},
                   "train");
  e.train = nn::TrainOptions::from_config(train);
  e.train_ratio = train.get_double("train_ratio", e.train_ratio);

  const auto filter = cfg.section("filter");
  filter.check_keys({"n_particles", "n_p", "n_r", "n_v", "beta", "gamma", "bandwidth", "resample_ratio", "seed",
                     "method", "sample_noise", "use_prior", "prior_schedule", "constant_sigma", "ekf_initial_heading", "noise_form", "length_scale", "odometry_interval"},
                    "filter");
  e.filter = fusion::FilterConfig::from_config(filter);

  const auto prior = cfg.section("prior");
  prior.check_keys({"cell_size", "normalization"}, "prior");
  e.prior.bandwidth = e.filter.bandwidth;
  e.prior.beta = e.filter.beta;
  e.prior.cell_size = prior.get_double("cell_size", e.prior.cell_size);
  const std::string norm = prior.get_string("normalization", "max");
  if (norm == "max") {
    e.prior.normalization = PriorNormalization::Max;
  } else if (norm == "mass") {
    e.prior.normalization = PriorNormalization::Mass;
  } else {
    throw ValidationError("prior.normalization must be max or mass");
  }

  const auto wknn = cfg.section("wknn");
  wknn.check_keys({"k", "missing_rss", "sigma_floor"}, "wknn");
  e.wknn.k = static_cast<int>(wknn.get_int("k", e.wknn.k));
  e.wknn.missing_rss = wknn.get_double("missing_rss", e.wknn.missing_rss);
  e.wknn.sigma_floor = wknn.get_double("sigma_floor", e.wknn.sigma_floor);

  const auto ex = cfg.section("experiment");
  ex.check_keys({"methods", "n_trials", "seed", "warmup", "fusion_measurement", "recovery_threshold",
                 "recovery_hold"},
                "experiment");
  if (auto m = ex.find("methods")) e.methods = split(*m, ',');
  for (const auto& m : e.methods)
    if (!is_known_method(m)) throw ValidationError("unknown method '" + m + "'");
  if (e.methods.empty()) throw ValidationError("experiment.methods is empty");
  e.n_trials = static_cast<int>(ex.get_int("n_trials", e.n_trials));
  if (e.n_trials < 1) throw ValidationError("experiment.n_trials must be at least 1");
  e.seed = static_cast<std::uint64_t>(ex.get_int("seed", static_cast<long long>(e.seed)));
  e.warmup = ex.get_double("warmup", e.warmup);
  e.fusion_measurement = ex.get_string("fusion_measurement", e.fusion_measurement);
  if (e.fusion_measurement != "localizer" && e.fusion_measurement != "wknn")
    throw ValidationError("experiment.fusion_measurement must be localizer or wknn");
  e.recovery_threshold = ex.get_double("recovery_threshold", e.recovery_threshold);
  e.recovery_hold = ex.get_double("recovery_hold", e.recovery_hold);
  return e;
}

const MethodSummary* ExperimentResult::find(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return &m;
  return nullptr;
}

namespace {

bool needs_localizer(const ExperimentConfig& cfg) {
  for (const auto& m : cfg.methods) {
    if (m == "wifi-only" || m == "ekpf-const-sigma") return true;
    if (m != "wknn-only" && cfg.fusion_measurement == "localizer") return true;
  }
  return false;
}

}  // namespace

namespace {

double mean_sigma(const nn::WifiLocalizer& localizer, const RadioMap& map) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : map.samples()) {
    try {
      sum += localizer.localize(s.fingerprint).sigma;
      ++n;
    } catch (const EmptyFingerprintError&) {
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 1.0;
}

}  // namespace

LocalizerTraining train_localizer(const ExperimentConfig& cfg, const RadioMap& map) {
  const auto [train_map, val_map] = split_train_val(map, cfg.train_ratio, derive_seed(cfg.seed, {0x5b17}));
  LocalizerTraining lt{{}, nn::MacInputs(build_rss_distribution_maps(map, cfg.model.map_cell_size), cfg.model.cnn),
                       CoordinateTransform::from_bounds(map.bounds()), 1.0};
  lt.result = nn::train(nn::LocalizerModel(cfg.model), lt.inputs, train_map, val_map, lt.transform, cfg.train);
  lt.mean_val_sigma = mean_sigma(nn::WifiLocalizer(lt.result.model, lt.inputs, lt.transform), val_map);
  return lt;
}

double validation_sigma(const ExperimentConfig& cfg, const RadioMap& map, const nn::WifiLocalizer& localizer) {
  const auto split = split_train_val(map, cfg.train_ratio, derive_seed(cfg.seed, {0x5b17}));
  return mean_sigma(localizer, split.second);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const std::optional<std::filesystem::path>& checkpoint) {
  std::filesystem::create_directories(out_dir);
  Manifest manifest;
  manifest.command = "experiment";
  manifest.config_text = cfg.source.canonical();
  manifest.seed = cfg.seed;
  ExperimentResult result;
  std::string stage = "world";

  auto emit = [&](const std::string& name, auto&& writer) {
    write_file(out_dir / name, writer);
    manifest.outputs.push_back(name);
  };

  try {
    const sim::World world = sim::generate_world(cfg.scenario.world);
    sim::save_world(world, out_dir / "world.json");
    manifest.outputs.push_back("world.json");

    stage = "radio_map";
    const auto crowd = sim::crowdsource_radio_map(world, cfg.scenario.map, cfg.scenario.map_seed);
    const RadioMap& map = crowd.map;
    save_radio_map(map, out_dir / "radio_map.jsonl");
    manifest.outputs.push_back("radio_map.jsonl");

    stage = "localizer";
    std::optional<nn::WifiLocalizer> localizer;
    if (needs_localizer(cfg) && checkpoint) {
      const nn::Checkpoint ckpt = nn::load_checkpoint(*checkpoint);
      localizer.emplace(nn::make_localizer(ckpt, map));
      result.constant_sigma = validation_sigma(cfg, map, *localizer);
    } else if (needs_localizer(cfg)) {
      LocalizerTraining lt = train_localizer(cfg, map);
      if (lt.result.diverged) result.failures.push_back("training diverged; kept the last good parameters");
      result.localizer_val_error = lt.result.best_val_mean_err;
      result.constant_sigma = lt.mean_val_sigma;
      emit("train_history.csv", [&](std::ostream& o) { nn::write_history_csv(lt.result.history, o); });
      emit("localizer.json",
           [&](std::ostream& o) { nn::write_checkpoint({lt.result.model, map.mac_table(), lt.transform}, o); });
      localizer.emplace(lt.result.model, std::move(lt.inputs), lt.transform);
    }

    stage = "prior";
    const PriorMap prior = build_prior(map, cfg.prior);
    const WknnLocalizer wknn(map, cfg.wknn);

    MethodContext ctx;
    ctx.prior = &prior;
    ctx.wknn = wknn_source(wknn);
    if (localizer) ctx.wifi_source = localizer_source(*localizer);
    ctx.fusion_source = cfg.fusion_measurement == "wknn" || !localizer ? ctx.wknn : ctx.wifi_source;
    ctx.filter = cfg.filter;
    if (!ctx.filter.length_scale) ctx.filter.length_scale = CoordinateTransform::from_bounds(map.bounds()).mean_extent();
    ctx.constant_sigma = result.constant_sigma > 0.0 ? result.constant_sigma : 1.0;

    for (const auto& m : cfg.methods) result.methods.push_back({m, {}, {}, {}});
    std::vector<std::vector<double>> pooled(cfg.methods.size());

    for (int i = 0; i < cfg.n_trials; ++i) {
      stage = "trial " + std::to_string(i);
      const std::uint64_t seed_i = trial_seed(cfg.seed, i);
      const Trial trial = make_trial(world, cfg.scenario, seed_i);
      const std::string prefix = "trial" + std::to_string(i) + "_";
      emit(prefix + "truth.csv", [&](std::ostream& o) { sim::write_trajectory_csv(trial.trajectory, o); });
      emit(prefix + "stream.csv", [&](std::ostream& o) { sim::write_stream_csv(trial.events, o); });
      for (std::size_t k = 0; k < cfg.methods.size(); ++k) {
        const std::string& method = cfg.methods[k];
        stage = "trial " + std::to_string(i) + " method " + method;
        const auto rows = run_method(method, trial, ctx, derive_seed(seed_i, {0xf1}));
        emit(prefix + method + ".csv", [&](std::ostream& o) { write_trajectory_rows(rows, o); });
        const ErrorReport rep = report_from_rows(rows, cfg.warmup);
        pooled[k].insert(pooled[k].end(), rep.errors.begin(), rep.errors.end());
        result.methods[k].trial_means.push_back(rep.mean);
        if (trial.trajectory.kidnap_pose)
          result.methods[k].recoveries.push_back(
              kidnap_recovery(rows, trial, cfg.recovery_threshold, cfg.recovery_hold));
      }
    }

    stage = "reports";
    for (std::size_t k = 0; k < cfg.methods.size(); ++k)
      result.methods[k].report = summarize_errors(pooled[k], cfg.warmup);

    std::optional<double> reference;
    for (const auto& m : result.methods) {
      if (m.method == "ekf" || m.method == "pf")
        reference = reference ? std::min(*reference, m.report.mean) : m.report.mean;
    }
    emit("reports.csv", [&](std::ostream& o) {
      o << "method,n,mean,median,max,p95\n";
      for (const auto& m : result.methods) {
        const auto& r = m.report;
        o << m.method << ',' << r.errors.size() << ',' << format_double(r.mean) << ',' << format_double(r.median)
          << ',' << format_double(r.max) << ',' << format_double(r.p95) << '\n';
      }
    });
    emit("comparison.csv", [&](std::ostream& o) {
      o << "method,mean,improvement_pct\n";
      for (const auto& m : result.methods) {
        o << m.method << ',' << format_double(m.report.mean) << ',';
        if (reference) o << format_double(improvement_pct(m.report.mean, *reference));
        o << '\n';
      }
    });
    emit("trials.csv", [&](std::ostream& o) {
      o << "trial,method,mean\n";
      for (int i = 0; i < cfg.n_trials; ++i)
        for (const auto& m : result.methods)
          o << i << ',' << m.method << ',' << format_double(m.trial_means[static_cast<std::size_t>(i)]) << '\n';
    });
    for (const auto& m : result.methods)
      emit("cdf_" + m.method + ".csv", [&](std::ostream& o) { write_cdf_csv(m.report, o); });
    if (!result.methods.empty() && !result.methods.front().recoveries.empty()) {
      emit("recovery.csv", [&](std::ostream& o) {
        o << "trial,method,kidnap_time,recovered_at,fingerprints\n";
        for (int i = 0; i < cfg.n_trials; ++i)
          for (const auto& m : result.methods) {
            const Recovery& r = m.recoveries[static_cast<std::size_t>(i)];
            o << i << ',' << m.method << ',' << format_double(r.kidnap_time) << ','
              << (r.recovered_at ? format_double(*r.recovered_at) : "") << ',' << r.fingerprints << '\n';
          }
      });
    }
  } catch (const std::exception& ex) {
    manifest.failures.push_back(stage + ": " + ex.what());
    manifest.failures.insert(manifest.failures.end(), result.failures.begin(), result.failures.end());
    write_manifest(manifest, out_dir);
    throw;
  }
  manifest.failures = result.failures;
  write_manifest(manifest, out_dir);
  return result;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

void write_manifest(const Manifest& m, const std::filesystem::path& dir) {
  nlohmann::ordered_json j;
  j["format"] = "wifiloc-manifest/1";
  j["command"] = m.command;
  j["config_hash"] = hex64(fnv1a(m.config_text));
  j["config"] = m.config_text;
  j["seed"] = m.seed;
  j["versions"] = {{"wifiloc", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__},
                   {"checkpoint_format", nn::kCheckpointFormat}};
  auto outputs = nlohmann::ordered_json::array();
  for (const auto& name : m.outputs) {
    std::ifstream in(dir / name, std::ios::binary);
    const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    outputs.push_back({{"file", name}, {"fnv1a", hex64(fnv1a(content))}});
  }
  j["outputs"] = outputs;
  j["status"] = m.failures.empty() ? "ok" : "failed";
  j["failures"] = m.failures;
  write_file(dir / "manifest.json", [&](std::ostream& o) { o << j.dump(2) << '\n'; });
}

}  // namespace wifiloc::eval
