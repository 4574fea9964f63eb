#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wifiloc/config.hpp"
#include "wifiloc/fusion.hpp"
#include "wifiloc/localizer.hpp"
#include "wifiloc/prior_map.hpp"
#include "wifiloc/simulator.hpp"
#include "wifiloc/trainer.hpp"
#include "wifiloc/wknn.hpp"

namespace wifiloc::eval {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct TimedLocation {
  double t = 0.0;
  Location location;
};

struct ErrorReport {
  std::vector<double> errors;  // meters, in time order, after warmup
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  double p95 = 0.0;
  std::vector<std::pair<double, double>> cdf;  // (error, cumulative fraction)
  double warmup_cutoff = 60.0;
};

/// Nearest-rank percentile of sorted values, q in (0, 1].
double nearest_rank(std::span<const double> sorted, double q);

/// Summary of raw errors. Throws ValidationError when `errors` is empty.
ErrorReport summarize_errors(std::vector<double> errors, double warmup_cutoff);

/// Pairs each estimate at t >= t0 + warmup (t0 = first truth time) with the
/// nearest truth sample within `tolerance` seconds.
ErrorReport compute_metrics(std::span<const TimedLocation> estimates,
                            std::span<const TimedLocation> truth, double warmup = 60.0,
                            double tolerance = 0.2);

/// `error,fraction`.
void write_cdf_csv(const ErrorReport& report, std::ostream& out);

/// Reads `t,x,y[,...]` or the fused-trajectory columns `t,est_x,est_y,...`.
std::vector<TimedLocation> read_locations_csv(std::istream& in);

// ---------------------------------------------------------------------------
// Trajectory rows
// ---------------------------------------------------------------------------

struct EstimateRow {
  double t = 0.0;
  Location estimate;
  Location truth;
  double error = 0.0;
  double n_eff = 1.0;
  double spread = 0.0;
};

inline constexpr const char* kTrajectoryHeader = "t,est_x,est_y,true_x,true_y,err,n_eff,spread";

void write_trajectory_rows(std::span<const EstimateRow> rows, std::ostream& out);

/// Truth position of the pose nearest to t.
Location truth_at(std::span<const sim::Pose> poses, double t);

/// Keeps the last estimate per timestamp and attaches truth and error.
std::vector<EstimateRow> to_rows(std::span<const fusion::FilterEstimate> estimates,
                                 std::span<const sim::Pose> poses);

ErrorReport report_from_rows(std::span<const EstimateRow> rows, double warmup);

// ---------------------------------------------------------------------------
// Scenario and methods
// ---------------------------------------------------------------------------

/// World, crowdsourced map and per-trial trajectory settings. Config sections:
/// world.*, map.*, trajectory.*, odometry.*, stream.*.
struct ScenarioConfig {
  sim::WorldSpec world;
  sim::CrowdsourceOptions map;
  std::uint64_t map_seed = 1;
  sim::TrajectoryOptions trajectory;
  sim::OdometryCorruption odometry;
  sim::StreamOptions stream;

  static ScenarioConfig from_config(const KeyValueConfig& cfg);
};

struct Trial {
  sim::Trajectory trajectory;
  std::vector<sim::OdometryStep> odometry;  // corrupted
  std::vector<sim::StreamEvent> events;
};

Trial make_trial(const sim::World& world, const ScenarioConfig& cfg, std::uint64_t seed);

/// A WiFi fix for one fingerprint, or none when it cannot be localized.
using MeasurementSource = std::function<std::optional<GaussianLocation>(const Fingerprint&)>;

MeasurementSource localizer_source(const nn::WifiLocalizer& localizer);
MeasurementSource wknn_source(const WknnLocalizer& wknn);

/// Odometry and localized fingerprints; kidnap markers are dropped.
std::vector<fusion::FilterEvent> filter_events(std::span<const sim::StreamEvent> events,
                                               const MeasurementSource& source);

/// Method names: ekpf, ekf, pf, ekpf-const-sigma, wknn-only, wifi-only.
bool is_known_method(const std::string& name);

struct MethodContext {
  const PriorMap* prior = nullptr;
  MeasurementSource fusion_source;  // feeds ekpf, ekf, pf
  MeasurementSource wifi_source;    // wifi-only
  MeasurementSource wknn;           // wknn-only
  fusion::FilterConfig filter;
  double constant_sigma = 1.0;      // meters, for ekpf-const-sigma
};

std::vector<EstimateRow> run_method(const std::string& method, const Trial& trial,
                                    const MethodContext& ctx, std::uint64_t seed);

struct Recovery {
  double kidnap_time = 0.0;
  std::optional<double> recovered_at;  // start of the first sustained sub-threshold window
  int fingerprints = 0;                // fingerprints in (kidnap_time, recovered_at]
};

/// Recovered at the first estimate time t > kidnap_time after which every
/// estimate in [t, t + hold] has error below `threshold`.
Recovery kidnap_recovery(std::span<const EstimateRow> rows, const Trial& trial, double threshold = 3.0,
                         double hold = 5.0);

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  KeyValueConfig source;  // the parsed file, for hashing and the manifest
  ScenarioConfig scenario;
  nn::LocalizerConfig model;
  nn::TrainOptions train;
  double train_ratio = 0.9;
  fusion::FilterConfig filter;
  PriorOptions prior;
  WknnOptions wknn;
  std::vector<std::string> methods{"ekpf", "ekf", "pf", "wknn-only", "wifi-only"};
  int n_trials = 5;
  std::uint64_t seed = 1;
  double warmup = 60.0;
  std::string fusion_measurement = "localizer";  // or "wknn"
  double recovery_threshold = 3.0;
  double recovery_hold = 5.0;

  /// Sections: world, map, trajectory, odometry, stream, model, train, filter,
  /// prior, wknn, experiment. Unknown keys are rejected.
  static ExperimentConfig from_config(const KeyValueConfig& cfg);
};

struct MethodSummary {
  std::string method;
  ErrorReport report;  // pooled over trials
  std::vector<double> trial_means;
  std::vector<Recovery> recoveries;  // per trial, when kidnapped
};

struct ExperimentResult {
  std::vector<MethodSummary> methods;
  double localizer_val_error = 0.0;  // meters
  double constant_sigma = 0.0;       // meters
  std::vector<std::string> failures;

  const MethodSummary* find(const std::string& method) const;
};

/// Seed of trial `i` of an experiment seeded with `seed`.
inline std::uint64_t trial_seed(std::uint64_t seed, int i) {
  return derive_seed(seed, {0x7419, static_cast<std::uint64_t>(i)});
}

struct LocalizerTraining {
  nn::TrainResult result;
  nn::MacInputs inputs;
  CoordinateTransform transform;
  double mean_val_sigma = 1.0;  // meters, mean predicted sigma on the validation split
};

/// Splits `map` with cfg.train_ratio and trains cfg.model with cfg.train.
LocalizerTraining train_localizer(const ExperimentConfig& cfg, const RadioMap& map);

/// Mean predicted sigma over the validation split train_localizer would use.
double validation_sigma(const ExperimentConfig& cfg, const RadioMap& map, const nn::WifiLocalizer& localizer);

/// Runs every stage, writing artifacts and manifest.json into `out_dir`. With
/// a checkpoint the localizer is loaded instead of trained. A failing stage is
/// recorded in the manifest and rethrown.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

/// Relative improvement of `mean` over `reference`, in percent.
inline double improvement_pct(double mean, double reference) { return 100.0 * (1.0 - mean / reference); }

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct Manifest {
  std::string command;
  std::string config_text;  // canonical
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;  // file names relative to the manifest
  std::vector<std::string> failures;
};

/// Writes manifest.json with config hash, versions and an FNV-1a hash per output file.
void write_manifest(const Manifest& m, const std::filesystem::path& dir);

}  // namespace wifiloc::eval
