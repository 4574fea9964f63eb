#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "wifiloc/config.hpp"
#include "wifiloc/gaussian_location.hpp"
#include "wifiloc/prior_map.hpp"
#include "wifiloc/random.hpp"
#include "wifiloc/simulator.hpp"

namespace wifiloc::fusion {

using State = Eigen::Vector4d;  // x [m], y [m], theta [rad], v [scale]
using Covariance = Eigen::Matrix4d;
using NoiseVector = Eigen::Vector3d;  // position-scale, rotation, velocity-scale
using MeasurementMatrix = Eigen::Matrix<double, 2, 4>;

/// v is kept above this so the motion model never collapses or mirrors.
inline constexpr double kMinScale = 0.05;

double wrap_angle(double a);  // onto (-pi, pi]

struct Particle {
  State s = State(0.0, 0.0, 0.0, 1.0);
  double w = 1.0;
  Covariance P = Covariance::Identity();
};

struct ProcessNoise {
  double n_p = 0.1;   // variance of the multiplicative odometry-scale noise
  double n_r = 0.05;  // rad^2 per odometry step
  double n_v = 1e-4;  // variance of the velocity-scale random walk; 0 freezes v

  Eigen::Matrix3d Q() const { return Eigen::Vector3d(n_p, n_r, n_v).asDiagonal(); }
};

/// How a fix's sigma (meters) becomes the measurement covariance.
enum class NoiseForm {
  Squared,  // gamma * sigma^2
  Scaled,   // gamma * sigma / length_scale: sigma in normalized map units, read as m^2
};

struct MeasurementModel {
  double gamma = 150.0;
  NoiseForm form = NoiseForm::Squared;
  double length_scale = 1.0;  // meters per normalized map unit

  static MeasurementMatrix H();
  /// Per-axis measurement variance, m^2.
  double variance(double sigma) const;
  /// variance(sigma) * I.
  Eigen::Matrix2d R(double sigma) const;
};

Covariance default_initial_covariance();  // diag(4, 4, 0.5, 0.01)

// ---------------------------------------------------------------------------
// Motion model
//   s' = s + M(theta, v) (O (1 + e_p)) + [0, 0, e_r, e_v]
//   M  = [[v cos, -v sin], [v sin, v cos], [0, 0], [0, 0]]
// ---------------------------------------------------------------------------

State motion(const State& s, const sim::OdometryStep& o, const NoiseVector& noise);

struct MotionJacobians {
  Covariance F;                      // d motion / d state, at zero noise
  Eigen::Matrix<double, 4, 3> N;     // d motion / d noise, at zero noise
};

/// Closed forms, with c = cos(theta), s = sin(theta), O = (ox, oy):
///   F = I + [[0, 0, -v(s ox + c oy), c ox - s oy],
///            [0, 0,  v(c ox - s oy), s ox + c oy],
///            [0, 0, 0, 0], [0, 0, 0, 0]]
///   N = [[v(c ox - s oy), 0, 0],
///        [v(s ox + c oy), 0, 0],
///        [0, 1, 0], [0, 0, 1]]
MotionJacobians motion_jacobians(const State& s, const sim::OdometryStep& o);

template <class Gen>
NoiseVector sample_process_noise(const ProcessNoise& noise, Gen& rng) {
  return {gaussian(rng, std::sqrt(noise.n_p)), gaussian(rng, std::sqrt(noise.n_r)),
          gaussian(rng, std::sqrt(noise.n_v))};
}

/// Propagates state with the given noise draw and covariance with F P F^T + N Q N^T.
Particle predict(const Particle& p, const sim::OdometryStep& o, const ProcessNoise& noise,
                 const NoiseVector& draw = NoiseVector::Zero());

// ---------------------------------------------------------------------------
// Particle weights
// ---------------------------------------------------------------------------

/// Sum of weights; resets to uniform and returns false when the sum is not positive.
bool normalize_weights(std::vector<Particle>& particles);

/// w_i *= prior(x_i, y_i), renormalized. Covariances are untouched.
/// Returns false when the weights had to be reset to uniform.
bool weight_update(std::vector<Particle>& particles, const PriorMap& prior);

double effective_sample_size(std::span<const Particle> particles);

/// Offspring indices of the single-offset systematic scheme with offset u in [0, 1/n).
std::vector<std::size_t> systematic_indices(std::span<const Particle> particles, double u);

/// Offspring copy state and covariance; weights reset to 1/n.
std::vector<Particle> systematic_resample(std::span<const Particle> particles, double u);

template <class Gen>
std::vector<Particle> systematic_resample(std::span<const Particle> particles, Gen& rng) {
  const double n = static_cast<double>(particles.size());
  return systematic_resample(particles, uniform(rng, 0.0, 1.0 / n));
}

// ---------------------------------------------------------------------------
// Kalman correction
// ---------------------------------------------------------------------------

/// K = P H^T (H P H^T + R)^-1, s += K (z - H s), P = (I - K H) P, symmetrized.
Particle kalman_correct(const Particle& p, const GaussianLocation& z, const MeasurementModel& mm);

struct FilterEstimate {
  double t = 0.0;
  Location location;
  double spread = 0.0;  // sqrt(sum w |x_i - mean|^2), meters
  double n_eff = 1.0;
};

FilterEstimate estimate(std::span<const Particle> particles);

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

enum class Method { Ekpf, Ekf, Pf };
const char* to_string(Method m);
Method parse_method(const std::string& text);

/// When particles are reweighted by the prior map.
enum class PriorSchedule {
  Odometry,     // after every prediction
  Measurement,  // once per WiFi fix, before the correction
};

struct FilterConfig {
  Method method = Method::Ekpf;
  int n_particles = 400;
  ProcessNoise noise;
  double gamma = 150.0;
  NoiseForm noise_form = NoiseForm::Squared;
  std::optional<double> length_scale;  // defaults to 1 when unset
  double beta = 1e-4;
  double bandwidth = 1.0;
  double resample_ratio = 0.5;  // resample when n_eff < ratio * n
  std::uint64_t seed = 0;
  bool sample_noise = true;  // draw process noise into particle states
  bool use_prior = true;     // prior-map reweighting
  PriorSchedule prior_schedule = PriorSchedule::Odometry;
  /// Replaces every measurement sigma (uncertainty ablation).
  std::optional<double> constant_sigma;
  double ekf_initial_heading = 0.0;
  /// Odometry is summed over windows of this many seconds before prediction; 0 keeps every step.
  double odometry_interval = 0.0;

  /// Keys: n_particles, n_p, n_r, n_v, beta, gamma, bandwidth, resample_ratio,
  /// seed, method, sample_noise, use_prior, prior_schedule (odometry|measurement),
  /// constant_sigma, ekf_initial_heading, noise_form (squared|scaled), length_scale,
  /// odometry_interval.
  static FilterConfig from_config(const KeyValueConfig& cfg);
  MeasurementModel measurement_model() const;
};

struct Measurement {
  double t = 0.0;
  GaussianLocation z;
};

using FilterEvent = std::variant<sim::OdometryStep, Measurement>;

double event_time(const FilterEvent& ev);

/// EKPF: particles carrying an EKF covariance, weighted by the prior map and
/// individually Kalman-corrected by each WiFi fix. With method == Pf the
/// Kalman stage is replaced by Gaussian likelihood reweighting.
class ParticleFilter {
 public:
  ParticleFilter(FilterConfig config, const PriorMap* prior);

  /// Positions from the hint Gaussian when given, otherwise from the prior map.
  void init(const std::optional<GaussianLocation>& hint, double t = 0.0);
  void init(std::vector<Particle> particles, double t = 0.0);
  bool initialized() const { return !particles_.empty(); }

  /// Throws when the event is older than the last processed one.
  FilterEstimate step(const FilterEvent& event);

  FilterEstimate current() const;
  const std::vector<Particle>& particles() const { return particles_; }
  const FilterConfig& config() const { return config_; }
  std::size_t resample_count() const { return resamples_; }
  std::size_t weight_resets() const { return weight_resets_; }

 private:
  void on_odometry(const sim::OdometryStep& o);
  void on_measurement(const Measurement& m);
  void maybe_resample();
  void apply_prior();

  FilterConfig config_;
  const PriorMap* prior_;
  MeasurementModel mm_;
  std::vector<Particle> particles_;
  double last_t_ = 0.0;
  std::uint64_t step_ = 0;
  std::size_t resamples_ = 0;
  std::size_t weight_resets_ = 0;
};

/// Single-hypothesis EKF on the same state and equations, without a prior map.
class ExtendedKalmanFilter {
 public:
  explicit ExtendedKalmanFilter(FilterConfig config);

  void init(const GaussianLocation& hint, double t = 0.0);
  void init(const Particle& state, double t = 0.0);
  bool initialized() const { return initialized_; }

  FilterEstimate step(const FilterEvent& event);
  FilterEstimate current() const;
  const Particle& state() const { return state_; }

 private:
  FilterConfig config_;
  MeasurementModel mm_;
  Particle state_;
  bool initialized_ = false;
  double last_t_ = 0.0;
};

/// Sums consecutive odometry steps until `interval` seconds have accumulated
/// or a measurement arrives. Measurements pass through unchanged; interval 0
/// returns the input.
std::vector<FilterEvent> aggregate_odometry(std::span<const FilterEvent> events, double interval);

/// Runs a whole event sequence through a freshly configured engine of
/// `config.method`. The first measurement initializes the filter as a hint and
/// is not applied a second time; earlier odometry is dropped. Odometry is
/// aggregated per `config.odometry_interval` first. One estimate is returned
/// per processed event, starting with the initializing one.
std::vector<FilterEstimate> run_filter(std::span<const FilterEvent> events,
                                       const FilterConfig& config, const PriorMap* prior);

std::vector<FilterEstimate> ekf_baseline(std::span<const FilterEvent> events, FilterConfig config);
std::vector<FilterEstimate> pf_baseline(std::span<const FilterEvent> events, FilterConfig config,
                                        const PriorMap& prior);
std::vector<FilterEstimate> ekpf_run(std::span<const FilterEvent> events, FilterConfig config,
                                     const PriorMap& prior);

}  // namespace wifiloc::fusion
