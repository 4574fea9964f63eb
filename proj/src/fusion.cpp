#include "wifiloc/fusion.hpp"

#include <algorithm>
#include <iostream>
#include <limits>
#include <numbers>

#include <Eigen/LU>

namespace wifiloc::fusion {

namespace {

enum StreamTag : std::uint64_t { kTagInit = 1, kTagPredict = 2, kTagResample = 3 };

void normalize_state(State& s) {
  s(2) = wrap_angle(s(2));
  s(3) = std::max(s(3), kMinScale);
}

void symmetrize(Covariance& P) { P = 0.5 * (P + P.transpose()).eval(); }

}  // namespace

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  double r = std::remainder(a, 2.0 * pi);  // [-pi, pi]
  if (r <= -pi) r += 2.0 * pi;
  return r;
}

MeasurementMatrix MeasurementModel::H() {
  MeasurementMatrix h = MeasurementMatrix::Zero();
  h(0, 0) = 1.0;
  h(1, 1) = 1.0;
  return h;
}

double MeasurementModel::variance(double sigma) const {
  return form == NoiseForm::Squared ? gamma * sigma * sigma : gamma * sigma / length_scale;
}

Eigen::Matrix2d MeasurementModel::R(double sigma) const { return variance(sigma) * Eigen::Matrix2d::Identity(); }

Covariance default_initial_covariance() {
  return Eigen::Vector4d(4.0, 4.0, 0.5, 0.01).asDiagonal();
}

State motion(const State& s, const sim::OdometryStep& o, const NoiseVector& noise) {
  const double c = std::cos(s(2)), sn = std::sin(s(2)), v = s(3);
  const double ox = o.dx * (1.0 + noise(0)), oy = o.dy * (1.0 + noise(0));
  State out = s;
  out(0) += v * (c * ox - sn * oy);
  out(1) += v * (sn * ox + c * oy);
  out(2) += noise(1);
  out(3) += noise(2);
  return out;
}

MotionJacobians motion_jacobians(const State& s, const sim::OdometryStep& o) {
  const double c = std::cos(s(2)), sn = std::sin(s(2)), v = s(3);
  const double rx = c * o.dx - sn * o.dy;  // R(theta) O
  const double ry = sn * o.dx + c * o.dy;
  MotionJacobians j;
  j.F = Covariance::Identity();
  j.F(0, 2) = -v * ry;
  j.F(1, 2) = v * rx;
  j.F(0, 3) = rx;
  j.F(1, 3) = ry;
  j.N.setZero();
  j.N(0, 0) = v * rx;
  j.N(1, 0) = v * ry;
  j.N(2, 1) = 1.0;
  j.N(3, 2) = 1.0;
  return j;
}

Particle predict(const Particle& p, const sim::OdometryStep& o, const ProcessNoise& noise,
                 const NoiseVector& draw) {
  const MotionJacobians j = motion_jacobians(p.s, o);
  Particle out = p;
  out.s = motion(p.s, o, draw);
  normalize_state(out.s);
  out.P = j.F * p.P * j.F.transpose() + j.N * noise.Q() * j.N.transpose();
  symmetrize(out.P);
  return out;
}

bool normalize_weights(std::vector<Particle>& particles) {
  double sum = 0.0;
  for (const auto& p : particles) sum += p.w;
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    const double w = 1.0 / static_cast<double>(particles.size());
    for (auto& p : particles) p.w = w;
    return false;
  }
  for (auto& p : particles) p.w /= sum;
  return true;
}

bool weight_update(std::vector<Particle>& particles, const PriorMap& prior) {
  for (auto& p : particles) p.w *= prior.query({p.s(0), p.s(1)});
  if (normalize_weights(particles)) return true;
  std::clog << "warning: all particle weights vanished; reset to uniform\n";
  return false;
}

double effective_sample_size(std::span<const Particle> particles) {
  double sq = 0.0;
  for (const auto& p : particles) sq += p.w * p.w;
  const double n = static_cast<double>(particles.size());
  return std::clamp(1.0 / sq, 1.0, n);
}

std::vector<std::size_t> systematic_indices(std::span<const Particle> particles, double u) {
  const std::size_t n = particles.size();
  const double step = 1.0 / static_cast<double>(n);
  std::vector<std::size_t> idx(n);
  double cum = particles[0].w;
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = u + static_cast<double>(i) * step;
    while (target >= cum && j + 1 < n) cum += particles[++j].w;
    idx[i] = j;
  }
  return idx;
}

std::vector<Particle> systematic_resample(std::span<const Particle> particles, double u) {
  const auto idx = systematic_indices(particles, u);
  const double w = 1.0 / static_cast<double>(particles.size());
  std::vector<Particle> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    out.push_back(particles[i]);
    out.back().w = w;
  }
  return out;
}

Particle kalman_correct(const Particle& p, const GaussianLocation& z, const MeasurementModel& mm) {
  const MeasurementMatrix H = MeasurementModel::H();
  const Eigen::Matrix2d S = H * p.P * H.transpose() + mm.R(z.sigma);
  Eigen::FullPivLU<Eigen::Matrix2d> lu(S);
  if (!lu.isInvertible()) throw NumericError("singular innovation covariance");
  const Eigen::Matrix<double, 4, 2> K = p.P * H.transpose() * lu.inverse();
  const Eigen::Vector2d innovation(z.mu.x - p.s(0), z.mu.y - p.s(1));
  Particle out = p;
  out.s = p.s + K * innovation;
  normalize_state(out.s);
  out.P = (Covariance::Identity() - K * H) * p.P;
  symmetrize(out.P);
  return out;
}

FilterEstimate estimate(std::span<const Particle> particles) {
  FilterEstimate e;
  double mx = 0.0, my = 0.0;
  for (const auto& p : particles) {
    mx += p.w * p.s(0);
    my += p.w * p.s(1);
  }
  double var = 0.0;
  for (const auto& p : particles) {
    const double dx = p.s(0) - mx, dy = p.s(1) - my;
    var += p.w * (dx * dx + dy * dy);
  }
  e.location = {mx, my};
  e.spread = std::sqrt(var);
  e.n_eff = effective_sample_size(particles);
  return e;
}

const char* to_string(Method m) {
  switch (m) {
    case Method::Ekpf: return "ekpf";
    case Method::Ekf: return "ekf";
    case Method::Pf: return "pf";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "ekpf") return Method::Ekpf;
  if (text == "ekf") return Method::Ekf;
  if (text == "pf") return Method::Pf;
  throw ValidationError("unknown filter method '" + text + "'");
}

FilterConfig FilterConfig::from_config(const KeyValueConfig& cfg) {
  FilterConfig c;
  c.method = parse_method(cfg.get_string("method", to_string(c.method)));
  c.n_particles = static_cast<int>(cfg.get_int("n_particles", c.n_particles));
  c.noise.n_p = cfg.get_double("n_p", c.noise.n_p);
  c.noise.n_r = cfg.get_double("n_r", c.noise.n_r);
  c.noise.n_v = cfg.get_double("n_v", c.noise.n_v);
  c.gamma = cfg.get_double("gamma", c.gamma);
  c.beta = cfg.get_double("beta", c.beta);
  c.bandwidth = cfg.get_double("bandwidth", c.bandwidth);
  c.odometry_interval = cfg.get_double("odometry_interval", c.odometry_interval);
  c.resample_ratio = cfg.get_double("resample_ratio", c.resample_ratio);
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(c.seed)));
  c.sample_noise = cfg.get_bool("sample_noise", c.sample_noise);
  c.use_prior = cfg.get_bool("use_prior", c.use_prior);
  const std::string schedule = cfg.get_string("prior_schedule", "odometry");
  if (schedule == "odometry") {
    c.prior_schedule = PriorSchedule::Odometry;
  } else if (schedule == "measurement") {
    c.prior_schedule = PriorSchedule::Measurement;
  } else {
    throw ValidationError("prior_schedule must be odometry or measurement");
  }
  if (cfg.has("constant_sigma")) c.constant_sigma = cfg.get_double("constant_sigma", 1.0);
  c.ekf_initial_heading = cfg.get_double("ekf_initial_heading", c.ekf_initial_heading);
  const std::string form = cfg.get_string("noise_form", "squared");
  if (form == "squared") {
    c.noise_form = NoiseForm::Squared;
  } else if (form == "scaled") {
    c.noise_form = NoiseForm::Scaled;
  } else {
    throw ValidationError("noise_form must be squared or scaled");
  }
  if (cfg.has("length_scale")) c.length_scale = cfg.get_double("length_scale", 1.0);
  if (c.length_scale && !(*c.length_scale > 0)) throw ValidationError("length_scale must be positive");

  if (c.n_particles < 1) throw ValidationError("n_particles must be at least 1");
  if (c.noise.n_p < 0 || c.noise.n_r < 0 || c.noise.n_v < 0)
    throw ValidationError("process noise variances must be non-negative");
  if (!(c.gamma > 0)) throw ValidationError("gamma must be positive");
  if (!(c.beta > 0)) throw ValidationError("beta must be positive");
  if (!(c.bandwidth > 0)) throw ValidationError("bandwidth must be positive");
  if (!(c.odometry_interval >= 0)) throw ValidationError("odometry_interval must be non-negative");
  if (c.resample_ratio < 0 || c.resample_ratio > 1)
    throw ValidationError("resample_ratio must be in [0, 1]");
  if (c.constant_sigma && !(*c.constant_sigma > 0))
    throw ValidationError("constant_sigma must be positive");
  return c;
}

MeasurementModel FilterConfig::measurement_model() const {
  return {gamma, noise_form, length_scale.value_or(1.0)};
}

double event_time(const FilterEvent& ev) {
  return std::visit([](const auto& e) { return e.t; }, ev);
}

// ---------------------------------------------------------------------------

ParticleFilter::ParticleFilter(FilterConfig config, const PriorMap* prior)
    : config_(std::move(config)), prior_(prior) {
  if (config_.n_particles < 1) throw ValidationError("n_particles must be at least 1");
  if (config_.method == Method::Ekf) throw ValidationError("use ExtendedKalmanFilter for ekf");
  mm_ = config_.measurement_model();
}

void ParticleFilter::init(const std::optional<GaussianLocation>& hint, double t) {
  const std::size_t n = static_cast<std::size_t>(config_.n_particles);
  std::vector<Particle> ps(n);
  Rng rng = make_rng(config_.seed, {kTagInit});
  if (!hint && prior_ == nullptr) throw ValidationError("init needs a hint or a prior map");
  for (auto& p : ps) {
    Location loc;
    if (hint) {
      loc = {hint->mu.x + gaussian(rng, hint->sigma), hint->mu.y + gaussian(rng, hint->sigma)};
    } else {
      loc = prior_->sample(rng);
    }
    double theta = uniform(rng, -std::numbers::pi, std::numbers::pi);
    if (theta == -std::numbers::pi) theta = std::numbers::pi;
    p.s = State(loc.x, loc.y, theta, 1.0);
    p.w = 1.0 / static_cast<double>(n);
    p.P = default_initial_covariance();
  }
  init(std::move(ps), t);
}

void ParticleFilter::init(std::vector<Particle> particles, double t) {
  if (particles.empty()) throw ValidationError("particle set is empty");
  particles_ = std::move(particles);
  normalize_weights(particles_);
  last_t_ = t;
  step_ = 0;
}

FilterEstimate ParticleFilter::step(const FilterEvent& event) {
  if (!initialized()) throw ValidationError("filter is not initialized");
  const double t = event_time(event);
  if (t < last_t_ - 1e-12) throw ValidationError("event out of time order");
  ++step_;
  if (const auto* o = std::get_if<sim::OdometryStep>(&event)) {
    on_odometry(*o);
  } else {
    on_measurement(std::get<Measurement>(event));
  }
  last_t_ = std::max(last_t_, t);
  FilterEstimate e = current();
  e.t = t;
  return e;
}

void ParticleFilter::on_odometry(const sim::OdometryStep& o) {
  for (std::size_t i = 0; i < particles_.size(); ++i) {
    NoiseVector draw = NoiseVector::Zero();
    if (config_.sample_noise) {
      SplitMix64 gen(derive_seed(config_.seed, {kTagPredict, step_, i}));
      draw = sample_process_noise(config_.noise, gen);
    }
    particles_[i] = predict(particles_[i], o, config_.noise, draw);
  }
  if (config_.prior_schedule == PriorSchedule::Odometry) apply_prior();
}

void ParticleFilter::apply_prior() {
  if (!config_.use_prior || prior_ == nullptr) return;
  if (!weight_update(particles_, *prior_)) ++weight_resets_;
  maybe_resample();
}

void ParticleFilter::maybe_resample() {
  const double n = static_cast<double>(particles_.size());
  if (effective_sample_size(particles_) >= config_.resample_ratio * n) return;
  SplitMix64 gen(derive_seed(config_.seed, {kTagResample, step_}));
  particles_ = systematic_resample(std::span<const Particle>(particles_), gen);
  ++resamples_;
}

void ParticleFilter::on_measurement(const Measurement& m) {
  GaussianLocation z = m.z;
  if (config_.constant_sigma) z.sigma = *config_.constant_sigma;
  if (config_.prior_schedule == PriorSchedule::Measurement) apply_prior();
  if (config_.method == Method::Ekpf) {
    for (auto& p : particles_) p = kalman_correct(p, z, mm_);
    return;
  }
  // Plain PF: Gaussian likelihood reweighting in the log domain.
  const double var = mm_.variance(z.sigma);
  std::vector<double> logw(particles_.size());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < particles_.size(); ++i) {
    const double dx = particles_[i].s(0) - z.mu.x, dy = particles_[i].s(1) - z.mu.y;
    logw[i] = std::log(particles_[i].w) - 0.5 * (dx * dx + dy * dy) / var;
    best = std::max(best, logw[i]);
  }
  for (std::size_t i = 0; i < particles_.size(); ++i) {
    particles_[i].w = std::isfinite(best) ? std::exp(logw[i] - best) : 0.0;
  }
  if (!normalize_weights(particles_)) {
    ++weight_resets_;
    std::clog << "warning: measurement reweighting collapsed; reset to uniform\n";
  }
  maybe_resample();
}

FilterEstimate ParticleFilter::current() const {
  FilterEstimate e = estimate(particles_);
  e.t = last_t_;
  return e;
}

// ---------------------------------------------------------------------------

ExtendedKalmanFilter::ExtendedKalmanFilter(FilterConfig config) : config_(std::move(config)) {
  mm_ = config_.measurement_model();
}

void ExtendedKalmanFilter::init(const GaussianLocation& hint, double t) {
  Particle p;
  p.s = State(hint.mu.x, hint.mu.y, wrap_angle(config_.ekf_initial_heading), 1.0);
  p.P = default_initial_covariance();
  init(p, t);
}

void ExtendedKalmanFilter::init(const Particle& state, double t) {
  state_ = state;
  state_.w = 1.0;
  initialized_ = true;
  last_t_ = t;
}

FilterEstimate ExtendedKalmanFilter::step(const FilterEvent& event) {
  if (!initialized_) throw ValidationError("filter is not initialized");
  const double t = event_time(event);
  if (t < last_t_ - 1e-12) throw ValidationError("event out of time order");
  if (const auto* o = std::get_if<sim::OdometryStep>(&event)) {
    state_ = predict(state_, *o, config_.noise);
  } else {
    GaussianLocation z = std::get<Measurement>(event).z;
    if (config_.constant_sigma) z.sigma = *config_.constant_sigma;
    state_ = kalman_correct(state_, z, mm_);
  }
  last_t_ = std::max(last_t_, t);
  return current();
}

FilterEstimate ExtendedKalmanFilter::current() const {
  FilterEstimate e;
  e.t = last_t_;
  e.location = {state_.s(0), state_.s(1)};
  e.spread = std::sqrt(std::max(0.0, state_.P(0, 0) + state_.P(1, 1)));
  e.n_eff = 1.0;
  return e;
}

// ---------------------------------------------------------------------------

std::vector<FilterEvent> aggregate_odometry(std::span<const FilterEvent> events, double interval) {
  if (interval < 0) throw ValidationError("odometry interval must be non-negative");
  if (interval == 0) return {events.begin(), events.end()};
  std::vector<FilterEvent> out;
  std::optional<sim::OdometryStep> acc;
  double start = events.empty() ? 0.0 : event_time(events.front());
  for (const auto& ev : events) {
    if (const auto* o = std::get_if<sim::OdometryStep>(&ev)) {
      if (!acc) {
        acc = sim::OdometryStep{0.0, 0.0, o->t};
        if (!out.empty()) start = event_time(out.back());
      }
      acc->dx += o->dx;
      acc->dy += o->dy;
      acc->t = o->t;
      if (acc->t - start >= interval - 1e-9) {
        out.emplace_back(*acc);
        acc.reset();
      }
    } else {
      if (acc) out.emplace_back(*acc);
      acc.reset();
      out.push_back(ev);
    }
  }
  if (acc) out.emplace_back(*acc);
  return out;
}

std::vector<FilterEstimate> run_filter(std::span<const FilterEvent> raw_events,
                                       const FilterConfig& config, const PriorMap* prior) {
  const std::vector<FilterEvent> events = aggregate_odometry(raw_events, config.odometry_interval);
  std::vector<FilterEstimate> out;
  auto first = std::find_if(events.begin(), events.end(), [](const FilterEvent& e) {
    return std::holds_alternative<Measurement>(e);
  });
  if (first == events.end()) return out;
  const Measurement& m0 = std::get<Measurement>(*first);
  GaussianLocation hint = m0.z;
  if (config.constant_sigma) hint.sigma = *config.constant_sigma;

  if (config.method == Method::Ekf) {
    ExtendedKalmanFilter ekf(config);
    ekf.init(hint, m0.t);
    out.push_back(ekf.current());
    for (auto it = std::next(first); it != events.end(); ++it) out.push_back(ekf.step(*it));
    return out;
  }
  ParticleFilter pf(config, prior);
  pf.init(std::optional<GaussianLocation>(hint), m0.t);
  out.push_back(pf.current());
  for (auto it = std::next(first); it != events.end(); ++it) out.push_back(pf.step(*it));
  return out;
}

std::vector<FilterEstimate> ekf_baseline(std::span<const FilterEvent> events, FilterConfig config) {
  config.method = Method::Ekf;
  return run_filter(events, config, nullptr);
}

std::vector<FilterEstimate> pf_baseline(std::span<const FilterEvent> events, FilterConfig config,
                                        const PriorMap& prior) {
  config.method = Method::Pf;
  return run_filter(events, config, &prior);
}

std::vector<FilterEstimate> ekpf_run(std::span<const FilterEvent> events, FilterConfig config,
                                     const PriorMap& prior) {
  config.method = Method::Ekpf;
  return run_filter(events, config, &prior);
}

}  // namespace wifiloc::fusion
