#include <doctest.h>

#include <cmath>
#include <numbers>

#include "wifiloc/fusion.hpp"
#include "wifiloc/prior_map.hpp"

using namespace wifiloc;
using namespace wifiloc::fusion;

namespace {

PriorMap line_prior() {
  std::vector<Sample> s;
  for (int i = 0; i <= 20; ++i) {
    Fingerprint fp;
    fp.entries.push_back({MacId::parse("000000000001"), -50.0 - i});
    s.push_back({fp, {static_cast<double>(i), 5.0}});
  }
  return build_prior(RadioMap::from_samples(s), {1.0, 1e-4, 0.5, PriorNormalization::Max});
}

std::vector<Particle> weighted(const std::vector<double>& w) {
  std::vector<Particle> ps(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    ps[i].s = State(static_cast<double>(i), 0, 0, 1);
    ps[i].w = w[i];
    ps[i].P = Covariance::Identity() * (1.0 + 0.1 * static_cast<double>(i));
  }
  return ps;
}

}  // namespace

TEST_CASE("motion rotates and scales the odometry step") {
  const State s(1, 1, std::numbers::pi / 2, 2);
  const State out = motion(s, {1, 0, 0.1}, NoiseVector::Zero());
  CHECK(out(0) == doctest::Approx(1.0));
  CHECK(out(1) == doctest::Approx(3.0));
  CHECK(out(2) == s(2));
  CHECK(out(3) == 2);

  const State noisy = motion(s, {1, 0, 0.1}, NoiseVector(0.5, 0.1, 0.2));
  CHECK(noisy(1) == doctest::Approx(4.0));
  CHECK(noisy(2) == doctest::Approx(s(2) + 0.1));
  CHECK(noisy(3) == doctest::Approx(2.2));
}

TEST_CASE("motion jacobians match finite differences") {
  Rng rng(21);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const State s(uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -3, 3), uniform(rng, 0.5, 1.5));
    const sim::OdometryStep o{uniform(rng, -1, 1), uniform(rng, -1, 1), 0.1};
    const auto J = motion_jacobians(s, o);
    const double h = 1e-6;
    for (int j = 0; j < 4; ++j) {
      State a = s, b = s;
      a(j) += h;
      b(j) -= h;
      const State col = (motion(a, o, NoiseVector::Zero()) - motion(b, o, NoiseVector::Zero())) / (2 * h);
      worst = std::max(worst, (col - J.F.col(j)).cwiseAbs().maxCoeff());
    }
    for (int j = 0; j < 3; ++j) {
      NoiseVector a = NoiseVector::Zero(), b = NoiseVector::Zero();
      a(j) = h;
      b(j) = -h;
      const State col = (motion(s, o, a) - motion(s, o, b)) / (2 * h);
      worst = std::max(worst, (col - J.N.col(j)).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("measurement variance forms") {
  MeasurementModel sq{2.0, NoiseForm::Squared, 10.0};
  CHECK(sq.variance(3.0) == doctest::Approx(18.0));
  MeasurementModel sc{2.0, NoiseForm::Scaled, 10.0};
  CHECK(sc.variance(3.0) == doctest::Approx(0.6));
  CHECK(sc.R(3.0)(0, 1) == 0.0);
}

TEST_CASE("covariance-only prediction and correction reduce to a scalar kalman filter") {
  FilterConfig cfg;
  cfg.noise = {0.3, 0.0, 0.0};
  cfg.gamma = 1.0;
  ExtendedKalmanFilter ekf(cfg);
  Particle p;
  p.s = State(0, 0, 0, 1);
  p.P = Covariance::Zero();
  p.P(0, 0) = 2.0;
  p.P(1, 1) = 1.0;
  ekf.init(p);

  double x = 0.0, var = 2.0;
  Rng rng(5);
  double worst = 0.0;
  for (int k = 1; k <= 50; ++k) {
    const double ox = uniform(rng, 0.5, 1.5);
    ekf.step(sim::OdometryStep{ox, 0.0, k - 0.5});
    x += ox;
    var += ox * ox * 0.3;
    const double z = x + gaussian(rng, 1.0), sigma = uniform(rng, 0.5, 2.0);
    ekf.step(Measurement{static_cast<double>(k), {{z, 0.0}, sigma}});
    const double gain = var / (var + sigma * sigma);
    x += gain * (z - x);
    var *= 1.0 - gain;
    worst = std::max({worst, std::abs(ekf.state().s(0) - x), std::abs(ekf.state().P(0, 0) - var)});
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("a single noiseless particle tracks the ekf exactly") {
  const PriorMap prior = line_prior();
  FilterConfig cfg;
  cfg.n_particles = 1;
  cfg.sample_noise = false;
  Particle p;
  p.s = State(2, 5, 0.3, 1);
  p.P = default_initial_covariance();
  ParticleFilter pf(cfg, &prior);
  pf.init(std::vector<Particle>{p});
  ExtendedKalmanFilter ekf(cfg);
  ekf.init(p);
  Rng rng(8);
  double worst = 0.0;
  for (int k = 1; k <= 100; ++k) {
    FilterEvent ev;
    if (k % 5 == 0) {
      ev = Measurement{0.1 * k, {{uniform(rng, 0, 20), uniform(rng, 3, 7)}, uniform(rng, 0.5, 3)}};
    } else {
      ev = sim::OdometryStep{uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), 0.1 * k};
    }
    pf.step(ev);
    ekf.step(ev);
    worst = std::max(worst, (pf.particles()[0].s - ekf.state().s).cwiseAbs().maxCoeff());
    worst = std::max(worst, (pf.particles()[0].P - ekf.state().P).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("systematic resampling offspring counts stay within floor and ceil of n w") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(uniform(rng, 0, 30));
    std::vector<double> w(n);
    for (auto& x : w) x = uniform(rng, 0, 1) * uniform(rng, 0, 1);
    auto ps = weighted(w);
    normalize_weights(ps);
    const auto idx = systematic_indices(ps, uniform(rng, 0.0, 1.0 / static_cast<double>(n)));
    REQUIRE(idx.size() == n);
    std::vector<int> count(n, 0);
    for (auto i : idx) ++count[i];
    for (std::size_t i = 0; i < n; ++i) {
      const double nw = static_cast<double>(n) * ps[i].w;
      CHECK(count[i] >= std::floor(nw - 1e-9));
      CHECK(count[i] <= std::ceil(nw + 1e-9));
    }
  }
}

TEST_CASE("systematic resampling is unbiased and copies covariances exactly") {
  auto ps = weighted({0.1, 0.4, 0.05, 0.3, 0.15});
  std::vector<double> mean(5, 0.0);
  const int seeds = 10000;
  for (int s = 0; s < seeds; ++s) {
    SplitMix64 gen(static_cast<std::uint64_t>(s));
    const auto out = systematic_resample(std::span<const Particle>(ps), gen);
    for (const auto& p : out) {
      const auto i = static_cast<std::size_t>(p.s(0));
      mean[i] += 1.0;
      CHECK(p.w == 0.2);
      if (s == 0) CHECK(p.P == ps[i].P);
    }
  }
  for (std::size_t i = 0; i < 5; ++i) {
    const double expected = 5.0 * ps[i].w;
    CHECK(std::abs(mean[i] / seeds - expected) <= 0.02 * expected);
  }
}

TEST_CASE("weight update multiplies by the prior and resets on collapse") {
  const PriorMap prior = line_prior();
  std::vector<Particle> ps(2);
  ps[0].s = State(10, 5, 0, 1);
  ps[1].s = State(10, 50, 0, 1);
  ps[0].w = ps[1].w = 0.5;
  CHECK(weight_update(ps, prior));
  CHECK(ps[0].w / ps[1].w == doctest::Approx(prior.query({10, 5}) / prior.query({10, 50})));
  CHECK(ps[0].w + ps[1].w == doctest::Approx(1.0));

  ps[0].w = ps[1].w = 0.0;
  CHECK_FALSE(normalize_weights(ps));
  CHECK(ps[0].w == 0.5);
  CHECK(effective_sample_size(ps) == doctest::Approx(2.0));
}

TEST_CASE("odometry aggregation preserves totals and flushes at measurements") {
  std::vector<FilterEvent> ev;
  for (int k = 1; k <= 25; ++k) ev.push_back(sim::OdometryStep{0.1, -0.05, 0.1 * k});
  ev.push_back(Measurement{2.5, {{0, 0}, 1}});
  for (int k = 26; k <= 30; ++k) ev.push_back(sim::OdometryStep{0.2, 0.0, 0.1 * k});
  const auto out = aggregate_odometry(ev, 1.0);
  double dx = 0, dy = 0;
  std::vector<double> times;
  for (const auto& e : out) {
    times.push_back(event_time(e));
    if (const auto* o = std::get_if<sim::OdometryStep>(&e)) {
      dx += o->dx;
      dy += o->dy;
    }
  }
  CHECK(dx == doctest::Approx(25 * 0.1 + 5 * 0.2));
  CHECK(dy == doctest::Approx(-25 * 0.05));
  REQUIRE(times.size() == 5);
  CHECK(times[0] == doctest::Approx(1.1));
  CHECK(times[1] == doctest::Approx(2.1));
  CHECK(times[2] == doctest::Approx(2.5));
  CHECK(std::holds_alternative<Measurement>(out[3]));
  CHECK(times[4] == doctest::Approx(3.0));
  CHECK(aggregate_odometry(ev, 0.0).size() == ev.size());
  CHECK_THROWS_AS(aggregate_odometry(ev, -1.0), ValidationError);
}

TEST_CASE("filters reject out of order events and bad configs") {
  FilterConfig cfg;
  ExtendedKalmanFilter ekf(cfg);
  ekf.init(GaussianLocation{{0, 0}, 1}, 5.0);
  CHECK_THROWS_AS(ekf.step(sim::OdometryStep{0, 0, 4.0}), ValidationError);
  cfg.method = Method::Ekf;
  CHECK_THROWS_AS(ParticleFilter(cfg, nullptr), ValidationError);
  CHECK_THROWS_AS(FilterConfig::from_config(KeyValueConfig::parse("n_particles = 0\n")), ValidationError);
  CHECK(parse_method("pf") == Method::Pf);
  CHECK_THROWS_AS(parse_method("ukf"), ValidationError);
}

TEST_CASE("plain particle filter concentrates near repeated fixes") {
  const PriorMap prior = line_prior();
  FilterConfig cfg;
  cfg.method = Method::Pf;
  cfg.n_particles = 300;
  cfg.gamma = 1.0;
  cfg.seed = 3;
  ParticleFilter pf(cfg, &prior);
  pf.init(std::nullopt);
  FilterEstimate e;
  for (int k = 1; k <= 10; ++k) e = pf.step(Measurement{static_cast<double>(k), {{12, 5}, 1.0}});
  CHECK(distance(e.location, {12, 5}) < 1.0);
  CHECK(pf.resample_count() > 0);
}
