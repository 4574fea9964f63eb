#include <doctest.h>

#include <cmath>
#include <numbers>

#include "wifiloc/prior_map.hpp"
#include "wifiloc/random.hpp"
#include "wifiloc/wknn.hpp"

using namespace wifiloc;

namespace {

RadioMap random_map(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> s;
  for (std::size_t i = 0; i < n; ++i) {
    Fingerprint fp;
    fp.entries.push_back({MacId::parse("000000000001"), uniform(rng, -90, -30)});
    s.push_back({fp, {uniform(rng, 0, 20), uniform(rng, 0, 15)}});
  }
  return RadioMap::from_samples(std::move(s));
}

double brute_kde(const RadioMap& m, const Location& c, double h) {
  double sum = 0.0;
  for (const auto& s : m.samples()) {
    const double d2 = std::pow(c.x - s.location.x, 2) + std::pow(c.y - s.location.y, 2);
    sum += std::exp(-d2 / (2 * h * h)) / (2 * std::numbers::pi * h * h);
  }
  return sum / static_cast<double>(m.size());
}

}  // namespace

TEST_CASE("gridded kernel density matches the direct sum") {
  for (std::size_t n : {1u, 17u, 200u}) {
    const RadioMap m = random_map(n, n);
    const PriorMap p = build_prior(m, {1.0, 1e-4, 0.5, PriorNormalization::Max});
    const auto& g = p.geometry();
    double worst = 0.0;
    for (int r = 0; r < g.rows; r += 3) {
      for (int c = 0; c < g.cols; c += 3) {
        const double ref = brute_kde(m, g.cell_center(r, c), 1.0);
        const double got = p.raw_density()[g.index(r, c)];
        if (ref > 1e-300) worst = std::max(worst, std::abs(got - ref) / ref);
      }
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("single sample density falls to exp(-1/2) at one bandwidth") {
  std::vector<Sample> s{{{{{MacId::parse("000000000001"), -50}}, 0}, {3.0, 4.0}}};
  const RadioMap m = RadioMap::from_samples(s);
  const PriorMap p = build_prior(m, {1.0, 1e-4, 0.25, PriorNormalization::Max});
  const auto& g = p.geometry();
  int r = 0, c = 0, r1 = 0, c1 = 0;
  REQUIRE(g.locate({3.0, 4.0}, r, c));
  REQUIRE(g.locate({4.0, 4.0}, r1, c1));
  const double ratio = p.raw_density()[g.index(r1, c1)] / p.raw_density()[g.index(r, c)];
  CHECK(std::abs(ratio - std::exp(-0.5)) <= 1e-9);
}

TEST_CASE("prior is floored by beta and peaks at one under max normalization") {
  const RadioMap m = random_map(50, 3);
  const PriorMap p = build_prior(m, {1.0, 1e-4, 0.5, PriorNormalization::Max});
  double mx = 0.0, mn = 1e9;
  for (double v : p.grid().values) {
    mx = std::max(mx, v);
    mn = std::min(mn, v);
  }
  CHECK(mx == doctest::Approx(1.0 + 1e-4));
  CHECK(mn >= 1e-4);
  CHECK(p.query({-1000, -1000}) == 1e-4);

  const PriorMap q = build_prior(m, {1.0, 1e-4, 0.5, PriorNormalization::Mass});
  double mass = 0.0;
  for (double v : q.grid().values) mass += (v - 1e-4) * 0.25;
  CHECK(mass == doctest::Approx(1.0));
}

TEST_CASE("prior query interpolates between cell centers") {
  const RadioMap m = random_map(30, 5);
  const PriorMap p = build_prior(m, {1.0, 1e-4, 0.5, PriorNormalization::Max});
  const auto& g = p.geometry();
  const Location a = g.cell_center(10, 10), b = g.cell_center(10, 11);
  CHECK(p.query(a) == doctest::Approx(p.grid().at(10, 10)));
  CHECK(p.query({0.5 * (a.x + b.x), a.y}) == doctest::Approx(0.5 * (p.grid().at(10, 10) + p.grid().at(10, 11))));
}

TEST_CASE("prior rejects bad options") {
  const RadioMap m = random_map(5, 1);
  CHECK_THROWS_AS(build_prior(m, {0.0, 1e-4, 0.5, PriorNormalization::Max}), ValidationError);
  CHECK_THROWS_AS(build_prior(m, {1.0, 0.0, 0.5, PriorNormalization::Max}), ValidationError);
  CHECK_THROWS_AS(build_prior(RadioMap{}, {}), EmptyMapError);
}

TEST_CASE("prior sampling follows the field") {
  const RadioMap m = random_map(40, 7);
  const PriorMap p = build_prior(m, {1.0, 1e-4, 0.5, PriorNormalization::Max});
  Rng rng(2);
  double near = 0;
  for (int i = 0; i < 500; ++i) {
    const Location l = p.sample(rng);
    double best = 1e9;
    for (const auto& s : m.samples()) best = std::min(best, distance(l, s.location));
    near += best < 3.0;
  }
  CHECK(near / 500 > 0.95);
}

TEST_CASE("wknn with k = 1 returns the exact match") {
  std::vector<Sample> s;
  for (int i = 0; i < 10; ++i) {
    Fingerprint fp;
    fp.entries.push_back({MacId::parse("000000000001"), -30.0 - 5 * i});
    fp.entries.push_back({MacId::parse("000000000002"), -80.0 + 3 * i});
    s.push_back({fp, {static_cast<double>(i), 2.0 * i}});
  }
  const RadioMap m = RadioMap::from_samples(s);
  const WknnLocalizer w(m, {1, -100.0, 0.5});
  for (int i = 0; i < 10; ++i) {
    const auto g = w.localize(s[static_cast<std::size_t>(i)].fingerprint);
    CHECK(g.mu.x == doctest::Approx(i));
    CHECK(g.mu.y == doctest::Approx(2.0 * i));
    CHECK(g.sigma == 0.5);
  }
}

TEST_CASE("wknn handles missing macs and bounds k") {
  const RadioMap m = random_map(20, 9);
  const WknnLocalizer w(m, {50, -100.0, 0.5});
  Fingerprint fp;
  fp.entries.push_back({MacId::parse("000000000001"), -60});
  fp.entries.push_back({MacId::parse("0000000000ff"), -60});
  const auto g = w.localize(fp);
  CHECK(m.bounds().contains(g.mu));
  CHECK(g.sigma >= 0.5);
  CHECK_THROWS_AS(w.localize(Fingerprint{}), EmptyFingerprintError);
}

TEST_CASE("wknn is invariant to fingerprint entry order") {
  std::vector<Sample> s;
  Rng rng(1);
  for (int i = 0; i < 30; ++i) {
    Fingerprint fp;
    for (int a = 1; a <= 4; ++a) fp.entries.push_back({MacId::parse("00000000000" + std::to_string(a)), uniform(rng, -90, -30)});
    s.push_back({fp, {uniform(rng, 0, 10), uniform(rng, 0, 10)}});
  }
  const RadioMap m = RadioMap::from_samples(s);
  const WknnLocalizer w(m, {5, -100.0, 0.5});
  Fingerprint q = s[3].fingerprint;
  const auto a = w.localize(q);
  std::reverse(q.entries.begin(), q.entries.end());
  const auto b = w.localize(q);
  CHECK(a == b);
}
