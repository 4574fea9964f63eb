#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "wifiloc/config.hpp"
#include "wifiloc/distribution_map.hpp"
#include "wifiloc/grid.hpp"
#include "wifiloc/radio_map.hpp"
#include "wifiloc/random.hpp"
#include "wifiloc/types.hpp"

using namespace wifiloc;

namespace {

Fingerprint fp_of(std::initializer_list<std::pair<const char*, double>> entries) {
  Fingerprint fp;
  for (const auto& [m, r] : entries) fp.entries.push_back({MacId::parse(m), r});
  return fp;
}

RadioMap small_map() {
  std::vector<Sample> s;
  s.push_back({fp_of({{"00:00:00:00:00:01", -40}, {"00:00:00:00:00:02", -70}}), {0, 0}});
  s.push_back({fp_of({{"00:00:00:00:00:02", -50}, {"00:00:00:00:00:03", -80}}), {4, 2}});
  s.push_back({fp_of({{"00:00:00:00:00:01", -60}}), {2, 6}});
  return RadioMap::from_samples(std::move(s));
}

}  // namespace

TEST_CASE("mac ids are canonical lowercase hex") {
  CHECK(MacId::parse("AA:BB:CC:DD:EE:FF").str() == "aabbccddeeff");
  CHECK(MacId::parse("aa-bb-cc-dd-ee-ff") == MacId::parse("AABBCCDDEEFF"));
  CHECK_THROWS_AS(MacId::parse("aa:bb:cc"), ValidationError);
  CHECK_THROWS_AS(MacId::parse("zz:bb:cc:dd:ee:ff"), ValidationError);
}

TEST_CASE("mac table interns in first appearance order") {
  MacTable t;
  CHECK(t.intern(MacId::parse("000000000002")) == 0);
  CHECK(t.intern(MacId::parse("000000000001")) == 1);
  CHECK(t.intern(MacId::parse("000000000002")) == 0);
  CHECK(t.size() == 2);
  CHECK_FALSE(t.find(MacId::parse("000000000003")).has_value());

  MacTable u;
  u.intern(MacId::parse("000000000001"));
  u.intern(MacId::parse("000000000002"));
  CHECK(t.hash() != u.hash());
}

TEST_CASE("fingerprint validation") {
  CHECK_NOTHROW(validate(fp_of({{"000000000001", -50}})));
  CHECK_THROWS_AS(validate(Fingerprint{}), ValidationError);
  CHECK_THROWS_AS(validate(fp_of({{"000000000001", -50}, {"000000000001", -60}})), ValidationError);
  CHECK_THROWS_AS(validate(fp_of({{"000000000001", 3}})), ValidationError);
  CHECK_THROWS_AS(validate(fp_of({{"000000000001", -121}})), ValidationError);
}

TEST_CASE("rss normalization maps the dBm range onto the unit interval") {
  CHECK(normalize_rss(kRssMin) == 0.0);
  CHECK(normalize_rss(kRssMax) == 1.0);
  CHECK(normalize_rss(-60.0) == doctest::Approx(0.5));
}

TEST_CASE("format_double round trips") {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::ldexp(uniform(rng, -1.0, 1.0), static_cast<int>(uniform(rng, -60, 60)));
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("derive_seed separates streams") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

TEST_CASE("key value config") {
  const auto cfg = KeyValueConfig::parse("b = 2 # trailing\n\n# full line\na.x = 1.5\nflag = yes\n");
  CHECK(cfg.get_double("a.x", 0) == 1.5);
  CHECK(cfg.get_int("b", 0) == 2);
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_string("missing", "d") == "d");
  CHECK(cfg.canonical() == "a.x = 1.5\nb = 2\nflag = yes\n");
  CHECK(cfg.section("a").get_double("x", 0) == 1.5);
  CHECK_THROWS_AS(cfg.get_int("a.x", 0), ValidationError);
  CHECK_THROWS_AS(cfg.check_keys({"b", "flag"}, "test"), ValidationError);
  CHECK_THROWS(KeyValueConfig::parse("no equals sign\n"));
}

TEST_CASE("radio map jsonl round trip") {
  const RadioMap m = small_map();
  std::stringstream ss;
  write_radio_map(m, ss);
  const RadioMap back = read_radio_map(ss);
  CHECK(back == m);
  CHECK(m.mac_table().size() == 3);
  CHECK(m.bounds() == Bounds{0, 0, 4, 6});
}

TEST_CASE("malformed radio map lines name the line") {
  std::stringstream ss("{\"fp\": [[\"000000000001\", -50]], \"loc\": [0, 0], \"t\": 0}\nnot json\n");
  try {
    read_radio_map(ss);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("train/val split is deterministic and shares the mac table") {
  std::vector<Sample> s;
  for (int i = 0; i < 50; ++i) {
    s.push_back({fp_of({{"000000000001", -40.0 - i}}), {static_cast<double>(i), 0}});
  }
  const RadioMap m = RadioMap::from_samples(s);
  const auto [a, b] = split_train_val(m, 0.9, 7);
  const auto [c, d] = split_train_val(m, 0.9, 7);
  CHECK(a.size() == 45);
  CHECK(b.size() == 5);
  CHECK(a == c);
  CHECK(b == d);
  CHECK(a.mac_table() == m.mac_table());
}

TEST_CASE("coordinate transform normalizes bounds to the unit square") {
  const auto [n, t] = normalize_coordinates(small_map());
  for (const auto& s : n.samples()) {
    CHECK(s.location.x >= 0.0);
    CHECK(s.location.x <= 1.0);
    CHECK(s.location.y >= 0.0);
    CHECK(s.location.y <= 1.0);
  }
  const Location p{3.0, 5.0};
  const Location q = t.denormalize(t.normalize(p));
  CHECK(q.x == doctest::Approx(p.x));
  CHECK(q.y == doctest::Approx(p.y));
  CHECK(t.mean_extent() == doctest::Approx(5.0));
}

TEST_CASE("resample_max keeps isolated peaks") {
  std::vector<double> src(100 * 100, 0.0);
  src[37 * 100 + 81] = 0.7;
  const auto out = resample_max(src, 100, 100, 16);
  CHECK(out.size() == 256);
  double mx = 0.0;
  for (double v : out) mx = std::max(mx, v);
  CHECK(mx == 0.7);

  std::vector<double> small{1, 2, 3, 4};
  const auto up = resample_max(small, 2, 2, 4);
  CHECK(up[0] == 1);
  CHECK(up[15] == 4);
}

TEST_CASE("distribution maps average normalized rss per cell") {
  const RadioMap m = small_map();
  const auto maps = build_rss_distribution_maps(m, 1.0);
  CHECK(maps.size() == 3);
  const auto& g = maps.geometry();
  int row = 0, col = 0;
  REQUIRE(g.locate({0.0, 0.0}, row, col));
  CHECK(maps.grid(MacId::parse("000000000001"))[g.index(row, col)] == doctest::Approx(normalize_rss(-40)));
  double nonzero = 0;
  for (double v : maps.grid(MacId::parse("000000000003"))) nonzero += v > 0 ? 1 : 0;
  CHECK(nonzero == 1);
}
