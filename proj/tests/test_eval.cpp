#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "wifiloc/eval.hpp"

using namespace wifiloc;
using namespace wifiloc::eval;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Trial kidnapped_trial() {
  Trial t;
  for (int k = 0; k <= 200; ++k) t.trajectory.poses.push_back({0.1 * k, {0.0, 0.0}});
  t.trajectory.kidnap_pose = 100;
  for (int k = 1; k <= 20; ++k) {
    sim::StreamEvent e;
    e.kind = sim::EventKind::Wifi;
    e.t = 1.0 * k;
    t.events.push_back(e);
  }
  return t;
}

const char* kSmoke = R"(world.area_w = 40
world.area_h = 30
world.n_aps = 12
world.seed = 7
map.n_samples = 300
map.seed = 2
trajectory.duration = 90
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
model.head_hidden = 32
model.rss_hidden = 16
train.epochs = 2
filter.n_particles = 50
filter.noise_form = scaled
filter.prior_schedule = measurement
filter.odometry_interval = 1.0
experiment.methods = ekpf,ekf,pf,ekpf-const-sigma,wifi-only,wknn-only
experiment.n_trials = 1
experiment.seed = 3
experiment.warmup = 10
)";

}  // namespace

TEST_CASE("nearest rank percentiles") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(nearest_rank(v, 0.5) == 5);
  CHECK(nearest_rank(v, 0.95) == 10);
  CHECK(nearest_rank(v, 0.91) == 10);
  CHECK(nearest_rank(v, 0.9) == 9);
  CHECK(nearest_rank(v, 1e-6) == 1);
  CHECK_THROWS_AS(nearest_rank(std::vector<double>{}, 0.5), ValidationError);
}

TEST_CASE("error summary and cdf") {
  const auto r = summarize_errors({3, 1, 2, 2}, 0);
  CHECK(r.mean == 2.0);
  CHECK(r.max == 3.0);
  REQUIRE(r.cdf.size() == 3);
  CHECK(r.cdf[1] == std::pair<double, double>{2.0, 0.75});
  CHECK(r.cdf.back().second == 1.0);
  CHECK_THROWS_AS(summarize_errors({}, 0), ValidationError);
}

TEST_CASE("metrics skip warmup and pair estimates with nearby truth") {
  std::vector<TimedLocation> truth, est;
  for (int k = 0; k <= 100; ++k) truth.push_back({1.0 * k, {1.0 * k, 0.0}});
  for (int k = 0; k <= 100; ++k) est.push_back({1.0 * k + 0.1, {1.0 * k, k < 60 ? 100.0 : 2.0}});
  est.push_back({500.0, {0, 0}});
  const auto r = compute_metrics(est, truth, 60.0, 0.2);
  CHECK(r.errors.size() == 41);
  CHECK(r.mean == doctest::Approx(2.0));
  std::reverse(truth.begin(), truth.end());
  CHECK_THROWS_AS(compute_metrics(est, truth), ValidationError);
}

TEST_CASE("locations csv accepts both column layouts") {
  std::stringstream a("t,x,y\n0,1,2\n1,3,4\n");
  const auto la = read_locations_csv(a);
  REQUIRE(la.size() == 2);
  CHECK(la[1].location == Location{3, 4});
  std::stringstream b(std::string(kTrajectoryHeader) + "\n2,5,6,0,0,1,1,0\n");
  CHECK(read_locations_csv(b).front().location == Location{5, 6});
  std::stringstream bad("t,q\n");
  CHECK_THROWS_AS(read_locations_csv(bad), ParseError);
}

TEST_CASE("kidnap recovery needs a sustained window below threshold") {
  const Trial t = kidnapped_trial();
  std::vector<EstimateRow> rows;
  for (int k = 0; k <= 200; ++k) {
    EstimateRow r;
    r.t = 0.1 * k;
    r.error = r.t < 10.0 ? 1.0 : (r.t < 12.0 || (r.t > 12.4 && r.t < 13.0) ? 9.0 : 0.5);
    rows.push_back(r);
  }
  const Recovery r = kidnap_recovery(rows, t, 3.0, 5.0);
  REQUIRE(r.recovered_at.has_value());
  CHECK(*r.recovered_at == doctest::Approx(13.0));
  CHECK(r.kidnap_time == doctest::Approx(10.0));
  CHECK(r.fingerprints == 3);

  for (auto& row : rows) row.error = row.t >= 10.0 ? 9.0 : 0.0;
  CHECK_FALSE(kidnap_recovery(rows, t).recovered_at.has_value());
  Trial plain = t;
  plain.trajectory.kidnap_pose.reset();
  CHECK_THROWS_AS(kidnap_recovery(rows, plain), ValidationError);
}

TEST_CASE("unknown experiment keys are rejected") {
  CHECK_THROWS_AS(ExperimentConfig::from_config(KeyValueConfig::parse("filter.gama = 3\n")), ValidationError);
  CHECK_THROWS_AS(ExperimentConfig::from_config(KeyValueConfig::parse("nosection = 3\n")), ValidationError);
  CHECK_THROWS_AS(ExperimentConfig::from_config(KeyValueConfig::parse("experiment.methods = ekpf,magic\n")),
                  ValidationError);
  CHECK(is_known_method("wknn-only"));
}

TEST_CASE("experiment artifacts are byte identical across reruns") {
  const auto cfg = ExperimentConfig::from_config(KeyValueConfig::parse(kSmoke));
  const auto base = std::filesystem::temp_directory_path() / "wifiloc_eval_test";
  std::filesystem::remove_all(base);
  const auto ra = run_experiment(cfg, base / "a");
  const auto rb = run_experiment(cfg, base / "b");
  REQUIRE(ra.methods.size() == 6);
  for (const auto& m : ra.methods) CHECK(std::isfinite(m.report.mean));
  CHECK(ra.constant_sigma > 0.0);
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(base / "a")) {
    const auto other = base / "b" / entry.path().filename();
    REQUIRE(std::filesystem::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
    ++files;
  }
  CHECK(files > 10);

  for (const auto& m : ra.methods) {
    const auto& e = m.report.errors;
    const double below = static_cast<double>(std::count_if(e.begin(), e.end(), [&](double x) { return x <= m.report.p95; }));
    CHECK(below / static_cast<double>(e.size()) >= 0.95 - 1.0 / static_cast<double>(e.size()));
  }
  const double ref = std::min(ra.find("ekf")->report.mean, ra.find("pf")->report.mean);
  std::ifstream cmp(base / "a" / "comparison.csv");
  std::string line;
  std::getline(cmp, line);
  int rows = 0;
  while (std::getline(cmp, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const double mean = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    CHECK(std::stod(line.substr(c2 + 1)) == doctest::Approx(improvement_pct(mean, ref)));
    ++rows;
  }
  CHECK(rows == 6);

  const auto rc = run_experiment(cfg, base / "c", base / "a" / "localizer.json");
  for (std::size_t k = 0; k < ra.methods.size(); ++k) CHECK(rc.methods[k].report.mean == ra.methods[k].report.mean);
  std::filesystem::remove_all(base);
}
