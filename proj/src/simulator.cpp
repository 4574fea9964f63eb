#include "wifiloc/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace wifiloc::sim {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kTagAps = 1,
  kTagWalks,
  kTagScan,
  kTagNoise,
  kTagTrajectory,
  kTagFrame,
  kTagCorrupt,
  kTagStream,
};

double point_segment_distance(const Location& p, const Segment& s) {
  const double vx = s.b.x - s.a.x, vy = s.b.y - s.a.y;
  const double len2 = vx * vx + vy * vy;
  double u = len2 > 0.0 ? ((p.x - s.a.x) * vx + (p.y - s.a.y) * vy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  return distance(p, {s.a.x + u * vx, s.a.y + u * vy});
}

Location rotate(double angle, double x, double y) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * x - s * y, s * x + c * y};
}

/// Moves along the corridor graph, choosing a random onward corridor at each
/// node and turning back only at dead ends.
class GraphWalker {
 public:
  GraphWalker(const World& world, Rng& rng) : world_(world), rng_(rng) {
    place_at(static_cast<int>(uniform_index(rng_, world_.nodes.size())));
  }

  void place_at(int node) {
    from_ = node;
    const auto& nbrs = world_.adjacency[static_cast<std::size_t>(node)];
    to_ = nbrs[uniform_index(rng_, nbrs.size())];
    along_ = 0.0;
  }

  void advance(double dist) {
    while (dist > 0.0) {
      const double remaining = segment_length() - along_;
      if (dist < remaining) {
        along_ += dist;
        return;
      }
      dist -= remaining;
      const auto& nbrs = world_.adjacency[static_cast<std::size_t>(to_)];
      std::vector<int> onward;
      for (int n : nbrs) {
        if (n != from_) onward.push_back(n);
      }
      if (onward.empty()) onward.push_back(from_);
      const int next = onward[uniform_index(rng_, onward.size())];
      from_ = to_;
      to_ = next;
      along_ = 0.0;
    }
  }

  Location position() const {
    const auto& a = world_.nodes[static_cast<std::size_t>(from_)];
    const auto& b = world_.nodes[static_cast<std::size_t>(to_)];
    const double u = along_ / segment_length();
    return {a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)};
  }

  double heading() const {
    const auto& a = world_.nodes[static_cast<std::size_t>(from_)];
    const auto& b = world_.nodes[static_cast<std::size_t>(to_)];
    return std::atan2(b.y - a.y, b.x - a.x);
  }

 private:
  double segment_length() const {
    return distance(world_.nodes[static_cast<std::size_t>(from_)],
                    world_.nodes[static_cast<std::size_t>(to_)]);
  }

  const World& world_;
  Rng& rng_;
  int from_ = 0;
  int to_ = 0;
  double along_ = 0.0;
};

MacId random_mac(Rng& rng) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::uint64_t bits = rng() & 0xffffffffffffULL;
  std::string s(12, '0');
  for (int i = 11; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kHex[bits & 0xf];
    bits >>= 4;
  }
  return MacId::parse(s);
}

}  // namespace

WorldSpec WorldSpec::from_config(const KeyValueConfig& cfg) {
  WorldSpec s;
  s.area_w = cfg.get_double("area_w", s.area_w);
  s.area_h = cfg.get_double("area_h", s.area_h);
  s.corridor_pitch = cfg.get_double("corridor_pitch", s.corridor_pitch);
  s.n_aps = static_cast<int>(cfg.get_int("n_aps", s.n_aps));
  s.tx_power = cfg.get_double("tx_power", s.tx_power);
  s.ploss_exp = cfg.get_double("ploss_exp", s.ploss_exp);
  s.shadow_sigma = cfg.get_double("shadow_sigma", s.shadow_sigma);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(s.seed)));
  return s;
}

const AccessPoint& World::ap(const MacId& mac) const {
  for (const auto& a : aps) {
    if (a.mac == mac) return a;
  }
  throw ValidationError("unknown access point " + mac.str());
}

double World::distance_to_graph(const Location& p) const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : corridors) best = std::min(best, point_segment_distance(p, s));
  return best;
}

World generate_world(const WorldSpec& spec) { return generate_world(spec, spec.n_aps, spec.seed); }

World generate_world(const WorldSpec& spec, int n_aps, std::uint64_t seed) {
  if (n_aps < 1) throw ValidationError("world needs at least one access point");
  if (!(spec.area_w > 0.0 && spec.area_h > 0.0) || spec.area_w * spec.area_h < 100.0) {
    throw ValidationError("world area must be at least 100 m^2");
  }
  if (!(spec.corridor_pitch > 0.0)) throw ValidationError("corridor pitch must be positive");
  if (spec.ploss_exp < 1.5 || spec.ploss_exp > 4.0) {
    throw ValidationError("path loss exponent must be in [1.5, 4.0]");
  }
  if (!(spec.shadow_sigma >= 0.0)) throw ValidationError("shadow sigma must be non-negative");

  const int nx = static_cast<int>(std::floor(spec.area_w / spec.corridor_pitch + 1e-9)) + 1;
  const int ny = static_cast<int>(std::floor(spec.area_h / spec.corridor_pitch + 1e-9)) + 1;
  if (nx * ny < 2) {
    throw ValidationError("corridor pitch larger than both area dimensions: no corridors");
  }

  World w;
  w.bounds = {0.0, 0.0, spec.area_w, spec.area_h};
  w.shadow_sigma = spec.shadow_sigma;
  w.rng_seed = seed;
  w.nodes.reserve(static_cast<std::size_t>(nx * ny));
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      w.nodes.push_back({i * spec.corridor_pitch, j * spec.corridor_pitch});
    }
  }
  w.adjacency.assign(w.nodes.size(), {});
  auto link = [&w](int a, int b) {
    w.adjacency[static_cast<std::size_t>(a)].push_back(b);
    w.adjacency[static_cast<std::size_t>(b)].push_back(a);
    w.corridors.push_back({w.nodes[static_cast<std::size_t>(a)],
                           w.nodes[static_cast<std::size_t>(b)]});
  };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int id = j * nx + i;
      if (i + 1 < nx) link(id, id + 1);
      if (j + 1 < ny) link(id, id + nx);
    }
  }

  Rng rng = make_rng(seed, {kTagAps});
  std::set<std::string> used;
  while (static_cast<int>(w.aps.size()) < n_aps) {
    MacId mac = random_mac(rng);
    const double x = uniform(rng, 0.0, spec.area_w);
    const double y = uniform(rng, 0.0, spec.area_h);
    if (!used.insert(mac.str()).second) continue;
    w.aps.push_back({mac, {x, y}, spec.tx_power, spec.ploss_exp});
  }
  return w;
}

void save_world(const World& world, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = "wifiloc-world/1";
  j["bounds"] = {world.bounds.min_x, world.bounds.min_y, world.bounds.max_x, world.bounds.max_y};
  j["shadow_sigma"] = world.shadow_sigma;
  j["seed"] = world.rng_seed;
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& n : world.nodes) nodes.push_back({n.x, n.y});
  j["nodes"] = std::move(nodes);
  j["adjacency"] = world.adjacency;
  auto aps = nlohmann::ordered_json::array();
  for (const auto& a : world.aps) {
    aps.push_back({{"mac", a.mac.str()},
                   {"pos", {a.position.x, a.position.y}},
                   {"tx_power", a.tx_power},
                   {"ploss_exp", a.path_loss_exponent}});
  }
  j["aps"] = std::move(aps);
  std::ofstream out(path);
  if (!out) throw Error("cannot write world " + path.string());
  out << j.dump(1) << '\n';
}

World load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open world " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("world file " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "wifiloc-world/1") throw Error("unsupported world format");
  World w;
  auto b = j.at("bounds");
  w.bounds = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  w.shadow_sigma = j.at("shadow_sigma").get<double>();
  w.rng_seed = j.at("seed").get<std::uint64_t>();
  for (const auto& n : j.at("nodes")) w.nodes.push_back({n[0].get<double>(), n[1].get<double>()});
  w.adjacency = j.at("adjacency").get<std::vector<std::vector<int>>>();
  for (std::size_t a = 0; a < w.adjacency.size(); ++a) {
    for (int bidx : w.adjacency[a]) {
      if (static_cast<std::size_t>(bidx) > a) w.corridors.push_back({w.nodes[a], w.nodes[static_cast<std::size_t>(bidx)]});
    }
  }
  for (const auto& a : j.at("aps")) {
    w.aps.push_back({MacId::parse(a.at("mac").get<std::string>()),
                     {a.at("pos")[0].get<double>(), a.at("pos")[1].get<double>()},
                     a.at("tx_power").get<double>(),
                     a.at("ploss_exp").get<double>()});
  }
  return w;
}

double mean_rss(const AccessPoint& ap, const Location& loc) {
  const double d = std::max(distance(ap.position, loc), 0.1);
  const double rss = ap.tx_power - 10.0 * ap.path_loss_exponent * std::log10(d);
  return std::clamp(rss, kRssMin, kRssMax);
}

namespace {

double shadowed_rss(const World& world, const AccessPoint& ap, const Location& loc, Rng& rng) {
  const double d = std::max(distance(ap.position, loc), 0.1);
  const double rss = ap.tx_power - 10.0 * ap.path_loss_exponent * std::log10(d) +
                     gaussian(rng, world.shadow_sigma);
  return std::clamp(rss, kRssMin, kRssMax);
}

}  // namespace

double rss_at(const World& world, const MacId& mac, const Location& loc, Rng& rng) {
  return shadowed_rss(world, world.ap(mac), loc, rng);
}

Fingerprint scan(const World& world, const Location& loc, double dropout, Rng& rng) {
  Fingerprint fp;
  for (const auto& ap : world.aps) {
    const double rss = shadowed_rss(world, ap, loc, rng);
    const bool dropped = dropout > 0.0 && uniform(rng, 0.0, 1.0) < dropout;
    if (dropped || rss < kAudibilityThreshold) continue;
    fp.entries.push_back({ap.mac, rss});
  }
  return fp;
}

namespace {

/// Rescans until the fingerprint is non-empty; nullopt after `tries` failures.
std::optional<Fingerprint> scan_nonempty(const World& world, const Location& loc, double dropout,
                                         Rng& rng, int tries = 50) {
  for (int i = 0; i < tries; ++i) {
    Fingerprint fp = scan(world, loc, dropout, rng);
    if (!fp.entries.empty()) return fp;
  }
  return std::nullopt;
}

}  // namespace

CrowdsourceResult crowdsource_radio_map(const World& world, const CrowdsourceOptions& options,
                                        std::uint64_t seed) {
  if (options.n_samples < 1) throw ValidationError("need at least one sample");
  if (!(options.dropout >= 0.0 && options.dropout < 1.0)) {
    throw ValidationError("dropout must be in [0, 1)");
  }
  if (!(options.sample_spacing > 0.0 && options.walk_length > 0.0)) {
    throw ValidationError("sample spacing and walk length must be positive");
  }

  Rng walk_rng = make_rng(seed, {kTagWalks});
  Rng scan_rng = make_rng(seed, {kTagScan});
  Rng noise_rng = make_rng(seed, {kTagNoise});

  std::vector<Sample> samples;
  std::vector<Location> truth;
  samples.reserve(options.n_samples);
  truth.reserve(options.n_samples);
  int consecutive_failures = 0;
  const double walking_speed = 1.2;

  while (samples.size() < options.n_samples) {
    GraphWalker walker(world, walk_rng);
    walker.advance(uniform(walk_rng, 0.0, options.sample_spacing));
    for (double covered = 0.0; covered < options.walk_length && samples.size() < options.n_samples;
         covered += options.sample_spacing) {
      const Location p = walker.position();
      walker.advance(options.sample_spacing);
      auto fp = scan_nonempty(world, p, options.dropout, scan_rng);
      if (!fp) {
        if (++consecutive_failures > 1000) {
          throw ValidationError("no access point is audible along the corridors");
        }
        continue;
      }
      consecutive_failures = 0;
      fp->timestamp = static_cast<double>(samples.size()) * options.sample_spacing / walking_speed;
      Location recorded{p.x + gaussian(noise_rng, options.loc_noise_sigma),
                        p.y + gaussian(noise_rng, options.loc_noise_sigma)};
      samples.push_back({std::move(*fp), recorded});
      truth.push_back(p);
    }
  }
  return {RadioMap::from_samples(std::move(samples)), std::move(truth)};
}

Trajectory generate_trajectory(const World& world, const TrajectoryOptions& options,
                               std::uint64_t seed) {
  if (!(options.duration > 0.0)) throw ValidationError("trajectory duration must be positive");
  if (!(options.speed >= 0.0) || !(options.rate > 0.0)) {
    throw ValidationError("speed must be non-negative and rate positive");
  }
  Rng rng = make_rng(seed, {kTagTrajectory});
  Rng frame_rng = make_rng(seed, {kTagFrame});

  Trajectory traj;
  traj.frame_rotation = options.frame_rotation.value_or(
      uniform(frame_rng, -std::numbers::pi, std::numbers::pi));

  GraphWalker walker(world, rng);
  walker.advance(uniform(rng, 0.0, 1.0) * 5.0);
  const auto n_steps = static_cast<std::size_t>(std::llround(options.duration * options.rate));
  const double step = options.speed / options.rate;
  traj.poses.reserve(n_steps + 1);
  traj.odometry.reserve(n_steps);
  traj.poses.push_back({0.0, walker.position(), walker.heading()});

  for (std::size_t k = 1; k <= n_steps; ++k) {
    const double t = static_cast<double>(k) / options.rate;
    Location start = traj.poses.back().location;
    if (options.kidnap_time && !traj.kidnap_pose && t >= *options.kidnap_time) {
      std::vector<int> far;
      for (std::size_t n = 0; n < world.nodes.size(); ++n) {
        if (distance(world.nodes[n], start) >= options.kidnap_min_distance) {
          far.push_back(static_cast<int>(n));
        }
      }
      if (far.empty()) throw ValidationError("no corridor node far enough for the kidnap");
      const int target = far[uniform_index(rng, far.size())];
      walker.place_at(target);
      start = world.nodes[static_cast<std::size_t>(target)];
      traj.kidnap_pose = k;
    }
    walker.advance(step);
    const Location p = walker.position();
    traj.poses.push_back({t, p, walker.heading()});
    const Location o = rotate(-traj.frame_rotation, p.x - start.x, p.y - start.y);
    traj.odometry.push_back({o.x, o.y, t});
  }
  return traj;
}

std::vector<OdometryStep> corrupt_odometry(const Trajectory& traj,
                                           const OdometryCorruption& corruption,
                                           std::uint64_t seed) {
  Rng rng = make_rng(seed, {kTagCorrupt});
  std::vector<OdometryStep> out;
  out.reserve(traj.odometry.size());
  for (const auto& step : traj.odometry) {
    const double scale = 1.0 + corruption.scale_error;
    Location r = rotate(corruption.heading_drift * step.t, scale * step.dx, scale * step.dy);
    r.x += gaussian(rng, corruption.noise_sigma);
    r.y += gaussian(rng, corruption.noise_sigma);
    out.push_back({r.x, r.y, step.t});
  }
  return out;
}

std::vector<StreamEvent> online_stream(const World& world, const Trajectory& traj,
                                       const StreamOptions& options, std::uint64_t seed,
                                       std::span<const OdometryStep> odometry) {
  if (options.fingerprint_period < 1.0 || options.fingerprint_period > 10.0) {
    throw ValidationError("fingerprint period must be in [1, 10] s");
  }
  if (odometry.empty()) odometry = traj.odometry;
  if (odometry.size() != traj.odometry.size()) {
    throw ValidationError("odometry override must match the trajectory length");
  }
  Rng rng = make_rng(seed, {kTagStream});

  const double t_end = traj.poses.back().t;
  const double rate = traj.poses.size() > 1 ? 1.0 / (traj.poses[1].t - traj.poses[0].t) : 10.0;

  std::vector<StreamEvent> events;
  std::size_t next_fp = 1;
  auto fp_time = [&](std::size_t j) { return static_cast<double>(j) * options.fingerprint_period; };
  // Fingerprints within 1e-9 s of an odometry timestamp are emitted after it.
  auto emit_fingerprints_until = [&](double t, bool inclusive) {
    auto due = [&](double tf) { return inclusive ? tf <= t + 1e-9 : tf < t - 1e-9; };
    while (due(fp_time(next_fp)) && fp_time(next_fp) <= t_end + 1e-9) {
      const double tf = fp_time(next_fp++);
      const auto idx = std::min<std::size_t>(static_cast<std::size_t>(std::llround(tf * rate)),
                                             traj.poses.size() - 1);
      auto fp = scan_nonempty(world, traj.poses[idx].location, options.dropout, rng);
      if (!fp) continue;
      fp->timestamp = tf;
      StreamEvent ev;
      ev.kind = EventKind::Wifi;
      ev.t = tf;
      ev.fingerprint = std::move(*fp);
      events.push_back(std::move(ev));
    }
  };

  for (std::size_t k = 0; k < odometry.size(); ++k) {
    const double t = odometry[k].t;
    emit_fingerprints_until(t, false);
    if (traj.kidnap_pose && *traj.kidnap_pose == k + 1) {
      StreamEvent ev;
      ev.kind = EventKind::Kidnap;
      ev.t = t;
      events.push_back(ev);
    }
    StreamEvent ev;
    ev.kind = EventKind::Odometry;
    ev.t = t;
    ev.odometry = odometry[k];
    events.push_back(ev);
    emit_fingerprints_until(t, true);
  }
  return events;
}

void write_stream_csv(const std::vector<StreamEvent>& events, std::ostream& out) {
  out << "t,kind,payload\n";
  for (const auto& ev : events) {
    out << format_double(ev.t);
    switch (ev.kind) {
      case EventKind::Odometry:
        out << ",odom," << format_double(ev.odometry.dx) << ',' << format_double(ev.odometry.dy);
        break;
      case EventKind::Wifi:
        out << ",wifi";
        for (const auto& obs : ev.fingerprint.entries) {
          out << ',' << obs.mac.str() << ',' << format_double(obs.rss);
        }
        break;
      case EventKind::Kidnap:
        out << ",kidnap";
        break;
    }
    out << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

double to_double(const std::string& s, std::size_t lineno) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(lineno, "not a number: '" + s + "'");
  }
}

}  // namespace

std::vector<StreamEvent> read_stream_csv(std::istream& in) {
  std::vector<StreamEvent> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() < 2) throw ParseError(lineno, "expected t,kind,...");
    StreamEvent ev;
    ev.t = to_double(cells[0], lineno);
    if (cells[1] == "odom") {
      if (cells.size() != 4) throw ParseError(lineno, "odom rows need dx,dy");
      ev.kind = EventKind::Odometry;
      ev.odometry = {to_double(cells[2], lineno), to_double(cells[3], lineno), ev.t};
    } else if (cells[1] == "wifi") {
      if (cells.size() % 2 != 0) throw ParseError(lineno, "wifi rows need mac,rss pairs");
      ev.kind = EventKind::Wifi;
      ev.fingerprint.timestamp = ev.t;
      for (std::size_t i = 2; i + 1 < cells.size(); i += 2) {
        ev.fingerprint.entries.push_back({MacId::parse(cells[i]), to_double(cells[i + 1], lineno)});
      }
      validate(ev.fingerprint);
    } else if (cells[1] == "kidnap") {
      ev.kind = EventKind::Kidnap;
    } else {
      throw ParseError(lineno, "unknown event kind '" + cells[1] + "'");
    }
    events.push_back(std::move(ev));
  }
  return events;
}

void write_trajectory_csv(const Trajectory& traj, std::ostream& out) {
  out << "t,x,y,heading\n";
  for (const auto& p : traj.poses) {
    out << format_double(p.t) << ',' << format_double(p.location.x) << ','
        << format_double(p.location.y) << ',' << format_double(p.heading) << '\n';
  }
}

std::vector<Pose> read_trajectory_csv(std::istream& in) {
  std::vector<Pose> poses;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() < 3) throw ParseError(lineno, "expected t,x,y[,heading]");
    Pose p;
    p.t = to_double(cells[0], lineno);
    p.location = {to_double(cells[1], lineno), to_double(cells[2], lineno)};
    if (cells.size() > 3) p.heading = to_double(cells[3], lineno);
    poses.push_back(p);
  }
  return poses;
}

}  // namespace wifiloc::sim
