#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "wifiloc/config.hpp"
#include "wifiloc/random.hpp"
#include "wifiloc/types.hpp"

namespace wifiloc::sim {

/// Receivers ignore access points weaker than this.
inline constexpr double kAudibilityThreshold = -95.0;

/// Corridor-grid building description. Config keys match the field names.
struct WorldSpec {
  double area_w = 50.0;
  double area_h = 40.0;
  double corridor_pitch = 10.0;
  int n_aps = 30;
  double tx_power = -40.0;   // dBm at 1 m
  double ploss_exp = 2.5;
  double shadow_sigma = 4.0;  // dB
  std::uint64_t seed = 1;

  static WorldSpec from_config(const KeyValueConfig& cfg);
};

struct Segment {
  Location a;
  Location b;
  double length() const { return distance(a, b); }
};

struct AccessPoint {
  MacId mac;
  Location position;
  double tx_power = -40.0;
  double path_loss_exponent = 2.5;
};

/// Synthetic building: a walkable corridor graph and the APs covering it.
struct World {
  Bounds bounds;
  std::vector<Location> nodes;
  std::vector<std::vector<int>> adjacency;
  std::vector<Segment> corridors;
  std::vector<AccessPoint> aps;
  double shadow_sigma = 4.0;
  std::uint64_t rng_seed = 0;

  const AccessPoint& ap(const MacId& mac) const;
  /// Shortest distance from `p` to any corridor segment.
  double distance_to_graph(const Location& p) const;
};

World generate_world(const WorldSpec& spec);
World generate_world(const WorldSpec& spec, int n_aps, std::uint64_t seed);

void save_world(const World& world, const std::filesystem::path& path);
World load_world(const std::filesystem::path& path);

/// Log-distance path loss without shadowing, clamped to [-120, 0].
double mean_rss(const AccessPoint& ap, const Location& loc);

/// tx - 10 n log10(max(d, 0.1)) + N(0, shadow_sigma^2), clamped to [-120, 0].
double rss_at(const World& world, const MacId& ap, const Location& loc, Rng& rng);

/// All audible APs at `loc`, each independently dropped with probability `dropout`.
/// May be empty.
Fingerprint scan(const World& world, const Location& loc, double dropout, Rng& rng);

struct CrowdsourceOptions {
  std::size_t n_samples = 2000;
  double loc_noise_sigma = 0.0;  // meters, per axis
  double dropout = 0.0;
  double sample_spacing = 1.0;  // meters between samples along a walk
  double walk_length = 60.0;    // meters per contributing walk
};

struct CrowdsourceResult {
  RadioMap map;
  std::vector<Location> true_locations;  // aligned with map.samples()
};

CrowdsourceResult crowdsource_radio_map(const World& world, const CrowdsourceOptions& options,
                                        std::uint64_t seed);

struct Pose {
  double t = 0.0;
  Location location;
  double heading = 0.0;
};

/// Relative motion in the odometry frame over one pose interval.
struct OdometryStep {
  double dx = 0.0;
  double dy = 0.0;
  double t = 0.0;  // end of the interval

  friend bool operator==(const OdometryStep&, const OdometryStep&) = default;
};

struct TrajectoryOptions {
  double duration = 60.0;
  double speed = 1.2;
  double rate = 10.0;                          // poses per second
  std::optional<double> frame_rotation;        // odometry-to-map angle; random when unset
  std::optional<double> kidnap_time;           // teleport at the first pose at or after this
  double kidnap_min_distance = 15.0;
};

struct Trajectory {
  std::vector<Pose> poses;
  std::vector<OdometryStep> odometry;  // odometry[k] spans poses[k] -> poses[k + 1]
  double frame_rotation = 0.0;         // map_delta = R(frame_rotation) * odometry_delta
  std::optional<std::size_t> kidnap_pose;  // index of the first pose after a teleport
};

Trajectory generate_trajectory(const World& world, const TrajectoryOptions& options,
                               std::uint64_t seed);

struct OdometryCorruption {
  double scale_error = 0.0;    // ratio
  double heading_drift = 0.0;  // rad/s
  double noise_sigma = 0.0;    // meters, per axis
};

/// Step k becomes (1 + scale) R(drift * t_k) O_k + N(0, sigma^2 I).
std::vector<OdometryStep> corrupt_odometry(const Trajectory& traj,
                                           const OdometryCorruption& corruption,
                                           std::uint64_t seed);

enum class EventKind { Odometry, Wifi, Kidnap };

struct StreamEvent {
  EventKind kind = EventKind::Odometry;
  double t = 0.0;
  OdometryStep odometry;    // kind == Odometry
  Fingerprint fingerprint;  // kind == Wifi
};

struct StreamOptions {
  double fingerprint_period = 2.5;
  double dropout = 0.0;
};

/// Time-ordered events: odometry for every pose interval and a fingerprint
/// scanned at the true pose every `fingerprint_period` seconds. At equal
/// timestamps odometry precedes the fingerprint. Pass `odometry` to replace the
/// trajectory's exact steps (e.g. with corrupted ones).
std::vector<StreamEvent> online_stream(const World& world, const Trajectory& traj,
                                       const StreamOptions& options, std::uint64_t seed,
                                       std::span<const OdometryStep> odometry = {});

/// `t,kind,payload...` rows: `odom,dx,dy`, `wifi,mac,rss,mac,rss,...`, `kidnap`.
void write_stream_csv(const std::vector<StreamEvent>& events, std::ostream& out);
std::vector<StreamEvent> read_stream_csv(std::istream& in);

/// `t,x,y,heading`.
void write_trajectory_csv(const Trajectory& traj, std::ostream& out);
std::vector<Pose> read_trajectory_csv(std::istream& in);

}  // namespace wifiloc::sim
