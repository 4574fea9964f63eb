#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <utility>

#include "wifiloc/types.hpp"

namespace wifiloc {

// JSON Lines, one sample per line:
//   {"fp": [["<mac>", <rss>], ...], "loc": [<x>, <y>], "t": <seconds>}
RadioMap load_radio_map(const std::filesystem::path& path);
RadioMap read_radio_map(std::istream& in);
void save_radio_map(const RadioMap& map, const std::filesystem::path& path);
void write_radio_map(const RadioMap& map, std::ostream& out);

/// Deterministic shuffle then split into ceil(ratio * N) / remainder.
/// Both halves share the parent's MAC table.
std::pair<RadioMap, RadioMap> split_train_val(const RadioMap& map, double ratio,
                                              std::uint64_t seed);

/// Per-axis affine map of the radio-map bounds onto [0, 1]^2.
struct CoordinateTransform {
  double offset_x = 0.0;
  double offset_y = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;

  static CoordinateTransform identity() { return {}; }
  static CoordinateTransform from_bounds(const Bounds& b);

  Location normalize(const Location& p) const {
    return {(p.x - offset_x) / scale_x, (p.y - offset_y) / scale_y};
  }
  Location denormalize(const Location& p) const {
    return {p.x * scale_x + offset_x, p.y * scale_y + offset_y};
  }
  /// Converts a normalized isotropic length into meters.
  double mean_extent() const { return 0.5 * (scale_x + scale_y); }

  friend bool operator==(const CoordinateTransform&, const CoordinateTransform&) = default;
};

/// Returns the map with every location in [0, 1]^2 and the transform that undoes it.
std::pair<RadioMap, CoordinateTransform> normalize_coordinates(const RadioMap& map);

/// Applies `transform.normalize` (or `denormalize` when `inverse`) to every location.
RadioMap transform_locations(const RadioMap& map, const CoordinateTransform& transform,
                             bool inverse);

}  // namespace wifiloc
