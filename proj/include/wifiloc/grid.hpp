#pragma once

#include <cmath>
#include <vector>

#include "wifiloc/types.hpp"

namespace wifiloc {

/// Axis-aligned cell layout. Row index follows y, column index follows x.
struct GridGeometry {
  Location origin;  // lower-left corner of cell (0, 0)
  double cell_size = 1.0;
  int rows = 0;
  int cols = 0;

  std::size_t cell_count() const { return static_cast<std::size_t>(rows) * cols; }
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * cols + col;
  }
  Location cell_center(int row, int col) const {
    return {origin.x + (col + 0.5) * cell_size, origin.y + (row + 0.5) * cell_size};
  }
  /// Cell containing `p`, or false when `p` lies outside the grid.
  bool locate(const Location& p, int& row, int& col) const {
    const double fx = (p.x - origin.x) / cell_size;
    const double fy = (p.y - origin.y) / cell_size;
    if (!(fx >= 0.0 && fy >= 0.0 && fx < cols && fy < rows)) return false;
    col = static_cast<int>(std::floor(fx));
    row = static_cast<int>(std::floor(fy));
    return true;
  }

  /// Covers `b` with `pad` extra cells on every side.
  static GridGeometry covering(const Bounds& b, double cell_size, int pad);

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Row-major scalar field over a GridGeometry.
struct Grid {
  GridGeometry geometry;
  std::vector<double> values;

  explicit Grid(GridGeometry g = {}, double fill = 0.0)
      : geometry(g), values(g.cell_count(), fill) {}

  double& at(int row, int col) { return values[geometry.index(row, col)]; }
  double at(int row, int col) const { return values[geometry.index(row, col)]; }
};

/// Resamples a rows x cols array onto size x size. Each output pixel takes the
/// maximum of the source cells its footprint intersects, so isolated
/// observations survive downsampling.
std::vector<double> resample_max(const std::vector<double>& src, int rows, int cols, int size);

}  // namespace wifiloc
