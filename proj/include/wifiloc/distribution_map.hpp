#pragma once

#include <iosfwd>
#include <vector>

#include "wifiloc/grid.hpp"
#include "wifiloc/types.hpp"

namespace wifiloc {

/// Per-access-point RSS heatmaps over a shared grid. Cell values are the mean
/// normalized RSS of the samples falling in the cell; untouched cells are 0.
class RssDistributionMaps {
 public:
  RssDistributionMaps() = default;
  RssDistributionMaps(GridGeometry geometry, MacTable macs, std::vector<std::vector<double>> grids)
      : geometry_(geometry), macs_(std::move(macs)), grids_(std::move(grids)) {}

  const GridGeometry& geometry() const { return geometry_; }
  const MacTable& mac_table() const { return macs_; }
  int size() const { return static_cast<int>(grids_.size()); }

  const std::vector<double>& grid(int mac_index) const {
    return grids_.at(static_cast<std::size_t>(mac_index));
  }
  const std::vector<double>& grid(const MacId& mac) const;

  /// Writes `mac,row,col,value` for every cell of every map.
  void write_csv(std::ostream& out) const;

 private:
  GridGeometry geometry_;
  MacTable macs_;
  std::vector<std::vector<double>> grids_;
};

/// Grid spans the radio-map bounds padded by one cell on each side.
RssDistributionMaps build_rss_distribution_maps(const RadioMap& map, double cell_size = 1.0);

}  // namespace wifiloc
