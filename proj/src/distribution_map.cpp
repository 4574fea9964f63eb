#include "wifiloc/distribution_map.hpp"

#include <algorithm>
#include <ostream>

#include "wifiloc/grid.hpp"

namespace wifiloc {

GridGeometry GridGeometry::covering(const Bounds& b, double cell_size, int pad) {
  if (!(cell_size > 0.0)) throw ValidationError("cell size must be positive");
  GridGeometry g;
  g.cell_size = cell_size;
  g.origin = {b.min_x - pad * cell_size, b.min_y - pad * cell_size};
  g.cols = static_cast<int>(std::floor(b.width() / cell_size)) + 1 + 2 * pad;
  g.rows = static_cast<int>(std::floor(b.height() / cell_size)) + 1 + 2 * pad;
  return g;
}

std::vector<double> resample_max(const std::vector<double>& src, int rows, int cols, int size) {
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  auto span = [size](int i, int n, int& lo, int& hi) {
    lo = static_cast<int>(static_cast<long>(i) * n / size);
    hi = static_cast<int>((static_cast<long>(i + 1) * n + size - 1) / size) - 1;
    hi = std::max(hi, lo);
  };
  for (int r = 0; r < size; ++r) {
    int r_lo, r_hi;
    span(r, rows, r_lo, r_hi);
    for (int c = 0; c < size; ++c) {
      int c_lo, c_hi;
      span(c, cols, c_lo, c_hi);
      double v = 0.0;
      for (int sr = r_lo; sr <= r_hi; ++sr) {
        for (int sc = c_lo; sc <= c_hi; ++sc) {
          v = std::max(v, src[static_cast<std::size_t>(sr) * cols + sc]);
        }
      }
      out[static_cast<std::size_t>(r) * size + c] = v;
    }
  }
  return out;
}

const std::vector<double>& RssDistributionMaps::grid(const MacId& mac) const {
  auto idx = macs_.find(mac);
  if (!idx) throw ValidationError("no distribution map for MAC " + mac.str());
  return grid(*idx);
}

void RssDistributionMaps::write_csv(std::ostream& out) const {
  out << "mac,row,col,value\n";
  for (int m = 0; m < size(); ++m) {
    const auto& g = grids_[static_cast<std::size_t>(m)];
    for (int r = 0; r < geometry_.rows; ++r) {
      for (int c = 0; c < geometry_.cols; ++c) {
        out << macs_.at(m).str() << ',' << r << ',' << c << ',' << g[geometry_.index(r, c)]
            << '\n';
      }
    }
  }
}

RssDistributionMaps build_rss_distribution_maps(const RadioMap& map, double cell_size) {
  if (map.size() == 0) throw EmptyMapError("radio map has no samples");
  const GridGeometry geom = GridGeometry::covering(map.bounds(), cell_size, 1);
  const int n_macs = map.mac_table().size();

  // Contributions are sorted per cell before summing so the mean does not
  // depend on sample order.
  std::vector<std::vector<std::vector<double>>> contributions(
      static_cast<std::size_t>(n_macs), std::vector<std::vector<double>>(geom.cell_count()));
  for (const auto& s : map.samples()) {
    int row = 0, col = 0;
    if (!geom.locate(s.location, row, col)) continue;  // cannot happen: grid covers bounds
    for (const auto& obs : s.fingerprint.entries) {
      const int m = *map.mac_table().find(obs.mac);
      contributions[static_cast<std::size_t>(m)][geom.index(row, col)].push_back(obs.rss);
    }
  }

  std::vector<std::vector<double>> grids(static_cast<std::size_t>(n_macs),
                                         std::vector<double>(geom.cell_count(), 0.0));
  for (int m = 0; m < n_macs; ++m) {
    auto& cells = contributions[static_cast<std::size_t>(m)];
    for (std::size_t i = 0; i < cells.size(); ++i) {
      auto& values = cells[i];
      if (values.empty()) continue;
      std::sort(values.begin(), values.end());
      double sum = 0.0;
      for (double v : values) sum += v;
      grids[static_cast<std::size_t>(m)][i] =
          std::clamp(normalize_rss(sum / static_cast<double>(values.size())), 0.0, 1.0);
    }
  }
  return RssDistributionMaps(geom, map.mac_table(), std::move(grids));
}

}  // namespace wifiloc
