#include "wifiloc/prior_map.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "wifiloc/config.hpp"

namespace wifiloc {

PriorMap build_prior(const RadioMap& map, const PriorOptions& options) {
  if (map.size() == 0) throw EmptyMapError("cannot build a prior from an empty radio map");
  if (!(options.bandwidth > 0.0)) throw ValidationError("KDE bandwidth must be positive");
  if (!(options.beta > 0.0)) throw ValidationError("beta must be positive");

  const double h = options.bandwidth;
  // Cell centers sit on min_x + k * cell_size; at least 3h of margin on every side.
  const double cs = options.cell_size;
  if (!(cs > 0.0)) throw ValidationError("cell size must be positive");
  const int pad = static_cast<int>(std::ceil(3.0 * h / cs + 0.5));
  GridGeometry geom;
  geom.cell_size = cs;
  geom.origin = {map.bounds().min_x - (pad + 0.5) * cs, map.bounds().min_y - (pad + 0.5) * cs};
  geom.cols = static_cast<int>(std::floor(map.bounds().width() / cs)) + 2 + 2 * pad;
  geom.rows = static_cast<int>(std::floor(map.bounds().height() / cs)) + 2 + 2 * pad;

  PriorMap prior;
  prior.beta_ = options.beta;
  prior.bandwidth_ = h;
  prior.grid_ = Grid(geom);
  prior.raw_.assign(geom.cell_count(), 0.0);

  // The isotropic kernel factorizes: exp(-(dx^2 + dy^2) / 2h^2) = ex(dx) * ey(dy).
  const double inv_2h2 = 1.0 / (2.0 * h * h);
  const double norm = 1.0 / (2.0 * std::numbers::pi * h * h * static_cast<double>(map.size()));
  std::vector<double> ex(static_cast<std::size_t>(geom.cols));
  std::vector<double> ey(static_cast<std::size_t>(geom.rows));
  for (const auto& s : map.samples()) {
    for (int c = 0; c < geom.cols; ++c) {
      const double dx = geom.cell_center(0, c).x - s.location.x;
      ex[static_cast<std::size_t>(c)] = std::exp(-dx * dx * inv_2h2);
    }
    for (int r = 0; r < geom.rows; ++r) {
      const double dy = geom.cell_center(r, 0).y - s.location.y;
      ey[static_cast<std::size_t>(r)] = std::exp(-dy * dy * inv_2h2);
    }
    for (int r = 0; r < geom.rows; ++r) {
      const double fy = ey[static_cast<std::size_t>(r)] * norm;
      double* row = prior.raw_.data() + geom.index(r, 0);
      for (int c = 0; c < geom.cols; ++c) row[c] += fy * ex[static_cast<std::size_t>(c)];
    }
  }

  double scale = 1.0;
  if (options.normalization == PriorNormalization::Max) {
    scale = *std::max_element(prior.raw_.begin(), prior.raw_.end());
  } else {
    double mass = 0.0;
    for (double v : prior.raw_) mass += v;
    scale = mass * options.cell_size * options.cell_size;
  }
  if (!(scale > 0.0)) throw NumericError("kernel density underflowed everywhere");
  for (std::size_t i = 0; i < prior.raw_.size(); ++i) {
    prior.grid_.values[i] = prior.raw_[i] / scale + options.beta;
  }
  prior.build_cdf();
  return prior;
}

PriorMap PriorMap::uniform(const Bounds& bounds, double cell_size) {
  PriorMap prior;
  prior.grid_ = Grid(GridGeometry::covering(bounds, cell_size, 1), 1.0);
  prior.raw_.assign(prior.grid_.values.size(), 0.0);
  prior.beta_ = 1.0;
  prior.bandwidth_ = 0.0;
  prior.build_cdf();
  return prior;
}

void PriorMap::build_cdf() {
  cdf_.resize(grid_.values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < cdf_.size(); ++i) {
    acc += grid_.values[i];
    cdf_[i] = acc;
  }
}

double PriorMap::query(const Location& p) const {
  const auto& g = grid_.geometry;
  int row = 0, col = 0;
  if (!g.locate(p, row, col)) return beta_;
  // Continuous index relative to cell centers, clamped at the outer half cells.
  const double fx = std::clamp((p.x - g.origin.x) / g.cell_size - 0.5, 0.0, g.cols - 1.0);
  const double fy = std::clamp((p.y - g.origin.y) / g.cell_size - 0.5, 0.0, g.rows - 1.0);
  const int c0 = std::min(static_cast<int>(fx), g.cols - 1);
  const int r0 = std::min(static_cast<int>(fy), g.rows - 1);
  const int c1 = std::min(c0 + 1, g.cols - 1);
  const int r1 = std::min(r0 + 1, g.rows - 1);
  const double tx = fx - c0;
  const double ty = fy - r0;
  const double top = (1.0 - tx) * grid_.at(r0, c0) + tx * grid_.at(r0, c1);
  const double bottom = (1.0 - tx) * grid_.at(r1, c0) + tx * grid_.at(r1, c1);
  return (1.0 - ty) * top + ty * bottom;
}

Location PriorMap::sample(Rng& rng) const {
  const double u = wifiloc::uniform(rng, 0.0, cdf_.back());
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  auto idx = static_cast<std::size_t>(std::distance(cdf_.begin(), it));
  idx = std::min(idx, cdf_.size() - 1);
  const auto& g = grid_.geometry;
  const int row = static_cast<int>(idx / static_cast<std::size_t>(g.cols));
  const int col = static_cast<int>(idx % static_cast<std::size_t>(g.cols));
  return {g.origin.x + (col + wifiloc::uniform(rng, 0.0, 1.0)) * g.cell_size,
          g.origin.y + (row + wifiloc::uniform(rng, 0.0, 1.0)) * g.cell_size};
}

void PriorMap::write_csv(std::ostream& out) const {
  const auto& g = grid_.geometry;
  out << "row,col,x,y,value\n";
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const Location ctr = g.cell_center(r, c);
      out << r << ',' << c << ',' << format_double(ctr.x) << ',' << format_double(ctr.y) << ','
          << format_double(grid_.at(r, c)) << '\n';
    }
  }
}

}  // namespace wifiloc
