#pragma once

#include <iosfwd>

#include "wifiloc/grid.hpp"
#include "wifiloc/random.hpp"
#include "wifiloc/types.hpp"

namespace wifiloc {

/// How the raw kernel field is scaled before the additive floor.
enum class PriorNormalization {
  Max,   // field / max(field): peak becomes 1
  Mass,  // field / sum(field * cell_area): integrates to 1
};

struct PriorOptions {
  double bandwidth = 1.0;   // meters
  double beta = 1e-4;       // additive floor
  double cell_size = 0.25;  // meters
  PriorNormalization normalization = PriorNormalization::Max;
};

/// Gridded Gaussian-KDE likelihood of where radio-map samples were recorded,
/// floored by beta. Stands in for a floor plan when weighting particles.
class PriorMap {
 public:
  PriorMap() = default;

  const Grid& grid() const { return grid_; }
  const GridGeometry& geometry() const { return grid_.geometry; }
  double beta() const { return beta_; }
  double bandwidth() const { return bandwidth_; }
  /// Kernel field before normalization and floor, i.e. (1/N) sum_i K_h(c - L_i).
  const std::vector<double>& raw_density() const { return raw_; }

  /// Bilinear interpolation between cell centers; exactly beta outside the grid.
  double query(const Location& p) const;

  /// Draws a location by inverse CDF over cell values, uniform within the cell.
  Location sample(Rng& rng) const;

  /// `row,col,x,y,value`.
  void write_csv(std::ostream& out) const;

  friend PriorMap build_prior(const RadioMap& map, const PriorOptions& options);
  /// A constant field of value 1 over `bounds`; weight updates become no-ops.
  static PriorMap uniform(const Bounds& bounds, double cell_size = 0.25);

 private:
  Grid grid_;
  std::vector<double> raw_;
  std::vector<double> cdf_;
  double beta_ = 0.0;
  double bandwidth_ = 0.0;

  void build_cdf();
};

PriorMap build_prior(const RadioMap& map, const PriorOptions& options = {});

}  // namespace wifiloc
