#pragma once

#include <vector>

#include "wifiloc/gaussian_location.hpp"
#include "wifiloc/types.hpp"

namespace wifiloc {

struct WknnOptions {
  int k = 50;
  double missing_rss = -100.0;  // imputed for MACs absent from one side
  double sigma_floor = 0.5;     // meters
};

/// Weighted k-nearest-neighbour fingerprint matcher over a radio map.
/// Distances are Euclidean over the union of MACs; weights are 1 / (d + 1e-6).
class WknnLocalizer {
 public:
  explicit WknnLocalizer(const RadioMap& map, WknnOptions options = {});

  /// sigma is the weighted neighbour dispersion (mean of per-axis stds), floored.
  GaussianLocation localize(const Fingerprint& fp) const;

  const WknnOptions& options() const { return options_; }

 private:
  const RadioMap* map_;
  WknnOptions options_;
  int n_macs_ = 0;
  std::vector<double> rss_;  // N x A, row-major, missing entries imputed
};

GaussianLocation wknn_localize(const RadioMap& map, const Fingerprint& fp, int k = 50);

}  // namespace wifiloc
