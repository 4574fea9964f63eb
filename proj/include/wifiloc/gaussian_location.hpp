#pragma once

#include "wifiloc/types.hpp"

namespace wifiloc {

/// A location estimate with an isotropic standard deviation.
struct GaussianLocation {
  Location mu;
  double sigma = 1.0;

  friend bool operator==(const GaussianLocation&, const GaussianLocation&) = default;
};

}  // namespace wifiloc
