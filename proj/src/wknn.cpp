#include "wifiloc/wknn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wifiloc {

WknnLocalizer::WknnLocalizer(const RadioMap& map, WknnOptions options)
    : map_(&map), options_(options), n_macs_(map.mac_table().size()) {
  if (options_.k < 1) throw ValidationError("k must be at least 1");
  if (map.size() == 0) throw EmptyMapError("WKNN needs a non-empty radio map");
  rss_.assign(map.size() * static_cast<std::size_t>(n_macs_), options_.missing_rss);
  for (std::size_t i = 0; i < map.size(); ++i) {
    for (const auto& obs : map.samples()[i].fingerprint.entries) {
      rss_[i * static_cast<std::size_t>(n_macs_) +
           static_cast<std::size_t>(*map.mac_table().find(obs.mac))] = obs.rss;
    }
  }
}

GaussianLocation WknnLocalizer::localize(const Fingerprint& fp) const {
  if (fp.entries.empty()) throw EmptyFingerprintError("WKNN query has no entries");

  std::vector<double> query(static_cast<std::size_t>(n_macs_), options_.missing_rss);
  // MACs unknown to the map add the same offset to every distance.
  double unknown_sq = 0.0;
  for (const auto& obs : fp.entries) {
    if (auto idx = map_->mac_table().find(obs.mac)) {
      query[static_cast<std::size_t>(*idx)] = obs.rss;
    } else {
      const double d = obs.rss - options_.missing_rss;
      unknown_sq += d * d;
    }
  }

  const std::size_t n = map_->size();
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = rss_.data() + i * static_cast<std::size_t>(n_macs_);
    double acc = unknown_sq;
    for (int a = 0; a < n_macs_; ++a) {
      const double d = query[static_cast<std::size_t>(a)] - row[a];
      acc += d * d;
    }
    dist[i] = std::sqrt(acc);
  }

  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(options_.k), n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto closer = [&dist](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    closer);

  double wsum = 0.0, mx = 0.0, my = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double w = 1.0 / (dist[order[j]] + 1e-6);
    const auto& loc = map_->samples()[order[j]].location;
    wsum += w;
    mx += w * loc.x;
    my += w * loc.y;
  }
  mx /= wsum;
  my /= wsum;
  double vx = 0.0, vy = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double w = 1.0 / (dist[order[j]] + 1e-6) / wsum;
    const auto& loc = map_->samples()[order[j]].location;
    vx += w * (loc.x - mx) * (loc.x - mx);
    vy += w * (loc.y - my) * (loc.y - my);
  }
  const double sigma = std::max(0.5 * (std::sqrt(vx) + std::sqrt(vy)), options_.sigma_floor);
  return {{mx, my}, sigma};
}

GaussianLocation wknn_localize(const RadioMap& map, const Fingerprint& fp, int k) {
  WknnOptions opts;
  opts.k = k;
  return WknnLocalizer(map, opts).localize(fp);
}

}  // namespace wifiloc
