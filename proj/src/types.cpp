#include "wifiloc/types.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_set>

namespace wifiloc {

MacId MacId::parse(std::string_view text) {
  std::string raw;
  raw.reserve(12);
  for (char c : text) {
    if (c == ':' || c == '-' || c == '.') continue;
    if (!std::isxdigit(static_cast<unsigned char>(c))) {
      throw ValidationError("invalid MAC address '" + std::string(text) + "'");
    }
    raw.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (raw.size() != 12) {
    throw ValidationError("MAC address must have 12 hex digits: '" + std::string(text) + "'");
  }
  return MacId(std::move(raw));
}

int MacTable::intern(const MacId& mac) {
  auto [it, inserted] = index_.try_emplace(mac.str(), static_cast<int>(macs_.size()));
  if (inserted) macs_.push_back(mac);
  return it->second;
}

std::optional<int> MacTable::find(const MacId& mac) const {
  auto it = index_.find(mac.str());
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t MacTable::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& mac : macs_) {
    for (char c : mac.str()) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  }
  return h;
}

void Bounds::expand(const Location& p) {
  min_x = std::min(min_x, p.x);
  min_y = std::min(min_y, p.y);
  max_x = std::max(max_x, p.x);
  max_y = std::max(max_y, p.y);
}

void validate(const Fingerprint& fp) {
  if (fp.entries.empty()) throw ValidationError("fingerprint has no entries");
  std::unordered_set<std::string> seen;
  for (const auto& obs : fp.entries) {
    if (!std::isfinite(obs.rss) || obs.rss < kRssMin || obs.rss > kRssMax) {
      throw ValidationError("RSS " + std::to_string(obs.rss) + " dBm outside [-120, 0]");
    }
    if (!seen.insert(obs.mac.str()).second) {
      throw ValidationError("duplicate MAC " + obs.mac.str() + " in fingerprint");
    }
  }
}

namespace {

Bounds bounds_of(const std::vector<Sample>& samples) {
  Bounds b = Bounds::around(samples.front().location);
  for (const auto& s : samples) b.expand(s.location);
  return b;
}

void check_samples(const std::vector<Sample>& samples) {
  if (samples.empty()) throw EmptyMapError("radio map has no samples");
  for (const auto& s : samples) {
    validate(s.fingerprint);
    if (!std::isfinite(s.location.x) || !std::isfinite(s.location.y)) {
      throw ValidationError("non-finite sample location");
    }
  }
}

}  // namespace

RadioMap RadioMap::from_samples(std::vector<Sample> samples) {
  check_samples(samples);
  RadioMap map;
  for (const auto& s : samples) {
    for (const auto& obs : s.fingerprint.entries) map.macs_.intern(obs.mac);
  }
  map.bounds_ = bounds_of(samples);
  map.samples_ = std::move(samples);
  return map;
}

RadioMap RadioMap::with_mac_table(std::vector<Sample> samples, MacTable table) {
  check_samples(samples);
  for (const auto& s : samples) {
    for (const auto& obs : s.fingerprint.entries) {
      if (!table.find(obs.mac)) {
        throw ValidationError("MAC " + obs.mac.str() + " missing from shared MAC table");
      }
    }
  }
  RadioMap map;
  map.bounds_ = bounds_of(samples);
  map.samples_ = std::move(samples);
  map.macs_ = std::move(table);
  return map;
}

}  // namespace wifiloc
