#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wifiloc {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class EmptyMapError : public Error {
 public:
  using Error::Error;
};

/// Raised when none of a fingerprint's MACs are known to the model or map.
class EmptyFingerprintError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Signal strength limits
// ---------------------------------------------------------------------------

inline constexpr double kRssMin = -120.0;
inline constexpr double kRssMax = 0.0;

/// Linear map of [-120, 0] dBm onto [0, 1].
inline double normalize_rss(double rss) { return (rss - kRssMin) / (kRssMax - kRssMin); }

// ---------------------------------------------------------------------------
// MAC addresses
// ---------------------------------------------------------------------------

/// Canonical 12-hex-digit lowercase access point identifier.
class MacId {
 public:
  MacId() = default;

  /// Accepts "AA:BB:CC:DD:EE:FF", "aa-bb-..." or "aabbccddeeff".
  static MacId parse(std::string_view text);

  const std::string& str() const { return raw_; }

  friend bool operator==(const MacId&, const MacId&) = default;
  friend auto operator<=>(const MacId&, const MacId&) = default;

 private:
  explicit MacId(std::string raw) : raw_(std::move(raw)) {}
  std::string raw_;
};

/// Dense index over the distinct MACs of a radio map, first-appearance order.
class MacTable {
 public:
  /// Returns the existing index, or assigns the next one.
  int intern(const MacId& mac);
  std::optional<int> find(const MacId& mac) const;
  const MacId& at(int index) const { return macs_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(macs_.size()); }
  const std::vector<MacId>& macs() const { return macs_; }

  /// FNV-1a over the canonical MAC strings in index order.
  std::uint64_t hash() const;

  friend bool operator==(const MacTable& a, const MacTable& b) { return a.macs_ == b.macs_; }

 private:
  std::vector<MacId> macs_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct Location {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Location&, const Location&) = default;
};

inline double distance(const Location& a, const Location& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

struct Bounds {
  double min_x = 0.0;
  double min_y = 0.0;
  double max_x = 0.0;
  double max_y = 0.0;

  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  bool contains(const Location& p) const {
    return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
  }
  void expand(const Location& p);
  static Bounds around(const Location& p) { return {p.x, p.y, p.x, p.y}; }

  friend bool operator==(const Bounds&, const Bounds&) = default;
};

// ---------------------------------------------------------------------------
// Fingerprints and radio maps
// ---------------------------------------------------------------------------

struct Observation {
  MacId mac;
  double rss = 0.0;  // dBm

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct Fingerprint {
  std::vector<Observation> entries;
  double timestamp = 0.0;

  std::size_t size() const { return entries.size(); }
  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

/// Throws ValidationError on empty, duplicate-MAC or out-of-range fingerprints.
void validate(const Fingerprint& fp);

struct Sample {
  Fingerprint fingerprint;
  Location location;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// A crowdsourced database of (fingerprint, location) pairs.
class RadioMap {
 public:
  RadioMap() = default;

  /// Builds the MAC table in first-appearance order and the location bounds.
  static RadioMap from_samples(std::vector<Sample> samples);

  /// Keeps an existing MAC table; used for splits that must share the parent's indexing.
  static RadioMap with_mac_table(std::vector<Sample> samples, MacTable table);

  const std::vector<Sample>& samples() const { return samples_; }
  const Bounds& bounds() const { return bounds_; }
  const MacTable& mac_table() const { return macs_; }
  std::size_t size() const { return samples_.size(); }

  friend bool operator==(const RadioMap&, const RadioMap&) = default;

 private:
  std::vector<Sample> samples_;
  Bounds bounds_;
  MacTable macs_;
};

}  // namespace wifiloc
