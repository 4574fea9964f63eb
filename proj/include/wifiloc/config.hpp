#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace wifiloc {

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t v);

/// Flat `key = value` configuration; `#` starts a comment.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::optional<std::string> find(const std::string& key) const;

  /// Keys starting with `prefix` + ".", with the prefix removed.
  KeyValueConfig section(const std::string& prefix) const;

  /// Throws when a key outside `allowed` is present.
  void check_keys(const std::set<std::string>& allowed, std::string_view context) const;

  /// Canonical text: sorted `key = value` lines. Hashing this gives the config hash.
  std::string canonical() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace wifiloc
