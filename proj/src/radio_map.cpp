#include "wifiloc/radio_map.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace wifiloc {

using nlohmann::json;

namespace {

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

Sample parse_sample(const std::string& line, std::size_t lineno) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(lineno, e.what());
  }
  if (!j.is_object() || !j.contains("fp") || !j.contains("loc")) {
    throw ParseError(lineno, "expected object with 'fp' and 'loc'");
  }
  Sample s;
  try {
    const auto& fp = j.at("fp");
    if (!fp.is_array()) throw ParseError(lineno, "'fp' must be an array");
    for (const auto& entry : fp) {
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() ||
          !entry[1].is_number()) {
        throw ParseError(lineno, "fingerprint entries must be [\"<mac>\", <rss>]");
      }
      s.fingerprint.entries.push_back(
          {MacId::parse(entry[0].get<std::string>()), entry[1].get<double>()});
    }
    const auto& loc = j.at("loc");
    if (!loc.is_array() || loc.size() != 2 || !loc[0].is_number() || !loc[1].is_number()) {
      throw ParseError(lineno, "'loc' must be [x, y]");
    }
    s.location = {loc[0].get<double>(), loc[1].get<double>()};
    if (j.contains("t")) {
      if (!j["t"].is_number()) throw ParseError(lineno, "'t' must be a number");
      s.fingerprint.timestamp = j["t"].get<double>();
    }
  } catch (const ValidationError& e) {
    throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
  }
  try {
    validate(s.fingerprint);
  } catch (const ValidationError& e) {
    throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
  }
  return s;
}

}  // namespace

RadioMap read_radio_map(std::istream& in) {
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    samples.push_back(parse_sample(line, lineno));
  }
  if (samples.empty()) throw EmptyMapError("radio map file contains no samples");
  return RadioMap::from_samples(std::move(samples));
}

RadioMap load_radio_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open radio map " + path.string());
  return read_radio_map(in);
}

void write_radio_map(const RadioMap& map, std::ostream& out) {
  for (const auto& s : map.samples()) {
    nlohmann::ordered_json j;
    auto fp = nlohmann::ordered_json::array();
    for (const auto& obs : s.fingerprint.entries) fp.push_back({obs.mac.str(), obs.rss});
    j["fp"] = std::move(fp);
    j["loc"] = {s.location.x, s.location.y};
    j["t"] = s.fingerprint.timestamp;
    out << j.dump() << '\n';
  }
}

void save_radio_map(const RadioMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write radio map " + path.string());
  write_radio_map(map, out);
}

std::pair<RadioMap, RadioMap> split_train_val(const RadioMap& map, double ratio,
                                              std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("split ratio must be in (0, 1)");
  const std::size_t n = map.size();
  if (n < 2) throw ValidationError("need at least 2 samples to split");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // 1e-9 absorbs representation error, e.g. 0.9 * 10.
  auto n_train = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  std::vector<Sample> train, val;
  train.reserve(n_train);
  val.reserve(n - n_train);
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? train : val).push_back(map.samples()[order[i]]);
  }
  return {RadioMap::with_mac_table(std::move(train), map.mac_table()),
          RadioMap::with_mac_table(std::move(val), map.mac_table())};
}

CoordinateTransform CoordinateTransform::from_bounds(const Bounds& b) {
  if (!(b.width() > 0.0) || !(b.height() > 0.0)) {
    throw ValidationError("degenerate bounds: both axes need non-zero extent");
  }
  return {b.min_x, b.min_y, b.width(), b.height()};
}

RadioMap transform_locations(const RadioMap& map, const CoordinateTransform& transform,
                             bool inverse) {
  std::vector<Sample> samples = map.samples();
  for (auto& s : samples) {
    s.location = inverse ? transform.denormalize(s.location) : transform.normalize(s.location);
  }
  return RadioMap::with_mac_table(std::move(samples), map.mac_table());
}

std::pair<RadioMap, CoordinateTransform> normalize_coordinates(const RadioMap& map) {
  auto t = CoordinateTransform::from_bounds(map.bounds());
  return {transform_locations(map, t, false), t};
}

}  // namespace wifiloc
