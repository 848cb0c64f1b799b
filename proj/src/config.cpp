#include "mqe_align/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mqe_align/error.hpp"
#include "mqe_align/profiles_embedded.hpp"
#include "mqe_align/rng.hpp"

namespace mqe {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::map<std::string, std::string> parse_lines(std::string_view text, std::string_view origin) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line_no;
    std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    }
    if (out.count(key)) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": duplicate key '" +
                        key + "'");
    }
    out.emplace(std::move(key), std::move(value));
  }
  return out;
}

}  // namespace

const std::vector<std::string>& Config::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [key, value] : parse_lines(embedded::kDeskProfile, "desk.profile")) {
      k.push_back(key);
    }
    return k;
  }();
  return keys;
}

Config Config::profile(std::string_view name) {
  if (name == "desk") return parse(embedded::kDeskProfile, "desk.profile");
  if (name == "paper") return parse(embedded::kPaperProfile, "paper.profile");
  throw ConfigError("unknown profile '" + std::string(name) + "' (expected desk or paper)");
}

Config Config::parse(std::string_view text, std::string_view origin) {
  Config cfg;
  const auto& known = known_keys();
  for (auto& [key, value] : parse_lines(text, origin)) {
    if (!std::binary_search(known.begin(), known.end(), key)) {
      throw ConfigError(std::string(origin) + ": unknown key '" + key + "'");
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  const auto& known = known_keys();
  if (!std::binary_search(known.begin(), known.end(), key)) {
    throw ConfigError("unknown key '" + key + "'");
  }
  values_[key] = value;
}

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
  return it->second;
}

std::int64_t Config::integer(const std::string& key) const {
  const auto& s = str(key);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': '" + s + "' is not an integer");
  }
  return v;
}

double Config::real(const std::string& key) const {
  const auto& s = str(key);
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + s + "' is not a number");
  }
}

bool Config::flag(const std::string& key) const {
  const auto& s = str(key);
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError("key '" + key + "': '" + s + "' is not a boolean");
}

std::vector<std::string> Config::list(const std::string& key) const {
  std::vector<std::string> out;
  const auto& s = str(key);
  std::size_t pos = 0;
  while (pos < s.size()) {
    auto comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    auto item = trim(std::string_view(s).substr(pos, comma - pos));
    if (!item.empty()) out.push_back(std::move(item));
    pos = comma + 1;
  }
  return out;
}

std::vector<std::int64_t> Config::int_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& item : list(key)) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("key '" + key + "': '" + item + "' is not an integer");
    }
    out.push_back(v);
  }
  return out;
}

std::string Config::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t Config::hash() const { return fnv1a(dump()); }

std::string Config::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

}  // namespace mqe
