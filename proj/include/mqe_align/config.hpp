#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mqe {

/// Flat dotted-key configuration (`key = value` lines, `#` comments).
///
/// The key vocabulary is fixed by the built-in desk profile; setting any other
/// key is a ConfigError. Values are kept as text and parsed on access.
class Config {
 public:
  /// Built-in profile by name ("desk" or "paper").
  static Config profile(std::string_view name);
  /// Parses profile text. Every key must belong to the vocabulary.
  static Config parse(std::string_view text, std::string_view origin);
  static Config load(const std::string& path);

  static const std::vector<std::string>& known_keys();

  void set(const std::string& key, const std::string& value);
  /// "key=value" form used by --set.
  void apply_override(std::string_view assignment);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  /// Comma-separated list; empty string yields an empty list.
  std::vector<std::string> list(const std::string& key) const;
  std::vector<std::int64_t> int_list(const std::string& key) const;

  /// Canonical text (sorted `key = value` lines); stable across runs.
  std::string dump() const;
  /// FNV-1a of dump(), used to tag checkpoints.
  std::uint64_t hash() const;
  std::string hash_hex() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mqe
