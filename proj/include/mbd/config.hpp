#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mbd {

// Flat key-value store for structured-text files (.cfg, .vhdr, experiment
// configs). Lines are `key = value`; `[section]` headers prefix subsequent
// keys as `section.key`; `#` starts a comment. Values keep their raw text,
// typed access parses on demand and reports the offending key on failure.
class KeyValueConfig {
public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& get_string(const std::string& key) const;
  std::string get_string_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double value);
  void set_int(const std::string& key, std::int64_t value);

  // Deterministic serialization: sorted keys, one `key = value` per line.
  // Comments and ordering of the source never affect this output, so its
  // hash changes iff a semantically meaningful field changes.
  std::string canonical_text() const;
  std::uint64_t hash() const; // FNV-1a over canonical_text()

  const std::map<std::string, std::string>& entries() const { return values_; }

private:
  std::map<std::string, std::string> values_;
};

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

} // namespace mbd
