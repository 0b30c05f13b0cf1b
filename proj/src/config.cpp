#include "mbd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mbd/errors.hpp"

namespace mbd {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_ws_or_comma(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ' ' || ch == '\t' || ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

} // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.erase(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    cfg.values_[key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  return parse_string(read_text_file(path));
}

const std::string& KeyValueConfig::get_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key: " + key);
  return it->second;
}

std::string KeyValueConfig::get_string_or(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key) const {
  const std::string& s = get_string(key);
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: `" + s + "`");
  }
}

double KeyValueConfig::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
  const std::string& s = get_string(key);
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("config key " + key + ": not an integer: `" + s + "`");
  return v;
}

std::int64_t KeyValueConfig::get_int_or(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

bool KeyValueConfig::get_bool_or(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& s = get_string(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key " + key + ": not a boolean: `" + s + "`");
}

std::vector<double> KeyValueConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& tok : split_ws_or_comma(get_string(key))) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not a number: `" + tok + "`");
    }
  }
  return out;
}

std::vector<std::int64_t> KeyValueConfig::get_int_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& tok : split_ws_or_comma(get_string(key))) {
    std::int64_t v = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
      throw ConfigError("config key " + key + ": not an integer: `" + tok + "`");
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> KeyValueConfig::get_string_list(const std::string& key) const {
  return split_ws_or_comma(get_string(key));
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

void KeyValueConfig::set_double(const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  values_[key] = buf;
}

void KeyValueConfig::set_int(const std::string& key, std::int64_t value) {
  values_[key] = std::to_string(value);
}

std::string KeyValueConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

std::uint64_t KeyValueConfig::hash() const {
  const std::string text = canonical_text();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace mbd
