#pragma once

// Flat key=value configuration text. One setting per line, '#' comments,
// surrounding whitespace ignored. Readers take the keys they understand;
// anything left over is an error.

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvdiff/error.hpp"

namespace mvdiff {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::istream& in, const std::string& origin = "<config>") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues parse_string(const std::string& text, const std::string& origin = "<config>") {
    std::istringstream in(text);
    return parse(in, origin);
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path, "cannot open config file");
    return parse(in, path);
  }

  void save(const std::string& path, const std::string& header = "") const {
    std::ofstream out(path);
    if (!out) throw IoError(path, "cannot write config file");
    if (!header.empty()) out << "# " << header << '\n';
    out << str();
    if (!out) throw IoError(path, "write failed");
  }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("config: empty key");
    values_[key] = value;
  }
  template <class V>
  void set_value(const std::string& key, const V& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string require_str(const std::string& key) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end() || it->second.empty()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
  }

  template <class N>
  N get_number(const std::string& key, N fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_number<N>(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& v = it->second;
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
  }

  template <class N>
  std::vector<N> get_list(const std::string& key, const std::vector<N>& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<N> out;
    std::string item;
    std::istringstream is(it->second);
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(to_number<N>(key, item));
    }
    return out;
  }

  /// Throws if any key was never read.
  void reject_unknown(const std::string& context) const {
    std::string unknown;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    if (!unknown.empty()) throw ConfigError(context + ": unknown key(s): " + unknown);
  }

 private:
  template <class N>
  static N to_number(const std::string& key, const std::string& text) {
    N value{};
    const char* b = text.data();
    const char* e = b + text.size();
    auto [ptr, ec] = std::from_chars(b, e, value);
    if (ec != std::errc() || ptr != e)
      throw ConfigError("config: key '" + key + "' expects a number, got '" + text + "'");
    return value;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

template <class N>
std::string join_list(const std::vector<N>& v) {
  std::ostringstream os;
  os.precision(17);
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace mvdiff
