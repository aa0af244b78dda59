#pragma once

// key = value text files used for run configs and dataset manifests.
// '#' starts a comment; blank lines are ignored; keys are unique.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "prnet/errors.hpp"
#include "prnet/pointset.hpp"

namespace prnet {

class KeyValues {
 public:
  using Map = std::map<std::string, std::string>;

  KeyValues() = default;
  explicit KeyValues(Map values) : values_(std::move(values)) {}

  static KeyValues parse(std::istream& in, const std::string& source) {
    KeyValues kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(source, line_no, "expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ParseError(source, line_no, "empty key");
      if (!kv.values_.emplace(key, value).second) throw ParseError(source, line_no, "duplicate key '" + key + "'");
    }
    return kv;
  }

  static KeyValues read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    return parse(in, path);
  }

  void write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write(out);
    if (!out) throw IoError("failed writing " + path);
  }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const Map& values() const { return values_; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, double value) { values_[key] = format_double(value); }
  void set(const std::string& key, std::uint64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw FormatError("missing key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const { return number<double>(key); }
  std::uint64_t u64(const std::string& key) const { return number<std::uint64_t>(key); }
  int integer(const std::string& key) const { return number<int>(key); }

  /// Copies `key` into `out` when present.
  template <typename V>
  void maybe(const std::string& key, V& out) const {
    if (!contains(key)) return;
    if constexpr (std::is_same_v<V, std::string>) {
      out = text(key);
    } else {
      out = number<V>(key);
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  template <typename V>
  V number(const std::string& key) const {
    const std::string& s = text(key);
    V v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw FormatError("key '" + key + "': not a valid number: '" + s + "'");
    }
    return v;
  }

  Map values_;
};

}  // namespace prnet
