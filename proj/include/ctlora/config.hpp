// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Flat `section.key=value` configuration text.

#pragma once

#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>

#include "ctlora/error.hpp"

namespace ctlora::config {

using KeyValues = std::map<std::string, std::string>;

inline std::string strip(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

/// Blank lines and `#` comments are ignored. Later keys override earlier ones.
inline KeyValues parse(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos && eq > 0, Errc::invalid_config,
            "config line " + std::to_string(lineno) + " is not key=value");
    kv[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues load(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::invalid_config, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

inline std::string to_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

/// Typed read-with-default; records every key it touches so unknown keys can be reported.
class Reader {
 public:
  explicit Reader(const KeyValues& kv) : kv_(kv) {}

  template <class V>
  void get(const std::string& key, V& out) {
    seen_[key] = true;
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    std::istringstream is(it->second);
    if constexpr (std::is_same_v<V, bool>) {
      const std::string& s = it->second;
      require(s == "0" || s == "1" || s == "true" || s == "false", Errc::invalid_config, "bad boolean for " + key);
      out = s == "1" || s == "true";
      return;
    } else if constexpr (std::is_same_v<V, std::string>) {
      out = it->second;
      return;
    } else {
      V v{};
      is >> v;
      require(!is.fail() && (is >> std::ws).eof(), Errc::invalid_config, "bad value '" + it->second + "' for " + key);
      out = v;
    }
  }

  /// Keys under `prefix` that no get() call asked for.
  std::string first_unknown(const std::string& prefix) const {
    for (const auto& [k, v] : kv_)
      if (k.rfind(prefix, 0) == 0 && !seen_.count(k)) return k;
    return {};
  }

 private:
  const KeyValues& kv_;
  std::map<std::string, bool> seen_;
};

template <class V>
std::string fmt(const V& v) {
  std::ostringstream os;
  if constexpr (std::is_floating_point_v<V>) os << std::setprecision(17);
  os << v;
  return os.str();
}

}  // namespace ctlora::config
