#pragma once

// Flat key/value experiment configuration. Every error names the source and,
// for file-backed configs, the line the offending key sits on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "starflow/error.hpp"

namespace starflow {

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class Config {
 public:
  using Json = nlohmann::json;

  Config() : json_(Json::object()), source_("<defaults>") {}

  static Config from_json(Json j, std::string source = "<inline>") {
    if (!j.is_object()) throw ConfigError(source + ": configuration must be a JSON object");
    Config c;
    c.json_ = std::move(j);
    c.source_ = std::move(source);
    for (const auto& [k, v] : c.json_.items()) {
      if (v.is_object()) throw ConfigError(c.where(k) + ": key '" + k + "' must not be a nested object");
    }
    return c;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open configuration file");
    std::stringstream ss;
    ss << in.rdbuf();
    Json j;
    try {
      j = Json::parse(ss.str());
    } catch (const Json::parse_error& e) {
      // byte offset -> line
      const std::string text = ss.str();
      std::size_t line = 1;
      for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i) line += text[i] == '\n';
      throw ConfigError(path + ":" + std::to_string(line) + ": invalid JSON (" + e.what() + ")");
    }
    Config c = from_json(std::move(j), path);
    c.text_ = ss.str();
    return c;
  }

  bool has(const std::string& key) const { return json_.contains(key) && !json_.at(key).is_null(); }

  template <class T>
  T get(const std::string& key, const T& fallback) const {
    used_.insert(key);
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) const {
    used_.insert(key);
    if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
    return convert<T>(key);
  }

  // Sets a default without marking it as user supplied.
  void set(const std::string& key, Json value) { json_[key] = std::move(value); }

  // Keys present in the file that no experiment step asked for.
  void reject_unused() const {
    for (const auto& [k, v] : json_.items()) {
      if (!used_.count(k)) throw ConfigError(where(k) + ": unknown key '" + k + "'");
    }
  }

  const Json& json() const { return json_; }
  const std::string& source() const { return source_; }

  std::string where(const std::string& key) const {
    if (text_.empty()) return source_;
    const auto pos = text_.find("\"" + key + "\"");
    if (pos == std::string::npos) return source_;
    std::size_t line = 1;
    for (std::size_t i = 0; i < pos; ++i) line += text_[i] == '\n';
    return source_ + ":" + std::to_string(line);
  }

 private:
  template <class T>
  T convert(const std::string& key) const {
    const Json& v = json_.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer() && !(v.is_number() && v.get<double>() == std::floor(v.get<double>()))) {
          throw ConfigError("expected an integer");
        }
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<double>() < 0.0) throw ConfigError("expected a non-negative integer");
        }
        return static_cast<T>(v.get<double>());
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      }
      return v.get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": key '" + key + "': " + e.what());
    } catch (const Json::exception& e) {
      throw ConfigError(where(key) + ": key '" + key + "': " + e.what());
    }
  }

  Json json_;
  std::string source_;
  std::string text_;
  mutable std::set<std::string> used_;
};

}  // namespace starflow
