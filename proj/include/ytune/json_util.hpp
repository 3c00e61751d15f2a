#pragma once

#include <optional>
#include <set>
#include <string>

#include "json.hpp"
#include "ytune/error.hpp"

namespace ytune {

using Json = nlohmann::json;

/// Reads optional keys from a JSON object and rejects any key never asked for.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + " must be a JSON object");
  }

  template <class T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
    return true;
  }

  /// Nullable key: JSON null maps to nullopt.
  template <class T>
  bool get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    if (j_.at(key).is_null()) {
      out.reset();
      return true;
    }
    T v{};
    try {
      v = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
    out = std::move(v);
    return true;
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + ctx_ + "." + k + "'");
  }

 private:
  const Json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace ytune
