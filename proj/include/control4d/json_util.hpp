#pragma once

#include <array>
#include <initializer_list>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

#include "control4d/errors.hpp"

namespace c4d::jsonu {

using nlohmann::json;

/// Rejects keys outside `allowed` with ConfigError.
inline void require_keys_subset(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& j, std::string_view key, T& out, std::string_view where) {
  const std::string k(key);
  if (!j.contains(k)) return;
  try {
    out = j.at(k).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(where) + "." + k + ": " + e.what());
  }
}

template <class T, size_t N>
void read_array(const json& j, std::string_view key, std::array<T, N>& out, std::string_view where) {
  const std::string k(key);
  if (!j.contains(k)) return;
  const auto& a = j.at(k);
  if (!a.is_array() || a.size() != N) {
    throw ConfigError(std::string(where) + "." + k + ": expected an array of " + std::to_string(N));
  }
  try {
    for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(where) + "." + k + ": " + e.what());
  }
}

}  // namespace c4d::jsonu
