#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "traice3d/ops.hpp"

namespace traice3d::json_fields {

/// Reads a [W, H, D] array of positive integers into (d, h, w).
inline Extent3 whd(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument(path + ": expected [W, H, D]");
  for (std::size_t i = 0; i < 3; ++i)
    if (!j[i].is_number_integer() || j[i].get<Index>() <= 0)
      throw std::invalid_argument(path + "[" + std::to_string(i) + "]: expected a positive integer");
  return {j[2].get<Index>(), j[1].get<Index>(), j[0].get<Index>()};
}

inline nlohmann::json whd_json(Extent3 e) { return {e.w, e.h, e.d}; }

/// `j[key]` converted to T, or `fallback` when absent.
template <class T>
T field(const nlohmann::json& j, const char* key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  const nlohmann::json& v = j.at(key);
  const bool ok = [&] {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else return true;
  }();
  if (!ok) throw std::invalid_argument(path + "." + key + ": wrong type");
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(path + "." + key + ": wrong type");
  }
}

/// Rejects keys outside `known`, naming the first unknown one.
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& path) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool found = false;
    for (const char* k : known) found = found || it.key() == k;
    if (!found) throw std::invalid_argument(path + "." + it.key() + ": unknown field");
  }
}

}  // namespace traice3d::json_fields
