#pragma once

#include "json.hpp"

#include <cmath>
#include <string>

namespace xfrn {

using json = nlohmann::json;

// NaN marks undefined values; JSON carries them as null.
inline json number_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

inline double number_from(const json& j) {
  return j.is_null() ? std::nan("") : j.get<double>();
}

}  // namespace xfrn
