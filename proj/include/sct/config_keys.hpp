#pragma once

#include <string>

#include "json.hpp"
#include "sct/errors.hpp"

namespace sct {

// Config sections are closed: a key the defaults do not serialize is almost
// always a typo, so it is an error rather than silently ignored.
inline void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& known, const std::string& what) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError(what + ": unknown key '" + key + "'");
  }
}

}  // namespace sct
