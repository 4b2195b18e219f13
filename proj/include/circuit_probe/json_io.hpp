#pragma once

// JSON encodings of the configuration types. Keys mirror field names;
// missing keys keep their defaults and unknown keys are rejected.

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "circuit_probe/errors.hpp"
#include "circuit_probe/lora.hpp"
#include "circuit_probe/model.hpp"
#include "circuit_probe/trainer.hpp"

namespace circuit_probe {

using Json = nlohmann::json;

/// Throws ConfigError when `j` is not an object or has a key outside `allowed`.
void require_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Reads j[key] into `out` when present; type mismatches become ConfigError.
template <typename T>
void read_optional(const Json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const LoraConfig& c);
void from_json(const Json& j, LoraConfig& c);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);
void to_json(Json& j, const HookSite& s);
void from_json(const Json& j, HookSite& s);

}  // namespace circuit_probe
