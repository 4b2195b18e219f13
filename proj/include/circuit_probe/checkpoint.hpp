#pragma once

// Checkpoint container: one line of JSON header (config plus a tensor
// manifest with shapes and byte offsets), then raw little-endian float32
// arrays, row-major, in manifest order.

#include <filesystem>
#include <string>

#include "circuit_probe/lora.hpp"
#include "circuit_probe/model.hpp"

namespace circuit_probe {

inline constexpr const char* kCheckpointFormat = "circuit-probe-checkpoint";
inline constexpr int kCheckpointVersion = 1;

std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);
std::string serialize_adapter(const Adapter& adapter);
Adapter deserialize_adapter(const std::string& bytes);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);
void save_adapter(const std::filesystem::path& path, const Adapter& adapter);
Adapter load_adapter(const std::filesystem::path& path);

/// Writes via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace circuit_probe
