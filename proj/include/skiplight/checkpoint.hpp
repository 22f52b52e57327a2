#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "skiplight/model.hpp"

namespace skiplight {

enum class Precision { Float32, Float64 };

/// Model parameters plus optional auxiliary tensors (optimizer state) and
/// free-form metadata.
struct Checkpoint {
  ModelConfig config;
  ModelParameters params;
  std::map<std::string, Matrix> extra;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes `dir`/manifest.json and `dir`/params.bin (little-endian, float32 by
/// default). The manifest lists every tensor's path, shape and byte offset.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint,
                     Precision precision = Precision::Float32);

/// Reads and validates a checkpoint against its manifest and declared
/// architecture; throws DataError on any inconsistency.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace skiplight
