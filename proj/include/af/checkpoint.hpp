#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "af/model.hpp"
#include "af/tensor.hpp"

namespace af {

/// On-disk container: magic "AFRG", then a little-endian u32 format version,
/// then length-prefixed UTF-8 key=value entries, then named f64 tensors.
/// Every integer in the file is little-endian u32; tensor payloads are raw
/// little-endian doubles. Entry and tensor order is preserved exactly, so a
/// file written from a freshly loaded container is byte-identical.
struct CheckpointData {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const CheckpointData& data);

/// Throws CheckpointError on bad magic, unsupported version, or truncation.
CheckpointData read_checkpoint(const std::string& path);

std::vector<std::pair<std::string, std::string>> config_to_entries(
    const ModelConfig& cfg);

/// Rebuilds a ModelConfig from "model.*" entries; throws CheckpointError if
/// a field is missing or unparsable. Other keys are ignored.
ModelConfig config_from_entries(
    const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace af
