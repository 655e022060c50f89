#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npstream/models.hpp"

namespace npstream {

// Model checkpoints: magic "NPCK", format version, then a CRC32-protected
// payload holding the config block and a named tensor table. Values are
// little-endian 64-bit floats regardless of runtime precision, so a reload
// reproduces predictions bitwise.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t crc32(const std::uint8_t* data, std::size_t n);

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& model);
ModelParams deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const ModelParams& model, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

// Validates the stored family against the caller's expectation.
ModelParams load_checkpoint(const std::string& path, Family expected);

}  // namespace npstream
