#pragma once

#include <filesystem>

#include "voxelrcnn/optim.hpp"

namespace voxelrcnn {

// Flat little-endian binary:
//   u32 magic 'VXRC', u32 version, u32 count,
//   per parameter: u32 name length, name bytes, u32 rank, u64 dims[rank],
//                  f64 payload[prod(dims)].
inline constexpr std::uint32_t kCheckpointMagic = 0x43525856u;
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParameterList& params);
ParameterList read_checkpoint(const std::filesystem::path& path);

// Copies values into `params` by name. Every parameter must be present with
// a matching shape; extra entries in the file are an error too.
void load_checkpoint(const std::filesystem::path& path, ParameterList& params);

}  // namespace voxelrcnn
