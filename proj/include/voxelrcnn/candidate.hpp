#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "voxelrcnn/vec3.hpp"

namespace voxelrcnn {

// One detected nodule in world coordinates. The mask crop is a binary grid
// sampled at voxel centres mask_origin + index * mask_spacing.
struct Candidate {
  std::string scan_id;
  Vec3 center_world{};  // mm, z y x
  Vec3 size_world{};    // mm
  double score = 0.0;

  Vec3 mask_origin{};
  Vec3 mask_spacing{1.0, 1.0, 1.0};
  Index3 mask_dims{0, 0, 0};
  std::vector<std::uint8_t> mask;
  double mask_volume_mm3 = 0.0;

  // Mean box edge.
  double diameter_mm() const { return (size_world[0] + size_world[1] + size_world[2]) / 3.0; }
  std::int64_t mask_count() const;
};

// seriesuid,coordX,coordY,coordZ,probability,d_mm,volume_mm3
// Masks are not serialized; read candidates carry the box and volume only.
void write_candidates_csv(const std::vector<Candidate>& cands, const std::filesystem::path& path);
std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path);

}  // namespace voxelrcnn
