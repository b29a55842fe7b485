#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "voxelrcnn/vec3.hpp"

namespace voxelrcnn {

enum class ElementType { kInt16, kFloat32, kUInt8 };

const char* met_type_name(ElementType t);

// Dense scalar grid with axis-aligned world mapping
//   world = origin + index * spacing     (all triples z, y, x; mm)
// Values are held as float; `element_type` records the on-disk kind.
class Volume {
 public:
  Volume() = default;
  Volume(Index3 dims, Vec3 spacing, Vec3 origin, ElementType type, std::vector<float> voxels);
  static Volume filled(Index3 dims, Vec3 spacing, Vec3 origin, ElementType type, float value = 0.f);

  const Index3& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  ElementType element_type() const { return type_; }
  const std::vector<float>& voxels() const { return voxels_; }
  std::int64_t size() const { return static_cast<std::int64_t>(voxels_.size()); }
  bool empty() const { return voxels_.empty(); }

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims_[1] + y) * dims_[2] + x;
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels_[static_cast<std::size_t>(index(z, y, x))];
  }
  bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims_[0] && y < dims_[1] && x < dims_[2];
  }
  double voxel_volume_mm3() const { return spacing_[0] * spacing_[1] * spacing_[2]; }

  // Continuous voxel index (voxel centres at integers) <-> world mm.
  Vec3 index_to_world(const Vec3& index) const;
  Vec3 world_to_index(const Vec3& world) const;

  // Same geometry, different values/kind.
  Volume with_voxels(std::vector<float> voxels, ElementType type) const;

 private:
  Index3 dims_{0, 0, 0};
  Vec3 spacing_{1.0, 1.0, 1.0};
  Vec3 origin_{0.0, 0.0, 0.0};
  ElementType type_ = ElementType::kFloat32;
  std::vector<float> voxels_;
};

Volume read_mhd(const std::filesystem::path& path);
// Writes `path` (header) and a sibling .raw payload.
void write_mhd(const Volume& v, const std::filesystem::path& path);

enum class Interpolation { kLinear, kNearest };

// Trilinear (or nearest) resampling to a new spacing, origin preserved;
// new dims = round(dims * spacing / target_spacing).
Volume resample(const Volume& v, const Vec3& target_spacing,
                Interpolation interp = Interpolation::kLinear);

// Samples `v` on an arbitrary axis-aligned grid via world coordinates.
// Samples outside `v` take `outside`.
Volume resample_to_grid(const Volume& v, const Index3& dims, const Vec3& spacing,
                        const Vec3& origin, Interpolation interp, float outside = 0.f);

struct Annotation {
  std::string scan_id;
  Vec3 center_world{};  // z, y, x mm
  double diameter_mm = 0.0;
};

// LUNA-style CSV: seriesuid,coordX,coordY,coordZ,diameter_mm with a header.
std::vector<Annotation> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::vector<Annotation>& annos, const std::filesystem::path& path);

enum class PatchLabel { kPositive, kNegative };

struct Patch {
  Index3 dims{};
  std::vector<double> data;
  Index3 offset_voxel{};  // top-left corner in the source volume
  PatchLabel label = PatchLabel::kNegative;
};

struct PatchConfig {
  std::int64_t size = 128;
  int positives_per_annotation = 1;
  int negatives = 1;
  std::int64_t jitter_voxels = 16;
  double hu_min = -1000.0;
  double hu_max = 400.0;
  double expected_spacing_mm = 0.5;
  std::uint64_t seed = 0;
  int max_tries = 200;
};

// Crops [offset, offset + dims) from v, clips to the HU window, and
// normalizes to zero mean and unit variance over the whole crop. Voxels
// outside v are 0 after normalization.
Patch normalized_crop(const Volume& v, const Index3& offset, const Index3& dims, double hu_min,
                      double hu_max);

// Raw voxel crop (no normalization); outside voxels take `pad`.
std::vector<float> crop_values(const Volume& v, const Index3& offset, const Index3& dims,
                               float pad = 0.f);

std::vector<Patch> extract_patches(const Volume& v, const std::vector<Annotation>& annos,
                                   const PatchConfig& cfg);

}  // namespace voxelrcnn
