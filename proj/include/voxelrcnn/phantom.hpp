#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "voxelrcnn/keyvalue.hpp"
#include "voxelrcnn/volio.hpp"

namespace voxelrcnn {

enum class NoduleKind { kSolid, kSubsolid };

struct PhantomSpec {
  std::uint64_t seed = 0;
  int n_volumes = 1;
  Index3 volume_dims{96, 96, 96};
  Vec3 spacing_mm{0.5, 0.5, 0.5};
  int nodules_min = 1, nodules_max = 3;
  double radius_min_mm = 1.5, radius_max_mm = 12.0;
  double max_axis_ratio = 1.5;
  double subsolid_fraction = 0.3;  // probability a nodule is ground-glass
  int distractors_min = 2, distractors_max = 4;
  double tube_radius_min_mm = 0.75, tube_radius_max_mm = 1.5;
  double background_hu = -850.0;
  double solid_hu = 0.0;
  double subsolid_hu = -500.0;
  double tube_hu = -150.0;
  double noise_sigma_hu = 40.0;
  double min_gap_mm = 2.0;      // surface-to-surface spacing of nodules
  double margin_mm = 1.0;       // nodule surface to volume edge
  int max_placement_tries = 500;

  void validate() const;  // throws ConfigError
  // Triples are written "z y x".
  void to_keyvalues(KeyValues& kv, const std::string& prefix = "phantom.") const;
  static PhantomSpec from_keyvalues(const KeyValues& kv, const std::string& prefix = "phantom.");
  static std::vector<std::string> keys(const std::string& prefix = "phantom.");
};

// Axis-aligned ellipsoid; semi_axes_mm multiply out to radius_mm^3.
struct Nodule {
  Vec3 center_index{};  // continuous voxel index
  double radius_mm = 0.0;
  Vec3 semi_axes_mm{};
  NoduleKind kind = NoduleKind::kSolid;
};

struct PhantomCase {
  std::string scan_id;
  Volume scan;   // int16 HU
  Volume mask;   // uint8, 1 inside some nodule
  std::vector<Nodule> nodules;
  std::vector<Annotation> annotations;  // one per nodule, diameter = 2 * radius
};

std::string phantom_scan_id(int index);

// Deterministic in (spec.seed, index): volumes can be made in any order.
PhantomCase generate_case(const PhantomSpec& spec, int index);
std::vector<PhantomCase> generate(const PhantomSpec& spec);

// scans/<id>.mhd, masks/<id>.mhd, annotations.csv under `dir`.
void write_dataset(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir);

}  // namespace voxelrcnn
