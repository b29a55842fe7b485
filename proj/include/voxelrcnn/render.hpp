#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "voxelrcnn/volio.hpp"

namespace voxelrcnn {

enum class SliceAxis { kZ = 0, kY = 1, kX = 2 };

// "z", "y" or "x"; ArgumentError otherwise.
SliceAxis parse_axis(const std::string& s);

// One 2D slice. Rows/columns: z -> (y, x), y -> (z, x), x -> (z, y).
struct SliceImage {
  std::int64_t width = 0, height = 0;
  std::vector<std::uint8_t> gray;  // width * height
  std::vector<std::uint8_t> rgb;   // 3 * width * height, gray with label contours
  std::int64_t overlay_pixels = 0;
};

// Labelled pixels with a 4-neighbour of another label (or the slice edge).
std::vector<std::uint8_t> label_boundary(const std::vector<std::int32_t>& labels, std::int64_t width,
                                         std::int64_t height);

// HU window mapped linearly onto 0..255. `labels`, when given, must share
// the scan's dims; its contours are drawn in per-label colours.
SliceImage render_slice(const Volume& scan, const Volume* labels, SliceAxis axis, std::int64_t index,
                        double hu_min = -1000.0, double hu_max = 400.0);

// Binary P5 / P6.
void write_pgm(const std::filesystem::path& path, const SliceImage& img);
void write_ppm(const std::filesystem::path& path, const SliceImage& img);

}  // namespace voxelrcnn
