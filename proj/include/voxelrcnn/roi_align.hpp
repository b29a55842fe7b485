#pragma once

#include <vector>

#include "voxelrcnn/geom3d.hpp"
#include "voxelrcnn/tensor.hpp"

namespace voxelrcnn::ops {

// Crops `boxes` (feature-map box coordinates: cell i spans [i, i + 1)) out of
// sample `batch_index` of feature [N, C, D, H, W] and resizes each to
// out_size. Every output cell is the mean of samples_per_bin^3 trilinear
// samples at regular sub-bin positions. Samples more than one cell outside
// the map read 0; the rest are clamped to the edge. Result [R, C, od, oh, ow].
Tensor roi_align_3d(const Tensor& feature, const std::vector<Box3>& boxes, const Index3& out_size,
                    int samples_per_bin, std::int64_t batch_index = 0);

// Box in input-voxel coordinates -> feature-map coordinates at `stride`.
Box3 to_feature_coords(const Box3& b, double stride);

}  // namespace voxelrcnn::ops
