#pragma once

#include <span>
#include <vector>

#include "voxelrcnn/vec3.hpp"

namespace voxelrcnn {

// Axis-aligned box in voxel coordinates. Voxel i covers [i, i + 1), so the
// centre of voxel i sits at i + 0.5. Extent is [center - size/2, center + size/2).
struct Box3 {
  Vec3 center{};
  Vec3 size{};

  double lo(int axis) const { return center[axis] - 0.5 * size[axis]; }
  double hi(int axis) const { return center[axis] + 0.5 * size[axis]; }
  double volume() const { return size[0] * size[1] * size[2]; }

  static Box3 from_bounds(const Vec3& lo, const Vec3& hi);
  Box3 translated(const Vec3& offset) const;
  friend bool operator==(const Box3&, const Box3&) = default;
};

// (dz, dy, dx, log sz, log sy, log sx) relative to an anchor.
struct Delta3 {
  std::array<double, 6> v{};
};

struct ScoredBox {
  Box3 box;
  double score = 0.0;
};

double iou3d(const Box3& a, const Box3& b);

// Greedy suppression in descending score order (ties: lower index first).
// Returns indices of kept boxes, in that order.
std::vector<std::size_t> nms3d(std::span<const ScoredBox> boxes, double iou_threshold);

// Cubic anchors of each edge length in `sizes` centred at (idx + 0.5) * stride
// for every feature voxel; position-major, sizes innermost.
std::vector<Box3> generate_anchors(const Index3& feature_dims, int feature_stride,
                                   std::span<const double> sizes);

Delta3 encode(const Box3& anchor, const Box3& gt);
Box3 decode(const Box3& anchor, const Delta3& d);

// Grows the box by margin_mm on each edge; spacing is mm per voxel.
Box3 dilate_box(const Box3& b, double margin_mm, const Vec3& spacing);

// Intersection with [0, bounds). May return a zero-size box.
Box3 clip_box(const Box3& b, const Vec3& bounds);

enum class AnchorLabel : int { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;  // -1 when unmatched
};

// IoU > positive_iou -> positive, IoU < negative_iou -> negative, else
// ignore. The best anchor of every GT is additionally forced positive.
AnchorAssignment assign_anchors(std::span<const Box3> anchors, std::span<const Box3> gt_boxes,
                                double positive_iou = 0.5, double negative_iou = 0.1);

}  // namespace voxelrcnn
