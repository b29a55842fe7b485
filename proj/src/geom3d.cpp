#include "voxelrcnn/geom3d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn {

Box3 Box3::from_bounds(const Vec3& lo, const Vec3& hi) {
  Box3 b;
  for (int i = 0; i < 3; ++i) {
    b.center[i] = 0.5 * (lo[i] + hi[i]);
    b.size[i] = hi[i] - lo[i];
  }
  return b;
}

Box3 Box3::translated(const Vec3& offset) const {
  Box3 b = *this;
  for (int i = 0; i < 3; ++i) b.center[i] += offset[i];
  return b;
}

double iou3d(const Box3& a, const Box3& b) {
  // Volumes from the same lo/hi extents as the overlap, so iou3d(a, a) is exactly 1.
  double inter = 1.0, va = 1.0, vb = 1.0;
  for (int i = 0; i < 3; ++i) {
    const double ext = std::min(a.hi(i), b.hi(i)) - std::max(a.lo(i), b.lo(i));
    if (ext <= 0.0) return 0.0;
    inter *= ext;
    va *= a.hi(i) - a.lo(i);
    vb *= b.hi(i) - b.lo(i);
  }
  const double uni = va + vb - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::vector<std::size_t> nms3d(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t idx = order[i];
    if (suppressed[idx]) continue;
    kept.push_back(idx);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou3d(boxes[idx].box, boxes[other].box) > iou_threshold) {
        suppressed[other] = true;
      }
    }
  }
  return kept;
}

std::vector<Box3> generate_anchors(const Index3& feature_dims, int feature_stride,
                                   std::span<const double> sizes) {
  if (feature_stride < 1) throw ArgumentError("generate_anchors: stride must be >= 1");
  std::vector<Box3> anchors;
  anchors.reserve(static_cast<std::size_t>(volume_of(feature_dims)) * sizes.size());
  const double s = feature_stride;
  for (std::int64_t z = 0; z < feature_dims[0]; ++z) {
    for (std::int64_t y = 0; y < feature_dims[1]; ++y) {
      for (std::int64_t x = 0; x < feature_dims[2]; ++x) {
        for (double edge : sizes) {
          anchors.push_back({{(z + 0.5) * s, (y + 0.5) * s, (x + 0.5) * s}, {edge, edge, edge}});
        }
      }
    }
  }
  return anchors;
}

namespace {
void require_positive(const Box3& b, const char* what) {
  for (int i = 0; i < 3; ++i) {
    if (!(b.size[i] > 0.0)) throw ContractError(std::string(what) + ": non-positive box size");
  }
}
}  // namespace

Delta3 encode(const Box3& anchor, const Box3& gt) {
  require_positive(anchor, "encode");
  require_positive(gt, "encode");
  Delta3 d;
  for (int i = 0; i < 3; ++i) {
    d.v[i] = (gt.center[i] - anchor.center[i]) / anchor.size[i];
    d.v[3 + i] = std::log(gt.size[i] / anchor.size[i]);
  }
  return d;
}

Box3 decode(const Box3& anchor, const Delta3& d) {
  require_positive(anchor, "decode");
  Box3 b;
  for (int i = 0; i < 3; ++i) {
    b.center[i] = anchor.center[i] + d.v[i] * anchor.size[i];
    // Clamp the log-scale so a wild regression cannot overflow.
    b.size[i] = anchor.size[i] * std::exp(std::clamp(d.v[3 + i], -8.0, 8.0));
  }
  return b;
}

Box3 dilate_box(const Box3& b, double margin_mm, const Vec3& spacing) {
  Box3 out = b;
  for (int i = 0; i < 3; ++i) {
    if (!(spacing[i] > 0.0)) throw ArgumentError("dilate_box: spacing must be positive");
    out.size[i] += 2.0 * margin_mm / spacing[i];
  }
  return out;
}

Box3 clip_box(const Box3& b, const Vec3& bounds) {
  Vec3 lo, hi;
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::clamp(b.lo(i), 0.0, bounds[i]);
    hi[i] = std::clamp(b.hi(i), 0.0, bounds[i]);
  }
  return Box3::from_bounds(lo, hi);
}

AnchorAssignment assign_anchors(std::span<const Box3> anchors, std::span<const Box3> gt_boxes,
                                double positive_iou, double negative_iou) {
  AnchorAssignment out;
  out.labels.assign(anchors.size(), AnchorLabel::kNegative);
  out.matched_gt.assign(anchors.size(), -1);
  if (gt_boxes.empty()) return out;

  std::vector<double> best_for_gt(gt_boxes.size(), 0.0);
  std::vector<std::size_t> best_anchor(gt_boxes.size(), anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double iou = iou3d(anchors[a], gt_boxes[g]);
      if (iou > best) {
        best = iou;
        best_gt = static_cast<int>(g);
      }
      if (iou > best_for_gt[g]) {
        best_for_gt[g] = iou;
        best_anchor[g] = a;
      }
    }
    if (best > positive_iou) {
      out.labels[a] = AnchorLabel::kPositive;
      out.matched_gt[a] = best_gt;
    } else if (best >= negative_iou) {
      out.labels[a] = AnchorLabel::kIgnore;
    }
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (best_anchor[g] < anchors.size()) {
      out.labels[best_anchor[g]] = AnchorLabel::kPositive;
      out.matched_gt[best_anchor[g]] = static_cast<int>(g);
    }
  }
  return out;
}

}  // namespace voxelrcnn
