#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxelrcnn/candidate.hpp"
#include "voxelrcnn/keyvalue.hpp"
#include "voxelrcnn/model.hpp"
#include "voxelrcnn/volio.hpp"

namespace voxelrcnn {

struct InferConfig {
  std::int64_t window = 128;
  double overlap = 0.25;
  double nms_iou = 0.1;
  double mask_threshold = 0.5;
  bool largest_component = true;  // keep the mask component overlapping the box most
  double hu_min = -1000.0, hu_max = 400.0;
  double spacing_mm = 0.5;
  double fp_match_iou = 0.1;
  int max_candidates = 0;  // 0 keeps all
  int threads = 0;         // 0: hardware concurrency, capped by VOXELRCNN_THREADS

  void validate() const;
  void to_keyvalues(KeyValues& kv, const std::string& prefix = "infer.") const;
  static InferConfig from_keyvalues(const KeyValues& kv, const std::string& prefix = "infer.");
  static std::vector<std::string> keys(const std::string& prefix = "infer.");
};

// Per-axis window origins. Stride = window * (1 - overlap); the last window
// is clamped to the boundary. Axes no longer than the window get one window.
std::vector<std::int64_t> window_offsets(std::int64_t dim, std::int64_t window, double overlap);
std::vector<Index3> sliding_windows(const Index3& dims, std::int64_t window, double overlap);

// Window edge actually used per axis: the configured window, shrunk to the
// volume rounded up to a multiple of 8.
Index3 effective_window(const Index3& dims, std::int64_t window);

// A detection in volume voxel box coordinates with its mask probabilities on
// mask_dims over mask_box (the dilated box).
struct Detection {
  Box3 box;
  double score = 0.0;
  Box3 mask_box;
  Index3 mask_dims{};
  std::vector<float> mask_prob;
};

// Runs a detector on [offset, offset + size) of a volume and returns
// detections in volume coordinates.
using WindowDetector = std::function<std::vector<Detection>(const Volume&, const Index3& offset, const Index3& size)>;

WindowDetector model_detector(const VoxelRcnn& model, const InferConfig& cfg);

// Worker count for window parallelism.
int worker_count(int requested);

// Windows -> global NMS -> mask crops -> mask volume > 0 -> lung filter.
// Output sorted by descending score.
std::vector<Candidate> infer_volume(const Volume& v, const std::string& scan_id, const WindowDetector& detect,
                                    const InferConfig& cfg, const Volume* lung_mask = nullptr);
std::vector<Candidate> infer_volume(const Volume& v, const std::string& scan_id, const VoxelRcnn& model,
                                    const InferConfig& cfg, const Volume* lung_mask = nullptr);

// Binary crop of one detection on the voxel grid of `v`, mask volume set.
Candidate to_candidate(const Volume& v, const std::string& scan_id, const Detection& d, const InferConfig& cfg);

// Candidate box back in voxel box coordinates of `v`.
Box3 candidate_box(const Volume& v, const Candidate& c);

// Second pass on a window centred at each candidate. Score is replaced by
// the best-IoU re-detection above fp_match_iou; unmatched candidates drop.
std::vector<Candidate> fp_reduce(const Volume& v, const std::vector<Candidate>& cands, const WindowDetector& detect,
                                 const InferConfig& cfg);
std::vector<Candidate> fp_reduce(const Volume& v, const std::vector<Candidate>& cands, const VoxelRcnn& model,
                                 const InferConfig& cfg);

// Label volume (uint8): label k marks the k-th highest scoring candidate,
// overlaps go to the higher score; at most 255 labels.
Volume stitch_masks(const std::vector<Candidate>& cands, const Index3& dims, const Vec3& spacing, const Vec3& origin);

}  // namespace voxelrcnn
