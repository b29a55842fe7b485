#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxelrcnn/geom3d.hpp"
#include "voxelrcnn/keyvalue.hpp"
#include "voxelrcnn/optim.hpp"
#include "voxelrcnn/rng.hpp"
#include "voxelrcnn/tensor.hpp"

namespace voxelrcnn {

struct ModelConfig {
  // Backbone. Widths are stem / first reduction / last reduction outputs.
  int stem_channels = 8;
  int early_channels = 16;
  int late_channels = 32;
  int blocks_per_stage = 1;
  std::array<int, 2> reduction_dilations{2, 3};
  double residual_scale = 0.3;

  // RPN. One cubic anchor size per map.
  double early_anchor = 16.0;
  double late_anchor = 64.0;
  double dropout = 0.1;
  double score_threshold = 0.1;
  int fallback_top = 10;
  int pre_nms_top = 600;
  double proposal_nms = 0.1;
  int train_proposals = 32;
  int infer_proposals = 64;

  // Heads.
  Index3 rcnn_roi{7, 7, 7};
  int rcnn_channels = 32;
  int rcnn_hidden = 64;
  Index3 mask_roi{14, 14, 14};
  int mask_channels = 16;
  int roi_samples = 2;
  double mask_margin_mm = 5.0;

  std::uint64_t seed = 0;

  int early_stride() const { return 4; }
  int late_stride() const { return 8; }
  Index3 mask_out() const { return {2 * mask_roi[0], 2 * mask_roi[1], 2 * mask_roi[2]}; }

  void validate() const;
  void to_keyvalues(KeyValues& kv, const std::string& prefix = "model.") const;
  static ModelConfig from_keyvalues(const KeyValues& kv, const std::string& prefix = "model.");
  static std::vector<std::string> keys(const std::string& prefix = "model.");
};

// Outputs of the first and last reduction stages.
struct FeaturePyramid {
  Tensor early;  // [N, early_channels, P/4, P/4, P/4]
  Tensor late;   // [N, late_channels, P/8, P/8, P/8]
  int early_stride = 4;
  int late_stride = 8;
};

// Anchor order is early-map positions first, then late-map positions.
struct RpnOutput {
  Tensor logits;  // [A, 1]
  Tensor deltas;  // [A, 6]
};

struct ProposalSet {
  std::vector<Box3> boxes;  // patch voxel coordinates
  std::vector<double> scores;
  Index3 window_offset{};
  bool fallback = false;  // nothing passed the threshold
};

struct RcnnOutput {
  Tensor logits;  // [R, 2]
  Tensor deltas;  // [R, 6]
};

class VoxelRcnn {
 public:
  explicit VoxelRcnn(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }
  // Parameters whose name starts with `prefix` ("backbone.", "rpn.", "rcnn.", "mask.").
  ParameterList group(const std::string& prefix) const;
  const Tensor& param(const std::string& name) const;

  // x: normalized patches [N, 1, P, P, P], P divisible by 8.
  FeaturePyramid backbone(const Tensor& x) const;
  RpnOutput rpn(const FeaturePyramid& fp, bool train, Rng* rng) const;
  std::vector<Box3> anchors(const FeaturePyramid& fp) const;

  // Boxes are in patch voxel coordinates.
  RcnnOutput rcnn(const FeaturePyramid& fp, const std::vector<Box3>& rois, bool train, Rng* rng,
                  std::int64_t batch_index = 0) const;
  // Probabilities [R, 1, 2m, 2m, 2m] for (already dilated) boxes.
  Tensor mask(const FeaturePyramid& fp, const Tensor& image, const std::vector<Box3>& rois,
              std::int64_t batch_index = 0) const;

 private:
  Tensor conv(const std::string& name, const Tensor& x, int stride = 1, int dilation = 1,
              bool same = true) const;
  Tensor norm_relu(const std::string& name, const Tensor& x) const;
  Tensor residual_block(const std::string& name, const Tensor& x) const;
  Tensor reduction_block(const std::string& name, const Tensor& x) const;
  void add_param(const std::string& name, Shape shape, double stddev, double fill, Rng& rng);
  void add_conv(const std::string& name, std::int64_t out, std::int64_t in, std::int64_t k,
                Rng& rng, double gain = 2.0);
  void add_norm(const std::string& name, std::int64_t c);

  ModelConfig cfg_;
  ParameterList params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Thresholds sigmoid scores at score_threshold; if nothing passes, the
// top fallback_top decoded anchors are returned as-is. Otherwise the passing
// boxes are NMS-filtered and capped at top_k.
ProposalSet propose(const RpnOutput& out, const std::vector<Box3>& anchors, const Vec3& patch_dims,
                    const ModelConfig& cfg, int top_k);

// Two-class probabilities (column 1) from RCNN logits.
std::vector<double> foreground_scores(const Tensor& logits);

// Samples the binary grid `labels` == id (dims `dims`, patch frame) at the
// centres of an out^3 lattice over `box`; trilinear, then thresholded at 0.5.
std::vector<double> mask_target(const std::vector<std::uint8_t>& labels, const Index3& dims,
                                std::uint8_t id, const Box3& box, const Index3& out);

}  // namespace voxelrcnn
