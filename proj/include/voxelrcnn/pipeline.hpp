#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "voxelrcnn/keyvalue.hpp"
#include "voxelrcnn/model.hpp"
#include "voxelrcnn/phantom.hpp"
#include "voxelrcnn/volio.hpp"

namespace voxelrcnn {

struct TrainConfig {
  double stage1_lr = 0.01;
  double stage2_lr = 0.001;
  double momentum = 0.9;
  int stage1_epochs = 100;
  int stage2_epochs = 100;
  int finetune_epochs = 0;  // end-to-end pass after stage 2; off by default
  double finetune_lr = 0.0005;
  int batch_patches = 2;    // patches per optimizer step
  double grad_clip = 10.0;  // global L2 norm; 0 disables

  // Stage 1: anchors sampled per patch, at most a quarter positive.
  int anchors_per_patch = 128;
  int max_positive_anchors = 32;
  double hard_negative_fraction = 0.5;  // share of negatives taken by score
  double rpn_positive_iou = 0.5;
  double rpn_negative_iou = 0.1;
  double focal_gamma = 2.0;
  double focal_alpha = 0.75;

  // Stage 2: ROIs per patch at 1:1 foreground to background.
  int rois_per_patch = 16;
  int gt_jitter_rois = 2;  // jittered copies of every GT box added to the ROIs
  double fg_iou = 0.5;
  double bg_iou = 0.3;
  int mask_rois_per_patch = 4;
  double cls_weight = 1.0, reg_weight = 1.0, mask_weight = 1.0;

  // Patches.
  int patch_size = 64;
  int jitter_voxels = 12;
  int negatives_per_scan = 1;
  double hu_min = -1000.0, hu_max = 400.0;

  // Augmentation.
  bool augment = true;
  bool aug_flip = true, aug_rotate = true, aug_scale = true, aug_intensity = true;
  double scale_min = 0.9, scale_max = 1.1;
  double intensity_shift = 0.1, intensity_scale = 0.1;

  // Validation-loss plateau.
  int patience = 5;
  double min_delta = 1e-4;
  int val_scans = 2;  // taken from the training fold; 0 monitors training loss

  int fold = 0;
  int folds = 10;
  std::uint64_t seed = 0;

  void validate() const;
  void to_keyvalues(KeyValues& kv, const std::string& prefix = "train.") const;
  static TrainConfig from_keyvalues(const KeyValues& kv, const std::string& prefix = "train.");
  static std::vector<std::string> keys(const std::string& prefix = "train.");
};

// ---------------------------------------------------------------- data

inline constexpr std::uint8_t kIgnoreLabel = 255;

// One scan resampled to the working spacing with per-voxel instance ids
// (annotation index + 1, 0 background, kIgnoreLabel for unannotated
// foreground) and one GT box per annotation in volume voxel coordinates.
struct ScanRecord {
  std::string scan_id;
  Volume scan;
  std::vector<std::uint8_t> instances;  // empty when no mask is available
  std::vector<Annotation> annotations;
  std::vector<Box3> gt_boxes;
};

struct Dataset {
  std::vector<ScanRecord> scans;

  // scans/<id>.mhd, optional masks/<id>.mhd, annotations.csv.
  static Dataset load(const std::filesystem::path& dir, double spacing_mm = 0.5);
  static Dataset from_cases(const std::vector<PhantomCase>& cases);
  std::vector<std::string> ids() const;
  Dataset subset(const std::vector<std::string>& ids) const;
};

ScanRecord make_record(std::string scan_id, Volume scan, const Volume* mask, std::vector<Annotation> annos);

// A normalized training patch. Boxes are in patch voxel coordinates;
// box i belongs to instance ids[i] in `labels`.
struct TrainPatch {
  Tensor image;  // [1, 1, P, P, P]
  Index3 dims{};
  std::vector<std::uint8_t> labels;
  std::vector<Box3> boxes;
  std::vector<std::uint8_t> ids;
  std::vector<Box3> ignore;  // mostly-cut nodules: anchors near them are not scored
  Vec3 spacing{0.5, 0.5, 0.5};
};

TrainPatch make_patch(const ScanRecord& scan, const Index3& offset, const TrainConfig& cfg);

// Patch origins for one epoch: one jittered patch per annotation plus
// `negatives_per_scan` uniform ones per scan.
struct PatchRef {
  std::size_t scan = 0;
  Index3 offset{};
};
std::vector<PatchRef> sample_patches(const Dataset& data, const TrainConfig& cfg, Rng& rng);

// ---------------------------------------------------------------- augmentation

struct AugmentParams {
  std::array<bool, 3> flip{};
  int rot90 = 0;  // quarter turns in the axial (y, x) plane
  double scale = 1.0;
  double intensity_scale = 1.0;
  double intensity_shift = 0.0;
};

AugmentParams sample_augment(const TrainConfig& cfg, Rng& rng);

// Flips, then rotation, then isotropic scaling about the patch centre, all
// on continuous box coordinates q in [0, P).
Vec3 augment_point(const Vec3& q, const AugmentParams& a, double patch_size);
Box3 augment_box(const Box3& b, const AugmentParams& a, double patch_size);

// Image resampled trilinearly, labels by nearest neighbour; boxes
// transformed analytically. Patches must be cubic.
TrainPatch apply_augment(const TrainPatch& p, const AugmentParams& a);
TrainPatch augment(const TrainPatch& p, std::uint64_t seed, const TrainConfig& cfg);

// ---------------------------------------------------------------- losses

struct LossParts {
  Tensor total;
  double cls = 0.0, reg = 0.0, mask = 0.0;
};

// RPN focal + smooth-L1 on sampled anchors.
LossParts stage1_loss(const VoxelRcnn& model, const TrainPatch& p, const TrainConfig& cfg, bool train, Rng& rng);

// RCNN focal + smooth-L1 and mask soft-IoU. Backbone and RPN run without
// gradient unless `through_backbone`.
LossParts stage2_loss(const VoxelRcnn& model, const TrainPatch& p, const TrainConfig& cfg, bool train, Rng& rng,
                      bool through_backbone = false);

// ---------------------------------------------------------------- training

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0, train_cls = 0.0, train_reg = 0.0, train_mask = 0.0;
  double val_loss = 0.0;
};

struct StageResult {
  std::vector<EpochLog> log;
  std::filesystem::path best_checkpoint;  // empty when no run dir
  double best_val = 0.0;
  int best_epoch = 0;
};

enum class Stage { kRpn = 1, kHeads = 2, kFinetune = 3 };

using LossFn = std::function<LossParts(const TrainPatch&, bool train, Rng&)>;

// One pass over `patches`; returns the mean loss parts. Only `params` move.
EpochLog run_epoch(const std::vector<TrainPatch>& patches, const LossFn& loss, ParameterList params,
                   SgdState& opt, const TrainConfig& cfg, Rng& rng);
double evaluate_loss(const std::vector<TrainPatch>& patches, const LossFn& loss, const TrainConfig& cfg);

// Trains on `train`, monitors `val` (train when val is empty). Writes
// <run_dir>/stage<k>.csv plus stage<k>_best.ckpt / stage<k>_last.ckpt when
// run_dir is non-empty; the model is left holding the best weights.
StageResult train_stage1(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                         const std::filesystem::path& run_dir = {});
StageResult train_stage2(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                         const std::filesystem::path& stage1_checkpoint, const std::filesystem::path& run_dir = {});
StageResult train_finetune(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                           const std::filesystem::path& run_dir = {});

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Ids are sorted, shuffled with the seed and dealt round-robin.
std::vector<Fold> kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed);

// Splits the fold's training ids into (fit, validation).
std::pair<std::vector<std::string>, std::vector<std::string>> validation_split(const std::vector<std::string>& train_ids,
                                                                               int val_scans);

// Writes config.txt (model + train keys) to a run directory.
void write_run_config(const std::filesystem::path& run_dir, const ModelConfig& m, const TrainConfig& t);

}  // namespace voxelrcnn
