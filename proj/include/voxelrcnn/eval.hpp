#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxelrcnn/candidate.hpp"
#include "voxelrcnn/volio.hpp"

namespace voxelrcnn {

// Indices refer to the candidate / annotation lists of one scan.
struct ScanMatch {
  std::string scan_id;
  std::vector<std::pair<std::size_t, std::size_t>> tp;  // (candidate, gt)
  std::vector<std::size_t> fp;
  std::vector<std::size_t> fn;
  std::vector<std::size_t> duplicates;  // extra hits on a matched gt; not scored
};

// A candidate hits a GT when its centre is within diameter/2 of the GT
// centre. Candidates are visited by descending score (ties by index); a hit
// claims the nearest unclaimed GT, a hit on only claimed GTs is a duplicate.
ScanMatch match(const std::vector<Candidate>& cands, const std::vector<Annotation>& gts);

struct MatchResult {
  std::vector<ScanMatch> scans;
  // Flattened inputs, grouped per scan in `scans` order.
  std::vector<std::vector<Candidate>> candidates;
  std::vector<std::vector<Annotation>> gts;
  std::size_t gt_count() const;
};

// Groups by scan id. `scan_ids` lists every evaluated scan (scans without
// candidates or GTs still count towards FP/scan); empty means the union of
// ids seen in either list.
MatchResult match_all(const std::vector<Candidate>& cands, const std::vector<Annotation>& gts,
                      std::vector<std::string> scan_ids = {});

inline constexpr std::array<double, 7> kFrocRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct FrocResult {
  // Achieved curve, one point per distinct score threshold, descending.
  std::vector<double> thresholds;
  std::vector<double> fps_per_scan;
  std::vector<double> sensitivity_curve;

  std::array<double, 7> sensitivity{};  // at kFrocRates
  double cpm = 0.0;
  std::size_t n_scans = 0, n_gt = 0, n_tp = 0, n_fp = 0;
};

// Linear interpolation between achieved points; flat to the left of the
// first point and to the right of the last.
FrocResult froc(const MatchResult& m);

// Nonzero entries are members. Both empty -> 1.
double dsc(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

// Symmetric Hausdorff distance between the 6-connectivity surfaces of two
// binary grids; with percentile95 the directed distances are reduced by
// their 95th percentile instead of the max.
double hausdorff_mm(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                    const Index3& dims, const Vec3& spacing, bool percentile95 = false);

double volume_correlation(const std::vector<double>& pred, const std::vector<double>& gt);

// 26-connected components of nonzero voxels; labels 1..count, 0 background.
struct Components {
  std::vector<std::int32_t> labels;
  std::int32_t count = 0;
};
Components label_components(const std::vector<std::uint8_t>& mask, const Index3& dims);

// Component holding the annotation: the one containing its centre voxel,
// else the one with a voxel nearest the centre within the radius; 0 if none.
std::int32_t component_for(const Components& c, const Volume& frame, const Annotation& a);

struct NoduleSegmentation {
  std::string scan_id;
  std::size_t gt_index = 0;
  double score = 0.0;
  double dsc = 0.0;
  double hd_mm = 0.0;  // NaN when the prediction misses the GT frame
  double pred_volume_mm3 = 0.0;
  double gt_volume_mm3 = 0.0;
};

struct SegmentationReport {
  std::vector<NoduleSegmentation> nodules;
  double dsc_mean = 0.0, dsc_sd = 0.0;
  double hd_mean = 0.0, hd_sd = 0.0;
  double volume_r = 0.0;  // NaN when undefined
  bool hd95 = false;
  std::string summary() const;
};

// `gt_masks[i]` is the binary nodule mask for m.scans[i]; an empty Volume
// skips that scan. Predicted crops are resampled (nearest) into the GT frame.
SegmentationReport segmentation_report(const MatchResult& m, const std::vector<Volume>& gt_masks,
                                       bool percentile95 = false);

// Mean and sample standard deviation (0 for fewer than two values).
std::pair<double, double> mean_sd(const std::vector<double>& v);

std::string froc_summary(const FrocResult& f);

}  // namespace voxelrcnn
