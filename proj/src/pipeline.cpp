#include "voxelrcnn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>

#include "voxelrcnn/checkpoint.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/eval.hpp"
#include "voxelrcnn/losses.hpp"
#include "voxelrcnn/ops.hpp"

namespace voxelrcnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(stage1_lr > 0.0) || !(stage2_lr > 0.0) || !(finetune_lr > 0.0)) fail("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (stage1_epochs < 0 || stage2_epochs < 0 || finetune_epochs < 0) fail("epochs must be >= 0");
  if (batch_patches < 1) fail("batch_patches must be >= 1");
  if (grad_clip < 0.0) fail("grad_clip must be >= 0");
  if (anchors_per_patch < 1 || max_positive_anchors < 0 || max_positive_anchors > anchors_per_patch) {
    fail("anchor sampling counts are inconsistent");
  }
  if (hard_negative_fraction < 0.0 || hard_negative_fraction > 1.0) fail("hard_negative_fraction must be in [0, 1]");
  if (!(rpn_negative_iou <= rpn_positive_iou)) fail("rpn_negative_iou must not exceed rpn_positive_iou");
  if (rois_per_patch < 2 || gt_jitter_rois < 0 || mask_rois_per_patch < 0) fail("roi counts out of range");
  if (!(bg_iou <= fg_iou)) fail("bg_iou must not exceed fg_iou");
  if (cls_weight < 0.0 || reg_weight < 0.0 || mask_weight < 0.0) fail("loss weights must be >= 0");
  if (patch_size < 8 || patch_size % 8) fail("patch_size must be a positive multiple of 8");
  if (jitter_voxels < 0 || negatives_per_scan < 0) fail("patch sampling counts must be >= 0");
  if (!(hu_min < hu_max)) fail("hu_min must be below hu_max");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) fail("scale range is invalid");
  if (intensity_shift < 0.0 || intensity_scale < 0.0 || intensity_scale >= 1.0) fail("intensity jitter out of range");
  if (patience < 1) fail("patience must be >= 1");
  if (val_scans < 0) fail("val_scans must be >= 0");
  if (folds < 2) fail("folds must be >= 2");
  if (fold < 0 || fold >= folds) fail("fold index must be in [0, folds)");
}

namespace {

template <typename Visit>
void visit_fields(Visit&& v, TrainConfig& c) {
  v("stage1_lr", c.stage1_lr);
  v("stage2_lr", c.stage2_lr);
  v("momentum", c.momentum);
  v("stage1_epochs", c.stage1_epochs);
  v("stage2_epochs", c.stage2_epochs);
  v("finetune_epochs", c.finetune_epochs);
  v("finetune_lr", c.finetune_lr);
  v("batch_patches", c.batch_patches);
  v("grad_clip", c.grad_clip);
  v("anchors_per_patch", c.anchors_per_patch);
  v("max_positive_anchors", c.max_positive_anchors);
  v("hard_negative_fraction", c.hard_negative_fraction);
  v("rpn_positive_iou", c.rpn_positive_iou);
  v("rpn_negative_iou", c.rpn_negative_iou);
  v("focal_gamma", c.focal_gamma);
  v("focal_alpha", c.focal_alpha);
  v("rois_per_patch", c.rois_per_patch);
  v("gt_jitter_rois", c.gt_jitter_rois);
  v("fg_iou", c.fg_iou);
  v("bg_iou", c.bg_iou);
  v("mask_rois_per_patch", c.mask_rois_per_patch);
  v("cls_weight", c.cls_weight);
  v("reg_weight", c.reg_weight);
  v("mask_weight", c.mask_weight);
  v("patch_size", c.patch_size);
  v("jitter_voxels", c.jitter_voxels);
  v("negatives_per_scan", c.negatives_per_scan);
  v("hu_min", c.hu_min);
  v("hu_max", c.hu_max);
  v("augment", c.augment);
  v("aug_flip", c.aug_flip);
  v("aug_rotate", c.aug_rotate);
  v("aug_scale", c.aug_scale);
  v("aug_intensity", c.aug_intensity);
  v("scale_min", c.scale_min);
  v("scale_max", c.scale_max);
  v("intensity_shift", c.intensity_shift);
  v("intensity_scale", c.intensity_scale);
  v("patience", c.patience);
  v("min_delta", c.min_delta);
  v("val_scans", c.val_scans);
  v("fold", c.fold);
  v("folds", c.folds);
  v("seed", c.seed);
}

}  // namespace

void TrainConfig::to_keyvalues(KeyValues& kv, const std::string& prefix) const {
  TrainConfig c = *this;
  visit_fields([&](const std::string& k, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::uint64_t>) kv.set(prefix + k, std::to_string(field));
    else kv.set(prefix + k, field);
  }, c);
}

TrainConfig TrainConfig::from_keyvalues(const KeyValues& kv, const std::string& prefix) {
  TrainConfig c;
  visit_fields([&](const std::string& k, auto& field) { kv.get(prefix + k, field); }, c);
  c.validate();
  return c;
}

std::vector<std::string> TrainConfig::keys(const std::string& prefix) {
  std::vector<std::string> out;
  TrainConfig c;
  visit_fields([&](const std::string& k, auto&) { out.push_back(prefix + k); }, c);
  return out;
}

void write_run_config(const fs::path& run_dir, const ModelConfig& m, const TrainConfig& t) {
  fs::create_directories(run_dir);
  KeyValues kv;
  m.to_keyvalues(kv);
  t.to_keyvalues(kv);
  kv.write(run_dir / "config.txt");
}

// ---------------------------------------------------------------- data

ScanRecord make_record(std::string scan_id, Volume scan, const Volume* mask, std::vector<Annotation> annos) {
  ScanRecord r;
  r.scan_id = std::move(scan_id);
  r.annotations = std::move(annos);
  const Index3 d = scan.dims();
  const Vec3 sp = scan.spacing();
  r.gt_boxes.resize(r.annotations.size());
  std::vector<bool> from_mask(r.annotations.size(), false);

  if (mask != nullptr && !mask->empty()) {
    if (mask->dims() != d) throw DataError("mask dims do not match scan " + r.scan_id);
    std::vector<std::uint8_t> bin(mask->voxels().size());
    for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = mask->voxels()[i] != 0.f;
    const Components comps = label_components(bin, d);
    std::vector<std::uint8_t> comp_to_id(static_cast<std::size_t>(comps.count) + 1, kIgnoreLabel);
    comp_to_id[0] = 0;
    for (std::size_t k = 0; k < r.annotations.size() && k + 1 < kIgnoreLabel; ++k) {
      const std::int32_t c = component_for(comps, scan, r.annotations[k]);
      if (c == 0 || comp_to_id[static_cast<std::size_t>(c)] != kIgnoreLabel) continue;
      comp_to_id[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(k + 1);
      from_mask[k] = true;
    }
    r.instances.resize(bin.size());
    std::vector<Vec3> lo(r.annotations.size(), Vec3{1e300, 1e300, 1e300});
    std::vector<Vec3> hi(r.annotations.size(), Vec3{-1e300, -1e300, -1e300});
    for (std::int64_t z = 0; z < d[0]; ++z)
      for (std::int64_t y = 0; y < d[1]; ++y)
        for (std::int64_t x = 0; x < d[2]; ++x) {
          const auto i = static_cast<std::size_t>(scan.index(z, y, x));
          const std::uint8_t id = comp_to_id[static_cast<std::size_t>(comps.labels[i])];
          r.instances[i] = id;
          if (id == 0 || id == kIgnoreLabel) continue;
          const Vec3 p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
          for (int a = 0; a < 3; ++a) {
            lo[id - 1][a] = std::min(lo[id - 1][a], p[a]);
            hi[id - 1][a] = std::max(hi[id - 1][a], p[a] + 1.0);
          }
        }
    for (std::size_t k = 0; k < r.annotations.size(); ++k) {
      if (from_mask[k]) r.gt_boxes[k] = Box3::from_bounds(lo[k], hi[k]);
    }
  }
  for (std::size_t k = 0; k < r.annotations.size(); ++k) {
    if (from_mask[k]) continue;
    const Vec3 u = scan.world_to_index(r.annotations[k].center_world);
    Box3 b;
    for (int a = 0; a < 3; ++a) {
      b.center[a] = u[a] + 0.5;
      b.size[a] = r.annotations[k].diameter_mm / sp[a];
    }
    r.gt_boxes[k] = b;
  }
  r.scan = std::move(scan);
  return r;
}

Dataset Dataset::from_cases(const std::vector<PhantomCase>& cases) {
  Dataset d;
  for (const auto& c : cases) d.scans.push_back(make_record(c.scan_id, c.scan, &c.mask, c.annotations));
  return d;
}

Dataset Dataset::load(const fs::path& dir, double spacing_mm) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  if (!fs::is_directory(dir / "scans")) throw IoError("missing scans/ under " + dir.string());
  std::vector<Annotation> annos;
  if (fs::exists(dir / "annotations.csv")) annos = read_annotations(dir / "annotations.csv");
  std::vector<fs::path> headers;
  for (const auto& e : fs::directory_iterator(dir / "scans")) {
    if (e.path().extension() == ".mhd") headers.push_back(e.path());
  }
  std::sort(headers.begin(), headers.end());
  const Vec3 target{spacing_mm, spacing_mm, spacing_mm};
  Dataset d;
  for (const auto& h : headers) {
    const std::string id = h.stem().string();
    Volume scan = read_mhd(h);
    Volume mask;
    if (fs::exists(dir / "masks" / (id + ".mhd"))) mask = read_mhd(dir / "masks" / (id + ".mhd"));
    if (scan.spacing() != target) {
      scan = resample(scan, target, Interpolation::kLinear);
      if (!mask.empty()) mask = resample(mask, target, Interpolation::kNearest);
    }
    std::vector<Annotation> mine;
    for (const auto& a : annos) {
      if (a.scan_id == id) mine.push_back(a);
    }
    d.scans.push_back(make_record(id, std::move(scan), mask.empty() ? nullptr : &mask, std::move(mine)));
  }
  return d;
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  for (const auto& s : scans) out.push_back(s.scan_id);
  return out;
}

Dataset Dataset::subset(const std::vector<std::string>& ids) const {
  Dataset d;
  for (const auto& id : ids) {
    auto it = std::find_if(scans.begin(), scans.end(), [&](const ScanRecord& s) { return s.scan_id == id; });
    if (it == scans.end()) throw ArgumentError("unknown scan id " + id);
    d.scans.push_back(*it);
  }
  return d;
}

TrainPatch make_patch(const ScanRecord& scan, const Index3& offset, const TrainConfig& cfg) {
  const std::int64_t p = cfg.patch_size;
  const Index3 dims{p, p, p};
  const Patch crop = normalized_crop(scan.scan, offset, dims, cfg.hu_min, cfg.hu_max);
  TrainPatch t;
  t.dims = dims;
  t.spacing = scan.scan.spacing();
  t.image = Tensor({1, 1, p, p, p}, crop.data);
  const Index3& vd = scan.scan.dims();
  if (!scan.instances.empty()) {
    t.labels.assign(static_cast<std::size_t>(volume_of(dims)), 0);
    std::size_t k = 0;
    for (std::int64_t z = 0; z < p; ++z)
      for (std::int64_t y = 0; y < p; ++y)
        for (std::int64_t x = 0; x < p; ++x, ++k) {
          const std::int64_t zz = z + offset[0], yy = y + offset[1], xx = x + offset[2];
          if (zz < 0 || yy < 0 || xx < 0 || zz >= vd[0] || yy >= vd[1] || xx >= vd[2]) continue;
          t.labels[k] = scan.instances[static_cast<std::size_t>(scan.scan.index(zz, yy, xx))];
        }
  }
  const Vec3 shift{-static_cast<double>(offset[0]), -static_cast<double>(offset[1]), -static_cast<double>(offset[2])};
  const Vec3 bounds{static_cast<double>(p), static_cast<double>(p), static_cast<double>(p)};
  for (std::size_t i = 0; i < scan.gt_boxes.size(); ++i) {
    const Box3 b = scan.gt_boxes[i].translated(shift);
    const Box3 c = clip_box(b, bounds);
    const double vis = c.volume();
    if (vis <= 0.0) continue;
    if (vis >= 0.5 * b.volume()) {
      t.boxes.push_back(c);
      t.ids.push_back(static_cast<std::uint8_t>(i + 1));
    } else {
      t.ignore.push_back(c);
    }
  }
  return t;
}

std::vector<PatchRef> sample_patches(const Dataset& data, const TrainConfig& cfg, Rng& rng) {
  std::vector<PatchRef> out;
  const std::int64_t p = cfg.patch_size;
  for (std::size_t s = 0; s < data.scans.size(); ++s) {
    const ScanRecord& r = data.scans[s];
    const Index3& d = r.scan.dims();
    auto clamp_offset = [&](int a, std::int64_t o) { return std::clamp<std::int64_t>(o, 0, std::max<std::int64_t>(0, d[a] - p)); };
    for (const Box3& b : r.gt_boxes) {
      Index3 o;
      for (int a = 0; a < 3; ++a) {
        const std::int64_t j = rng.uniform_int(-cfg.jitter_voxels, cfg.jitter_voxels);
        o[a] = clamp_offset(a, static_cast<std::int64_t>(std::llround(b.center[a] - 0.5 * static_cast<double>(p))) + j);
      }
      out.push_back({s, o});
    }
    for (int n = 0; n < cfg.negatives_per_scan; ++n) {
      Index3 o;
      for (int a = 0; a < 3; ++a) o[a] = rng.uniform_int(0, std::max<std::int64_t>(0, d[a] - p));
      out.push_back({s, o});
    }
  }
  return out;
}

// ---------------------------------------------------------------- augmentation

AugmentParams sample_augment(const TrainConfig& cfg, Rng& rng) {
  AugmentParams a;
  if (cfg.aug_flip) {
    for (auto& f : a.flip) f = rng.bernoulli(0.5);
  }
  if (cfg.aug_rotate) a.rot90 = static_cast<int>(rng.uniform_int(0, 3));
  if (cfg.aug_scale) a.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  if (cfg.aug_intensity) {
    a.intensity_scale = 1.0 + rng.uniform(-cfg.intensity_scale, cfg.intensity_scale);
    a.intensity_shift = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift);
  }
  return a;
}

Vec3 augment_point(const Vec3& q0, const AugmentParams& a, double n) {
  Vec3 q = q0;
  for (int i = 0; i < 3; ++i) {
    if (a.flip[static_cast<std::size_t>(i)]) q[i] = n - q[i];
  }
  for (int k = 0; k < a.rot90; ++k) q = {q[0], q[2], n - q[1]};
  if (a.scale != 1.0) {
    const double c = 0.5 * n;
    for (int i = 0; i < 3; ++i) q[i] = c + a.scale * (q[i] - c);
  }
  return q;
}

Box3 augment_box(const Box3& b, const AugmentParams& a, double n) {
  Box3 out;
  out.center = augment_point(b.center, a, n);
  out.size = b.size;
  if (a.rot90 % 2) std::swap(out.size[1], out.size[2]);
  for (auto& s : out.size) s *= a.scale;
  return out;
}

namespace {

// Output box coordinate -> input box coordinate.
Vec3 inverse_point(const Vec3& p, const AugmentParams& a, double n) {
  Vec3 q = p;
  if (a.scale != 1.0) {
    const double c = 0.5 * n;
    for (int i = 0; i < 3; ++i) q[i] = c + (q[i] - c) / a.scale;
  }
  for (int k = 0; k < a.rot90; ++k) q = {q[0], n - q[2], q[1]};
  for (int i = 0; i < 3; ++i) {
    if (a.flip[static_cast<std::size_t>(i)]) q[i] = n - q[i];
  }
  return q;
}

}  // namespace

TrainPatch apply_augment(const TrainPatch& p, const AugmentParams& a) {
  const Index3& d = p.dims;
  if (d[0] != d[1] || d[1] != d[2]) throw ShapeError("augment: patch must be cubic");
  const std::int64_t n = d[0];
  const double nd = static_cast<double>(n);
  const auto src = p.image.data();
  std::vector<double> img(src.size(), 0.0);
  std::vector<std::uint8_t> lab(p.labels.size(), 0);
  auto sidx = [&](std::int64_t z, std::int64_t y, std::int64_t x) { return static_cast<std::size_t>((z * n + y) * n + x); };
  std::size_t k = 0;
  for (std::int64_t z = 0; z < n; ++z)
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x, ++k) {
        const Vec3 q = inverse_point({static_cast<double>(z) + 0.5, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5}, a, nd);
        Vec3 u;
        Index3 i0;
        for (int i = 0; i < 3; ++i) {
          u[i] = q[i] - 0.5;
          i0[i] = static_cast<std::int64_t>(std::floor(u[i]));
          u[i] -= static_cast<double>(i0[i]);
        }
        double s = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double w = (dz ? u[0] : 1 - u[0]) * (dy ? u[1] : 1 - u[1]) * (dx ? u[2] : 1 - u[2]);
              const std::int64_t zz = i0[0] + dz, yy = i0[1] + dy, xx = i0[2] + dx;
              if (w == 0.0 || zz < 0 || yy < 0 || xx < 0 || zz >= n || yy >= n || xx >= n) continue;
              s += w * src[sidx(zz, yy, xx)];
            }
        img[k] = s * a.intensity_scale + a.intensity_shift;
        if (!lab.empty()) {
          Index3 j;
          bool inside = true;
          for (int i = 0; i < 3; ++i) {
            j[i] = static_cast<std::int64_t>(std::floor(q[i]));
            inside = inside && j[i] >= 0 && j[i] < n;
          }
          if (inside) lab[k] = p.labels[sidx(j[0], j[1], j[2])];
        }
      }
  TrainPatch out;
  out.dims = d;
  out.spacing = p.spacing;
  out.image = Tensor(p.image.shape(), std::move(img));
  out.labels = std::move(lab);
  const Vec3 bounds{nd, nd, nd};
  for (std::size_t i = 0; i < p.boxes.size(); ++i) {
    const Box3 b = augment_box(p.boxes[i], a, nd);
    const Box3 c = clip_box(b, bounds);
    if (c.volume() <= 0.0) continue;
    if (c.volume() >= 0.5 * b.volume()) {
      out.boxes.push_back(c);
      out.ids.push_back(p.ids[i]);
    } else {
      out.ignore.push_back(c);
    }
  }
  for (const Box3& b : p.ignore) {
    const Box3 c = clip_box(augment_box(b, a, nd), bounds);
    if (c.volume() > 0.0) out.ignore.push_back(c);
  }
  return out;
}

TrainPatch augment(const TrainPatch& p, std::uint64_t seed, const TrainConfig& cfg) {
  Rng rng(seed, 0x617567);
  return apply_augment(p, sample_augment(cfg, rng));
}

// ---------------------------------------------------------------- losses

namespace {

Tensor scalar(double v) { return Tensor({1}, v); }

double max_iou(const Box3& b, const std::vector<Box3>& set, std::size_t* arg = nullptr) {
  double best = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double v = iou3d(b, set[i]);
    if (v > best) {
      best = v;
      if (arg) *arg = i;
    }
  }
  return best;
}

Tensor delta_targets(const std::vector<Box3>& from, const std::vector<Box3>& to) {
  std::vector<double> t;
  t.reserve(6 * from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    const Delta3 d = encode(from[i], to[i]);
    t.insert(t.end(), d.v.begin(), d.v.end());
  }
  return Tensor({static_cast<std::int64_t>(from.size()), 6}, std::move(t));
}

}  // namespace

LossParts stage1_loss(const VoxelRcnn& model, const TrainPatch& p, const TrainConfig& cfg, bool train, Rng& rng) {
  const FeaturePyramid fp = model.backbone(p.image);
  const RpnOutput out = model.rpn(fp, train, &rng);
  const std::vector<Box3> anchors = model.anchors(fp);
  const AnchorAssignment asg = assign_anchors(anchors, p.boxes, cfg.rpn_positive_iou, cfg.rpn_negative_iou);

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (asg.labels[i] == AnchorLabel::kPositive) pos.push_back(i);
    else if (asg.labels[i] == AnchorLabel::kNegative && max_iou(anchors[i], p.ignore) < cfg.rpn_negative_iou) {
      neg.push_back(i);
    }
  }
  rng.shuffle(pos);
  if (pos.size() > static_cast<std::size_t>(cfg.max_positive_anchors)) pos.resize(static_cast<std::size_t>(cfg.max_positive_anchors));
  const std::size_t want_neg = std::min(neg.size(), static_cast<std::size_t>(cfg.anchors_per_patch) - pos.size());
  const auto n_hard = static_cast<std::size_t>(std::llround(cfg.hard_negative_fraction * static_cast<double>(want_neg)));
  const auto logit = out.logits.data();
  std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) { return logit[a] > logit[b]; });
  std::vector<std::size_t> chosen(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_hard));
  std::vector<std::size_t> rest(neg.begin() + static_cast<std::ptrdiff_t>(n_hard), neg.end());
  rng.shuffle(rest);
  chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(want_neg - n_hard));

  std::vector<int> labels(anchors.size(), -1);
  for (std::size_t i : pos) labels[i] = 1;
  for (std::size_t i : chosen) labels[i] = 0;
  const Tensor cls = ops::focal_loss(out.logits, labels, cfg.focal_gamma, cfg.focal_alpha);

  Tensor reg = scalar(0.0);
  if (!pos.empty()) {
    std::vector<std::int64_t> rows(pos.begin(), pos.end());
    std::vector<Box3> from, to;
    for (std::size_t i : pos) {
      from.push_back(anchors[i]);
      to.push_back(p.boxes[static_cast<std::size_t>(asg.matched_gt[i])]);
    }
    reg = ops::smooth_l1(ops::gather_rows(out.deltas, rows), delta_targets(from, to));
  }
  LossParts lp;
  lp.cls = cls.item();
  lp.reg = reg.item();
  lp.total = ops::add(ops::scale(cls, cfg.cls_weight), ops::scale(reg, cfg.reg_weight));
  return lp;
}

LossParts stage2_loss(const VoxelRcnn& model, const TrainPatch& p, const TrainConfig& cfg, bool train, Rng& rng,
                      bool through_backbone) {
  const ModelConfig& mc = model.config();
  const Vec3 bounds{static_cast<double>(p.dims[0]), static_cast<double>(p.dims[1]), static_cast<double>(p.dims[2])};
  FeaturePyramid fp;
  ProposalSet ps;
  {
    std::optional<NoGradGuard> guard;
    if (!through_backbone) guard.emplace();
    fp = model.backbone(p.image);
    NoGradGuard inner;
    const RpnOutput out = model.rpn(fp, false, nullptr);
    ps = propose(out, model.anchors(fp), bounds, mc, mc.train_proposals);
  }

  std::vector<Box3> rois = ps.boxes;
  for (const Box3& g : p.boxes) {
    rois.push_back(g);
    for (int j = 0; j < cfg.gt_jitter_rois; ++j) {
      Box3 b = g;
      for (int a = 0; a < 3; ++a) {
        b.center[a] += g.size[a] * rng.uniform(-0.15, 0.15);
        b.size[a] *= std::exp(rng.uniform(-0.15, 0.15));
      }
      b = clip_box(b, bounds);
      if (b.size[0] > 1e-3 && b.size[1] > 1e-3 && b.size[2] > 1e-3) rois.push_back(b);
    }
  }
  std::vector<std::size_t> fg, bg;
  std::vector<std::size_t> match(rois.size(), 0);
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const double v = max_iou(rois[i], p.boxes, &match[i]);
    if (v >= cfg.fg_iou) fg.push_back(i);
    else if (v < cfg.bg_iou && max_iou(rois[i], p.ignore) < cfg.bg_iou) bg.push_back(i);
  }
  rng.shuffle(fg);
  rng.shuffle(bg);
  const std::size_t nfg = std::min(fg.size(), static_cast<std::size_t>(cfg.rois_per_patch / 2));
  const std::size_t nbg = std::min(bg.size(), std::max<std::size_t>(nfg, 1));
  fg.resize(nfg);
  bg.resize(nbg);

  LossParts lp;
  Tensor total = scalar(0.0);
  std::vector<Box3> sel;
  std::vector<int> labels;
  for (std::size_t i : fg) {
    sel.push_back(rois[i]);
    labels.push_back(1);
  }
  for (std::size_t i : bg) {
    sel.push_back(rois[i]);
    labels.push_back(0);
  }
  if (!sel.empty()) {
    const RcnnOutput rc = model.rcnn(fp, sel, train, &rng);
    const Tensor cls = ops::focal_loss_softmax(rc.logits, labels, cfg.focal_gamma, cfg.focal_alpha);
    lp.cls = cls.item();
    total = ops::scale(cls, cfg.cls_weight);
    if (nfg > 0) {
      std::vector<std::int64_t> rows(nfg);
      std::iota(rows.begin(), rows.end(), 0);
      std::vector<Box3> from, to;
      for (std::size_t i : fg) {
        from.push_back(rois[i]);
        to.push_back(p.boxes[match[i]]);
      }
      const Tensor reg = ops::smooth_l1(ops::gather_rows(rc.deltas, rows), delta_targets(from, to));
      lp.reg = reg.item();
      total = ops::add(total, ops::scale(reg, cfg.reg_weight));
    }
  }
  const std::size_t nmask = std::min(nfg, static_cast<std::size_t>(cfg.mask_rois_per_patch));
  if (!p.labels.empty() && nmask > 0) {
    Tensor msum = scalar(0.0);
    for (std::size_t j = 0; j < nmask; ++j) {
      const std::size_t i = fg[j];
      const Box3 d = dilate_box(rois[i], mc.mask_margin_mm, p.spacing);
      const Tensor pred = model.mask(fp, p.image, {d});
      const auto target = mask_target(p.labels, p.dims, p.ids[match[i]], d, mc.mask_out());
      msum = ops::add(msum, ops::soft_iou_loss(pred, Tensor(pred.shape(), target)));
    }
    const Tensor m = ops::scale(msum, 1.0 / static_cast<double>(nmask));
    lp.mask = m.item();
    total = ops::add(total, ops::scale(m, cfg.mask_weight));
  }
  lp.total = total;
  return lp;
}

// ---------------------------------------------------------------- training loop

namespace {

void clip_gradients(ParameterList& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double ss = 0.0;
  for (auto& p : params) {
    for (double g : p.tensor.grad()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (!(norm > max_norm)) return;
  const double f = max_norm / norm;
  for (auto& p : params) {
    for (double& g : p.tensor.mutable_grad()) g *= f;
  }
}

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> s;
  for (const auto& p : params) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

void restore(ParameterList& params, const std::vector<std::vector<double>>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].tensor.mutable_data();
    std::copy(s[i].begin(), s[i].end(), d.begin());
  }
}

}  // namespace

EpochLog run_epoch(const std::vector<TrainPatch>& patches, const LossFn& loss, ParameterList params, SgdState& opt,
                   const TrainConfig& cfg, Rng& rng) {
  EpochLog log;
  log.lr = opt.lr;
  if (patches.empty()) return log;
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_patches);
  zero_grad(params);
  int in_batch = 0;
  auto step = [&] {
    for (auto& p : params) p.tensor.mutable_grad();  // heads untouched this batch get zero grads
    clip_gradients(params, cfg.grad_clip);
    sgd_step(opt, params);
    zero_grad(params);
    in_batch = 0;
  };
  for (std::size_t k = 0; k < order.size(); ++k) {
    Rng srng = rng.fork(k);
    const LossParts lp = loss(patches[order[k]], true, srng);
    if (lp.total.requires_grad()) backward(ops::scale(lp.total, inv_b));
    log.train_loss += lp.total.item();
    log.train_cls += lp.cls;
    log.train_reg += lp.reg;
    log.train_mask += lp.mask;
    if (++in_batch == cfg.batch_patches) step();
  }
  if (in_batch > 0) step();
  const double n = static_cast<double>(patches.size());
  log.train_loss /= n;
  log.train_cls /= n;
  log.train_reg /= n;
  log.train_mask /= n;
  return log;
}

double evaluate_loss(const std::vector<TrainPatch>& patches, const LossFn& loss, const TrainConfig& cfg) {
  NoGradGuard guard;
  double s = 0.0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    Rng r(cfg.seed, 0x76616c00ULL + i);
    s += loss(patches[i], false, r).total.item();
  }
  return patches.empty() ? 0.0 : s / static_cast<double>(patches.size());
}

namespace {

std::vector<TrainPatch> build_patches(const Dataset& data, const TrainConfig& cfg, Rng& rng, bool aug) {
  std::vector<TrainPatch> out;
  for (const PatchRef& r : sample_patches(data, cfg, rng)) {
    TrainPatch p = make_patch(data.scans[r.scan], r.offset, cfg);
    if (aug) p = augment(p, rng.next_u64(), cfg);
    out.push_back(std::move(p));
  }
  return out;
}

StageResult run_stage(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg, Stage stage,
                      double lr, int epochs, ParameterList params, const LossFn& loss, const fs::path& run_dir) {
  cfg.validate();
  if (train.scans.empty()) throw ConfigError("training set is empty");
  const int k = static_cast<int>(stage);
  const std::string name = "stage" + std::to_string(k);
  std::ofstream csv;
  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    csv.open(run_dir / (name + ".csv"), std::ios::trunc);
    if (!csv) throw IoError("cannot write " + (run_dir / (name + ".csv")).string());
    csv << "epoch,lr,train_loss,train_cls,train_reg,train_mask,val_loss\n";
  }
  Rng vrng(cfg.seed, 0x76000000ULL + static_cast<std::uint64_t>(k));
  const std::vector<TrainPatch> val_patches = val.scans.empty() ? std::vector<TrainPatch>{}
                                                                : build_patches(val, cfg, vrng, false);
  SgdState opt(lr, cfg.momentum);
  opt.plateau.patience = cfg.patience;
  opt.plateau.min_delta = cfg.min_delta;

  StageResult res;
  res.best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best = snapshot(model.parameters());
  for (int e = 1; e <= epochs; ++e) {
    Rng erng(cfg.seed, (static_cast<std::uint64_t>(k) << 32) + static_cast<std::uint64_t>(e));
    const std::vector<TrainPatch> patches = build_patches(train, cfg, erng, cfg.augment);
    EpochLog log = run_epoch(patches, loss, params, opt, cfg, erng);
    log.epoch = e;
    log.val_loss = val_patches.empty() ? log.train_loss : evaluate_loss(val_patches, loss, cfg);
    if (log.val_loss < res.best_val) {
      res.best_val = log.val_loss;
      res.best_epoch = e;
      best = snapshot(model.parameters());
      if (!run_dir.empty()) save_checkpoint(run_dir / (name + "_best.ckpt"), model.parameters());
    }
    plateau_update(opt, log.val_loss);
    res.log.push_back(log);
    if (csv.is_open()) {
      csv << e << ',' << format_double(log.lr) << ',' << format_double(log.train_loss) << ','
          << format_double(log.train_cls) << ',' << format_double(log.train_reg) << ','
          << format_double(log.train_mask) << ',' << format_double(log.val_loss) << '\n';
      csv.flush();
    }
    if (!run_dir.empty()) save_checkpoint(run_dir / (name + "_last.ckpt"), model.parameters());
  }
  restore(model.parameters(), best);
  if (!run_dir.empty()) {
    if (epochs == 0) save_checkpoint(run_dir / (name + "_best.ckpt"), model.parameters());
    res.best_checkpoint = run_dir / (name + "_best.ckpt");
  }
  return res;
}

ParameterList concat_groups(const VoxelRcnn& m, std::initializer_list<const char*> prefixes) {
  ParameterList out;
  for (const char* p : prefixes) {
    auto g = m.group(p);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

}  // namespace

StageResult train_stage1(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                         const fs::path& run_dir) {
  const LossFn loss = [&](const TrainPatch& p, bool tr, Rng& r) { return stage1_loss(model, p, cfg, tr, r); };
  return run_stage(model, train, val, cfg, Stage::kRpn, cfg.stage1_lr, cfg.stage1_epochs,
                   concat_groups(model, {"backbone.", "rpn."}), loss, run_dir);
}

StageResult train_stage2(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                         const fs::path& stage1_checkpoint, const fs::path& run_dir) {
  if (!fs::exists(stage1_checkpoint)) throw IoError("stage-1 checkpoint not found: " + stage1_checkpoint.string());
  load_checkpoint(stage1_checkpoint, model.parameters());
  const LossFn loss = [&](const TrainPatch& p, bool tr, Rng& r) { return stage2_loss(model, p, cfg, tr, r); };
  return run_stage(model, train, val, cfg, Stage::kHeads, cfg.stage2_lr, cfg.stage2_epochs,
                   concat_groups(model, {"rcnn.", "mask."}), loss, run_dir);
}

StageResult train_finetune(VoxelRcnn& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                           const fs::path& run_dir) {
  const LossFn loss = [&](const TrainPatch& p, bool tr, Rng& r) {
    LossParts a = stage1_loss(model, p, cfg, tr, r);
    const LossParts b = stage2_loss(model, p, cfg, tr, r, true);
    a.total = ops::add(a.total, b.total);
    a.cls += b.cls;
    a.reg += b.reg;
    a.mask = b.mask;
    return a;
  };
  return run_stage(model, train, val, cfg, Stage::kFinetune, cfg.finetune_lr, cfg.finetune_epochs,
                   model.parameters(), loss, run_dir);
}

// ---------------------------------------------------------------- folds

std::vector<Fold> kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: need at least 2 folds");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("kfold_split: duplicate scan ids");
  if (ids.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("kfold_split: " + std::to_string(ids.size()) + " scans for " + std::to_string(k) + " folds");
  }
  Rng rng(seed, 0x6b666f6c64ULL);
  std::vector<std::string> shuffled = ids;
  rng.shuffle(shuffled);
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < shuffled.size(); ++i) folds[i % static_cast<std::size_t>(k)].test.push_back(shuffled[i]);
  for (auto& f : folds) {
    std::sort(f.test.begin(), f.test.end());
    const std::set<std::string> held(f.test.begin(), f.test.end());
    for (const auto& id : ids) {
      if (!held.count(id)) f.train.push_back(id);
    }
  }
  return folds;
}

std::pair<std::vector<std::string>, std::vector<std::string>> validation_split(const std::vector<std::string>& train_ids,
                                                                               int val_scans) {
  if (val_scans < 0) throw ConfigError("val_scans must be >= 0");
  if (val_scans > 0 && static_cast<std::size_t>(val_scans) >= train_ids.size()) {
    throw ConfigError("val_scans leaves no training scans");
  }
  std::vector<std::string> fit(train_ids.begin(), train_ids.end() - val_scans);
  std::vector<std::string> val(train_ids.end() - val_scans, train_ids.end());
  return {fit, val};
}

}  // namespace voxelrcnn
