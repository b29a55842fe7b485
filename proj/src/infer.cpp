#include "voxelrcnn/infer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/eval.hpp"

namespace voxelrcnn {

void InferConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("infer config: " + m); };
  if (window < 8 || window % 8) fail("window must be a positive multiple of 8");
  if (!(overlap >= 0.0 && overlap <= 0.9)) fail("overlap must be in [0, 0.9]");
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) fail("nms_iou must be in [0, 1]");
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) fail("mask_threshold must be in (0, 1)");
  if (!(hu_min < hu_max)) fail("hu_min must be below hu_max");
  if (!(spacing_mm > 0.0)) fail("spacing_mm must be positive");
  if (!(fp_match_iou >= 0.0 && fp_match_iou < 1.0)) fail("fp_match_iou must be in [0, 1)");
  if (max_candidates < 0 || threads < 0) fail("counts must be >= 0");
}

namespace {

template <typename Visit>
void visit_fields(Visit&& v, InferConfig& c) {
  v("window", c.window);
  v("overlap", c.overlap);
  v("nms_iou", c.nms_iou);
  v("mask_threshold", c.mask_threshold);
  v("largest_component", c.largest_component);
  v("hu_min", c.hu_min);
  v("hu_max", c.hu_max);
  v("spacing_mm", c.spacing_mm);
  v("fp_match_iou", c.fp_match_iou);
  v("max_candidates", c.max_candidates);
  v("threads", c.threads);
}

}  // namespace

void InferConfig::to_keyvalues(KeyValues& kv, const std::string& prefix) const {
  InferConfig c = *this;
  visit_fields([&](const std::string& k, auto& field) { kv.set(prefix + k, field); }, c);
}

InferConfig InferConfig::from_keyvalues(const KeyValues& kv, const std::string& prefix) {
  InferConfig c;
  visit_fields([&](const std::string& k, auto& field) { kv.get(prefix + k, field); }, c);
  c.validate();
  return c;
}

std::vector<std::string> InferConfig::keys(const std::string& prefix) {
  std::vector<std::string> out;
  InferConfig c;
  visit_fields([&](const std::string& k, auto&) { out.push_back(prefix + k); }, c);
  return out;
}

// ---------------------------------------------------------------- windows

std::vector<std::int64_t> window_offsets(std::int64_t dim, std::int64_t window, double overlap) {
  if (window < 1) throw ArgumentError("window must be >= 1");
  if (!(overlap >= 0.0 && overlap <= 0.9)) throw ArgumentError("overlap must be in [0, 0.9]");
  std::vector<std::int64_t> out{0};
  if (dim <= window) return out;
  const std::int64_t stride =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(window) * (1.0 - overlap))));
  std::int64_t o = 0;
  while (o + window < dim) {
    o = std::min(o + stride, dim - window);
    out.push_back(o);
  }
  return out;
}

Index3 effective_window(const Index3& dims, std::int64_t window) {
  Index3 w{};
  for (int a = 0; a < 3; ++a) w[a] = std::min(window, (dims[a] + 7) / 8 * 8);
  return w;
}

std::vector<Index3> sliding_windows(const Index3& dims, std::int64_t window, double overlap) {
  const Index3 w = effective_window(dims, window);
  const auto oz = window_offsets(dims[0], w[0], overlap);
  const auto oy = window_offsets(dims[1], w[1], overlap);
  const auto ox = window_offsets(dims[2], w[2], overlap);
  std::vector<Index3> out;
  out.reserve(oz.size() * oy.size() * ox.size());
  for (auto z : oz)
    for (auto y : oy)
      for (auto x : ox) out.push_back({z, y, x});
  return out;
}

int worker_count(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  n = std::max(n, 1);
  if (const char* env = std::getenv("VOXELRCNN_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) n = std::min<long>(n, cap);
  }
  return n;
}

// ---------------------------------------------------------------- detector

WindowDetector model_detector(const VoxelRcnn& model, const InferConfig& cfg) {
  return [&model, cfg](const Volume& v, const Index3& offset, const Index3& size) {
    NoGradGuard ng;
    const ModelConfig& mc = model.config();
    const Patch crop = normalized_crop(v, offset, size, cfg.hu_min, cfg.hu_max);
    const Tensor x({1, 1, size[0], size[1], size[2]}, crop.data);
    const FeaturePyramid fp = model.backbone(x);
    const RpnOutput out = model.rpn(fp, false, nullptr);
    const Vec3 wdims{static_cast<double>(size[0]), static_cast<double>(size[1]), static_cast<double>(size[2])};
    const ProposalSet ps = propose(out, model.anchors(fp), wdims, mc, mc.infer_proposals);
    std::vector<Detection> dets;
    if (ps.boxes.empty()) return dets;

    // Boxes stay inside the part of the window that lies in the volume.
    Vec3 bounds{};
    for (int a = 0; a < 3; ++a) {
      bounds[a] = static_cast<double>(std::min(size[a], v.dims()[a] - offset[a]));
    }
    const RcnnOutput rc = model.rcnn(fp, ps.boxes, false, nullptr);
    const std::vector<double> fg = foreground_scores(rc.logits);
    const auto delta = rc.deltas.data();
    std::vector<Box3> refined(ps.boxes.size());
    std::vector<Box3> dilated(ps.boxes.size());
    for (std::size_t i = 0; i < ps.boxes.size(); ++i) {
      Delta3 d;
      for (int k = 0; k < 6; ++k) d.v[k] = delta[6 * i + k];
      for (int k = 3; k < 6; ++k) d.v[k] = std::clamp(d.v[k], -4.0, 4.0);
      Box3 b = clip_box(decode(ps.boxes[i], d), bounds);
      if (!(b.volume() > 0.0)) b = clip_box(ps.boxes[i], bounds);
      refined[i] = b;
      dilated[i] = dilate_box(b, mc.mask_margin_mm, v.spacing());
    }
    const Tensor probs = model.mask(fp, x, dilated);
    const Index3 md = mc.mask_out();
    const std::size_t per = static_cast<std::size_t>(md[0] * md[1] * md[2]);
    const auto pd = probs.data();
    const Vec3 off{static_cast<double>(offset[0]), static_cast<double>(offset[1]), static_cast<double>(offset[2])};
    for (std::size_t i = 0; i < refined.size(); ++i) {
      if (!(refined[i].volume() > 0.0)) continue;
      Detection det;
      det.box = refined[i].translated(off);
      det.score = fg[i];
      det.mask_box = dilated[i].translated(off);
      det.mask_dims = md;
      det.mask_prob.assign(pd.begin() + static_cast<std::ptrdiff_t>(i * per),
                           pd.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
      dets.push_back(std::move(det));
    }
    return dets;
  };
}

// ---------------------------------------------------------------- candidates

namespace {

double sample_trilinear(const std::vector<float>& g, const Index3& d, double z, double y, double x) {
  const double c[3] = {std::clamp(z, 0.0, static_cast<double>(d[0] - 1)),
                       std::clamp(y, 0.0, static_cast<double>(d[1] - 1)),
                       std::clamp(x, 0.0, static_cast<double>(d[2] - 1))};
  std::int64_t i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    i0[a] = static_cast<std::int64_t>(std::floor(c[a]));
    i1[a] = std::min(i0[a] + 1, d[a] - 1);
    f[a] = c[a] - static_cast<double>(i0[a]);
  }
  auto at = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) {
    return static_cast<double>(g[static_cast<std::size_t>((zz * d[1] + yy) * d[2] + xx)]);
  };
  double out = 0.0;
  for (int k = 0; k < 8; ++k) {
    const std::int64_t zz = (k & 4) ? i1[0] : i0[0];
    const std::int64_t yy = (k & 2) ? i1[1] : i0[1];
    const std::int64_t xx = (k & 1) ? i1[2] : i0[2];
    const double w = ((k & 4) ? f[0] : 1.0 - f[0]) * ((k & 2) ? f[1] : 1.0 - f[1]) * ((k & 1) ? f[2] : 1.0 - f[2]);
    if (w != 0.0) out += w * at(zz, yy, xx);
  }
  return out;
}

// Keeps the component with the most voxels inside `box` (crop coordinates).
void keep_box_component(std::vector<std::uint8_t>& mask, const Index3& dims, const Box3& box) {
  const Components comps = label_components(mask, dims);
  if (comps.count <= 1) return;
  std::vector<std::int64_t> inside(static_cast<std::size_t>(comps.count) + 1, 0);
  std::vector<std::int64_t> total(inside.size(), 0);
  std::size_t k = 0;
  for (std::int64_t z = 0; z < dims[0]; ++z)
    for (std::int64_t y = 0; y < dims[1]; ++y)
      for (std::int64_t x = 0; x < dims[2]; ++x, ++k) {
        const auto c = static_cast<std::size_t>(comps.labels[k]);
        if (c == 0) continue;
        ++total[c];
        const double p[3] = {z + 0.5, y + 0.5, x + 0.5};
        bool in = true;
        for (int a = 0; a < 3; ++a) in = in && p[a] >= box.lo(a) && p[a] < box.hi(a);
        if (in) ++inside[c];
      }
  std::size_t best = 1;
  for (std::size_t c = 2; c < inside.size(); ++c) {
    if (inside[c] > inside[best] || (inside[c] == inside[best] && total[c] > total[best])) best = c;
  }
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<std::size_t>(comps.labels[i]) == best;
}

}  // namespace

Candidate to_candidate(const Volume& v, const std::string& scan_id, const Detection& d, const InferConfig& cfg) {
  Candidate c;
  c.scan_id = scan_id;
  c.score = d.score;
  const Vec3& sp = v.spacing();
  Vec3 centre_index{}, size{};
  for (int a = 0; a < 3; ++a) {
    centre_index[a] = d.box.center[a] - 0.5;
    size[a] = d.box.size[a] * sp[a];
  }
  c.center_world = v.index_to_world(centre_index);
  c.size_world = size;
  c.mask_spacing = sp;

  Index3 lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(d.mask_box.lo(a))), 0, v.dims()[a]);
    hi[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(d.mask_box.hi(a))), 0, v.dims()[a]);
    if (hi[a] < lo[a]) hi[a] = lo[a];
  }
  const Index3 md{hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]};
  c.mask_dims = md;
  c.mask_origin = v.index_to_world({static_cast<double>(lo[0]), static_cast<double>(lo[1]), static_cast<double>(lo[2])});
  c.mask.assign(static_cast<std::size_t>(md[0] * md[1] * md[2]), 0);
  const bool has_prob = !d.mask_prob.empty() && d.mask_box.volume() > 0.0;
  std::size_t k = 0;
  for (std::int64_t z = 0; z < md[0]; ++z)
    for (std::int64_t y = 0; y < md[1]; ++y)
      for (std::int64_t x = 0; x < md[2]; ++x, ++k) {
        if (!has_prob) continue;
        const double p[3] = {lo[0] + z + 0.5, lo[1] + y + 0.5, lo[2] + x + 0.5};
        double g[3];
        for (int a = 0; a < 3; ++a) {
          g[a] = (p[a] - d.mask_box.lo(a)) / d.mask_box.size[a] * static_cast<double>(d.mask_dims[a]) - 0.5;
        }
        c.mask[k] = sample_trilinear(d.mask_prob, d.mask_dims, g[0], g[1], g[2]) >= cfg.mask_threshold;
      }
  if (cfg.largest_component) {
    const Vec3 shift{-static_cast<double>(lo[0]), -static_cast<double>(lo[1]), -static_cast<double>(lo[2])};
    keep_box_component(c.mask, md, d.box.translated(shift));
  }
  c.mask_volume_mm3 = static_cast<double>(c.mask_count()) * v.voxel_volume_mm3();
  return c;
}

Box3 candidate_box(const Volume& v, const Candidate& c) {
  const Vec3 idx = v.world_to_index(c.center_world);
  Box3 b;
  for (int a = 0; a < 3; ++a) {
    b.center[a] = idx[a] + 0.5;
    b.size[a] = c.size_world[a] / v.spacing()[a];
  }
  return b;
}

namespace {

void check_spacing(const Volume& v, const InferConfig& cfg) {
  for (int a = 0; a < 3; ++a) {
    if (std::abs(v.spacing()[a] - cfg.spacing_mm) > 1e-6) {
      throw ContractError("scan spacing " + std::to_string(v.spacing()[a]) + " mm does not match " +
                          std::to_string(cfg.spacing_mm) + " mm; resample first");
    }
  }
}

// Runs `jobs` indexed tasks on the worker pool; result i goes to slot i.
template <typename Fn>
void parallel_for(std::size_t jobs, int workers, Fn&& fn) {
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs)));
  if (n <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

bool inside_lung(const Volume& lung, const Vec3& world) {
  const Vec3 idx = lung.world_to_index(world);
  const std::int64_t z = std::llround(idx[0]), y = std::llround(idx[1]), x = std::llround(idx[2]);
  return lung.contains(z, y, x) && lung.at(z, y, x) != 0.f;
}

void sort_by_score(std::vector<Candidate>& c) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
}

}  // namespace

std::vector<Candidate> infer_volume(const Volume& v, const std::string& scan_id, const WindowDetector& detect,
                                    const InferConfig& cfg, const Volume* lung_mask) {
  cfg.validate();
  check_spacing(v, cfg);
  if (v.empty()) return {};
  const std::vector<Index3> wins = sliding_windows(v.dims(), cfg.window, cfg.overlap);
  const Index3 wsize = effective_window(v.dims(), cfg.window);
  std::vector<std::vector<Detection>> per(wins.size());
  parallel_for(wins.size(), worker_count(cfg.threads), [&](std::size_t i) { per[i] = detect(v, wins[i], wsize); });

  std::vector<Detection> all;
  for (auto& w : per) {
    for (auto& d : w) all.push_back(std::move(d));
  }
  std::vector<ScoredBox> sb(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) sb[i] = {all[i].box, all[i].score};
  const std::vector<std::size_t> keep = nms3d(sb, cfg.nms_iou);

  std::vector<Candidate> out;
  for (std::size_t i : keep) {
    Candidate c = to_candidate(v, scan_id, all[i], cfg);
    if (!(c.mask_volume_mm3 > 0.0)) continue;
    if (lung_mask != nullptr && !inside_lung(*lung_mask, c.center_world)) continue;
    c.score = std::clamp(c.score, 0.0, 1.0);
    out.push_back(std::move(c));
  }
  sort_by_score(out);
  if (cfg.max_candidates > 0 && out.size() > static_cast<std::size_t>(cfg.max_candidates)) {
    out.resize(static_cast<std::size_t>(cfg.max_candidates));
  }
  return out;
}

std::vector<Candidate> infer_volume(const Volume& v, const std::string& scan_id, const VoxelRcnn& model,
                                    const InferConfig& cfg, const Volume* lung_mask) {
  return infer_volume(v, scan_id, model_detector(model, cfg), cfg, lung_mask);
}

std::vector<Candidate> fp_reduce(const Volume& v, const std::vector<Candidate>& cands, const WindowDetector& detect,
                                 const InferConfig& cfg) {
  cfg.validate();
  check_spacing(v, cfg);
  const Index3 wsize = effective_window(v.dims(), cfg.window);
  std::vector<Box3> boxes(cands.size());
  std::vector<Index3> offsets(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    boxes[i] = candidate_box(v, cands[i]);
    for (int a = 0; a < 3; ++a) {
      const auto o = static_cast<std::int64_t>(
          std::llround(boxes[i].center[a] - 0.5 * static_cast<double>(wsize[a])));
      offsets[i][a] = std::clamp<std::int64_t>(o, 0, std::max<std::int64_t>(0, v.dims()[a] - wsize[a]));
    }
  }
  std::vector<double> score(cands.size(), -1.0);
  parallel_for(cands.size(), worker_count(cfg.threads), [&](std::size_t i) {
    double best_iou = cfg.fp_match_iou;
    for (const Detection& d : detect(v, offsets[i], wsize)) {
      const double iou = iou3d(d.box, boxes[i]);
      if (iou > best_iou) {
        best_iou = iou;
        score[i] = d.score;
      }
    }
  });
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (score[i] < 0.0) continue;
    Candidate c = cands[i];
    c.score = std::clamp(score[i], 0.0, 1.0);
    out.push_back(std::move(c));
  }
  sort_by_score(out);
  return out;
}

std::vector<Candidate> fp_reduce(const Volume& v, const std::vector<Candidate>& cands, const VoxelRcnn& model,
                                 const InferConfig& cfg) {
  return fp_reduce(v, cands, model_detector(model, cfg), cfg);
}

Volume stitch_masks(const std::vector<Candidate>& cands, const Index3& dims, const Vec3& spacing, const Vec3& origin) {
  std::vector<std::size_t> order(cands.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cands[a].score > cands[b].score; });
  Volume out = Volume::filled(dims, spacing, origin, ElementType::kUInt8, 0.f);
  std::vector<float> vox = out.voxels();
  const std::size_t n = std::min<std::size_t>(order.size(), 255);
  for (std::size_t r = 0; r < n; ++r) {
    const Candidate& c = cands[order[r]];
    const Index3& md = c.mask_dims;
    if (c.mask.empty()) continue;
    // Bounding voxels of the crop in the output grid, then nearest lookup back.
    Index3 lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      const double w0 = c.mask_origin[a] - 0.5 * c.mask_spacing[a];
      const double w1 = c.mask_origin[a] + (static_cast<double>(md[a]) - 0.5) * c.mask_spacing[a];
      lo[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor((w0 - origin[a]) / spacing[a])), 0, dims[a]);
      hi[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil((w1 - origin[a]) / spacing[a])) + 1, 0, dims[a]);
    }
    const auto label = static_cast<float>(r + 1);
    for (std::int64_t z = lo[0]; z < hi[0]; ++z)
      for (std::int64_t y = lo[1]; y < hi[1]; ++y)
        for (std::int64_t x = lo[2]; x < hi[2]; ++x) {
          const std::int64_t p[3] = {z, y, x};
          std::int64_t q[3];
          bool ok = true;
          for (int a = 0; a < 3; ++a) {
            const double w = origin[a] + static_cast<double>(p[a]) * spacing[a];
            q[a] = std::llround((w - c.mask_origin[a]) / c.mask_spacing[a]);
            ok = ok && q[a] >= 0 && q[a] < md[a];
          }
          if (!ok) continue;
          if (!c.mask[static_cast<std::size_t>((q[0] * md[1] + q[1]) * md[2] + q[2])]) continue;
          float& dst = vox[static_cast<std::size_t>(out.index(z, y, x))];
          if (dst == 0.f) dst = label;
        }
  }
  return out.with_voxels(std::move(vox), ElementType::kUInt8);
}

}  // namespace voxelrcnn
