#include "voxelrcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn {

namespace {

double dist2(const Vec3& a, const Vec3& b) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- matching

ScanMatch match(const std::vector<Candidate>& cands, const std::vector<Annotation>& gts) {
  ScanMatch m;
  if (!cands.empty()) m.scan_id = cands.front().scan_id;
  else if (!gts.empty()) m.scan_id = gts.front().scan_id;

  std::vector<std::size_t> order(cands.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cands[a].score > cands[b].score; });
  std::vector<bool> claimed(gts.size(), false);
  for (std::size_t ci : order) {
    const Vec3& c = cands[ci].center_world;
    std::size_t best = gts.size();
    double best_d = std::numeric_limits<double>::infinity();
    bool hit_any = false;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double r = 0.5 * gts[g].diameter_mm;
      const double d = dist2(c, gts[g].center_world);
      if (d > r * r) continue;
      hit_any = true;
      if (!claimed[g] && d < best_d) {
        best_d = d;
        best = g;
      }
    }
    if (best < gts.size()) {
      claimed[best] = true;
      m.tp.emplace_back(ci, best);
    } else if (hit_any) {
      m.duplicates.push_back(ci);
    } else {
      m.fp.push_back(ci);
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!claimed[g]) m.fn.push_back(g);
  }
  return m;
}

std::size_t MatchResult::gt_count() const {
  std::size_t n = 0;
  for (const auto& g : gts) n += g.size();
  return n;
}

MatchResult match_all(const std::vector<Candidate>& cands, const std::vector<Annotation>& gts,
                      std::vector<std::string> scan_ids) {
  if (scan_ids.empty()) {
    std::set<std::string> ids;
    for (const auto& c : cands) ids.insert(c.scan_id);
    for (const auto& g : gts) ids.insert(g.scan_id);
    scan_ids.assign(ids.begin(), ids.end());
  }
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < scan_ids.size(); ++i) {
    if (!slot.emplace(scan_ids[i], i).second) throw ArgumentError("duplicate scan id " + scan_ids[i]);
  }
  MatchResult r;
  r.candidates.resize(scan_ids.size());
  r.gts.resize(scan_ids.size());
  for (const auto& c : cands) {
    if (auto it = slot.find(c.scan_id); it != slot.end()) r.candidates[it->second].push_back(c);
  }
  for (const auto& g : gts) {
    if (auto it = slot.find(g.scan_id); it != slot.end()) r.gts[it->second].push_back(g);
  }
  for (std::size_t i = 0; i < scan_ids.size(); ++i) {
    r.scans.push_back(match(r.candidates[i], r.gts[i]));
    r.scans.back().scan_id = scan_ids[i];
  }
  return r;
}

// ---------------------------------------------------------------- FROC

FrocResult froc(const MatchResult& m) {
  FrocResult f;
  f.n_scans = m.scans.size();
  f.n_gt = m.gt_count();
  if (f.n_scans == 0) throw ContractError("froc: no scans");
  if (f.n_gt == 0) throw ContractError("froc: no ground-truth nodules, sensitivity undefined");

  std::vector<std::pair<double, bool>> scored;  // (score, is_tp)
  for (std::size_t s = 0; s < m.scans.size(); ++s) {
    for (const auto& [ci, g] : m.scans[s].tp) scored.emplace_back(m.candidates[s][ci].score, true);
    for (std::size_t ci : m.scans[s].fp) scored.emplace_back(m.candidates[s][ci].score, false);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < scored.size();) {
    const double t = scored[i].first;
    for (; i < scored.size() && scored[i].first == t; ++i) {
      if (scored[i].second) ++tp;
      else ++fp;
    }
    f.thresholds.push_back(t);
    f.fps_per_scan.push_back(static_cast<double>(fp) / static_cast<double>(f.n_scans));
    f.sensitivity_curve.push_back(static_cast<double>(tp) / static_cast<double>(f.n_gt));
  }
  f.n_tp = tp;
  f.n_fp = fp;

  // One point per FP rate, keeping the highest sensitivity reached there.
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < f.fps_per_scan.size(); ++i) {
    if (!xs.empty() && xs.back() == f.fps_per_scan[i]) ys.back() = f.sensitivity_curve[i];
    else {
      xs.push_back(f.fps_per_scan[i]);
      ys.push_back(f.sensitivity_curve[i]);
    }
  }
  double total = 0.0;
  for (std::size_t k = 0; k < kFrocRates.size(); ++k) {
    const double x = kFrocRates[k];
    double s = 0.0;
    if (!xs.empty()) {
      if (x <= xs.front()) s = ys.front();
      else if (x >= xs.back()) s = ys.back();
      else {
        const auto j = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
        const std::size_t i = j - 1;
        s = xs[i] == x ? ys[i] : ys[i] + (ys[j] - ys[i]) * (x - xs[i]) / (xs[j] - xs[i]);
      }
    }
    f.sensitivity[k] = s;
    total += s;
  }
  f.cpm = total / static_cast<double>(kFrocRates.size());
  return f;
}

std::string froc_summary(const FrocResult& f) {
  std::ostringstream os;
  os << "scans " << f.n_scans << "\n";
  os << "gt_nodules " << f.n_gt << "\n";
  os << "true_positives " << f.n_tp << "\n";
  os << "false_positives " << f.n_fp << "\n";
  for (std::size_t k = 0; k < kFrocRates.size(); ++k) {
    os << "sensitivity@" << kFrocRates[k] << " " << fixed(f.sensitivity[k], 4) << "\n";
  }
  os << "cpm " << fixed(f.cpm, 4) << "\n";
  os << "interpolation linear, flat left of first operating point\n";
  return os.str();
}

// ---------------------------------------------------------------- overlap metrics

double dsc(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dsc: sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

namespace {

std::vector<Vec3> surface_points(const std::vector<std::uint8_t>& m, const Index3& d, const Vec3& sp) {
  auto in = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= d[0] || y >= d[1] || x >= d[2]) return false;
    return m[static_cast<std::size_t>((z * d[1] + y) * d[2] + x)] != 0;
  };
  std::vector<Vec3> pts;
  for (std::int64_t z = 0; z < d[0]; ++z)
    for (std::int64_t y = 0; y < d[1]; ++y)
      for (std::int64_t x = 0; x < d[2]; ++x) {
        if (!in(z, y, x)) continue;
        if (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) ||
            !in(z, y, x - 1) || !in(z, y, x + 1)) {
          pts.push_back({static_cast<double>(z) * sp[0], static_cast<double>(y) * sp[1],
                         static_cast<double>(x) * sp[2]});
        }
      }
  return pts;
}

std::vector<double> directed(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) best = std::min(best, dist2(p, q));
    out.push_back(std::sqrt(best));
  }
  return out;
}

double reduce(std::vector<double> d, bool percentile95) {
  if (!percentile95) return *std::max_element(d.begin(), d.end());
  std::sort(d.begin(), d.end());
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size())));
  return d[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace

double hausdorff_mm(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                    const Index3& dims, const Vec3& spacing, bool percentile95) {
  const auto n = static_cast<std::size_t>(volume_of(dims));
  if (a.size() != n || b.size() != n) throw ShapeError("hausdorff_mm: grids do not match dims");
  const auto sa = surface_points(a, dims, spacing);
  const auto sb = surface_points(b, dims, spacing);
  if (sa.empty() || sb.empty()) throw ContractError("hausdorff_mm: empty point set");
  return std::max(reduce(directed(sa, sb), percentile95), reduce(directed(sb, sa), percentile95));
}

double volume_correlation(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("volume_correlation: lists differ in length");
  if (pred.size() < 2) throw ContractError("volume_correlation: need at least two pairs");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mg = std::accumulate(gt.begin(), gt.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sxy += (pred[i] - mp) * (gt[i] - mg);
    sxx += (pred[i] - mp) * (pred[i] - mp);
    syy += (gt[i] - mg) * (gt[i] - mg);
  }
  if (sxx == 0.0 || syy == 0.0) throw ContractError("volume_correlation: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------- components

Components label_components(const std::vector<std::uint8_t>& mask, const Index3& dims) {
  if (static_cast<std::int64_t>(mask.size()) != volume_of(dims)) {
    throw ShapeError("label_components: mask does not match dims");
  }
  Components c;
  c.labels.assign(mask.size(), 0);
  std::deque<std::int64_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || c.labels[start]) continue;
    const std::int32_t id = ++c.count;
    c.labels[start] = id;
    queue.push_back(static_cast<std::int64_t>(start));
    while (!queue.empty()) {
      const std::int64_t v = queue.front();
      queue.pop_front();
      const std::int64_t z = v / (dims[1] * dims[2]), y = (v / dims[2]) % dims[1], x = v % dims[2];
      for (std::int64_t dz = -1; dz <= 1; ++dz)
        for (std::int64_t dy = -1; dy <= 1; ++dy)
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const std::int64_t zz = z + dz, yy = y + dy, xx = x + dx;
            if (zz < 0 || yy < 0 || xx < 0 || zz >= dims[0] || yy >= dims[1] || xx >= dims[2]) continue;
            const auto k = static_cast<std::size_t>((zz * dims[1] + yy) * dims[2] + xx);
            if (mask[k] && !c.labels[k]) {
              c.labels[k] = id;
              queue.push_back(static_cast<std::int64_t>(k));
            }
          }
    }
  }
  return c;
}

std::int32_t component_for(const Components& c, const Volume& frame, const Annotation& a) {
  const Index3& d = frame.dims();
  const Vec3 u = frame.world_to_index(a.center_world);
  Index3 ci;
  for (int i = 0; i < 3; ++i) ci[i] = static_cast<std::int64_t>(std::llround(u[i]));
  if (frame.contains(ci[0], ci[1], ci[2])) {
    const std::int32_t id = c.labels[static_cast<std::size_t>(frame.index(ci[0], ci[1], ci[2]))];
    if (id) return id;
  }
  const double r = 0.5 * a.diameter_mm;
  const Vec3& sp = frame.spacing();
  Index3 lo, hi;
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(u[i] - r / sp[i])));
    hi[i] = std::min<std::int64_t>(d[i] - 1, static_cast<std::int64_t>(std::ceil(u[i] + r / sp[i])));
  }
  std::int32_t best = 0;
  double best_d = r * r;
  for (std::int64_t z = lo[0]; z <= hi[0]; ++z)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t x = lo[2]; x <= hi[2]; ++x) {
        const std::int32_t id = c.labels[static_cast<std::size_t>(frame.index(z, y, x))];
        if (!id) continue;
        const Vec3 p{(static_cast<double>(z) - u[0]) * sp[0], (static_cast<double>(y) - u[1]) * sp[1],
                     (static_cast<double>(x) - u[2]) * sp[2]};
        const double dd = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if (dd <= best_d) {
          best_d = dd;
          best = id;
        }
      }
  return best;
}

// ---------------------------------------------------------------- segmentation report

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0))};
}

SegmentationReport segmentation_report(const MatchResult& m, const std::vector<Volume>& gt_masks,
                                       bool percentile95) {
  if (gt_masks.size() != m.scans.size()) {
    throw ArgumentError("segmentation_report: need one mask slot per scan");
  }
  SegmentationReport rep;
  rep.hd95 = percentile95;
  for (std::size_t s = 0; s < m.scans.size(); ++s) {
    const Volume& gv = gt_masks[s];
    if (gv.empty() || m.scans[s].tp.empty()) continue;
    std::vector<std::uint8_t> bin(gv.voxels().size());
    for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = gv.voxels()[i] != 0.f;
    const Components comps = label_components(bin, gv.dims());
    const Index3& gd = gv.dims();
    const Vec3& gs = gv.spacing();

    for (const auto& [ci, gi] : m.scans[s].tp) {
      const Candidate& c = m.candidates[s][ci];
      const Annotation& a = m.gts[s][gi];
      const std::int32_t id = component_for(comps, gv, a);
      if (id == 0) continue;

      // Region: GT component bbox joined with the crop footprint, padded by one.
      Index3 lo{gd[0], gd[1], gd[2]}, hi{-1, -1, -1};
      for (std::int64_t z = 0; z < gd[0]; ++z)
        for (std::int64_t y = 0; y < gd[1]; ++y)
          for (std::int64_t x = 0; x < gd[2]; ++x) {
            if (comps.labels[static_cast<std::size_t>(gv.index(z, y, x))] != id) continue;
            const Index3 p{z, y, x};
            for (int i = 0; i < 3; ++i) {
              lo[i] = std::min(lo[i], p[i]);
              hi[i] = std::max(hi[i], p[i]);
            }
          }
      if (c.mask_count() > 0) {
        for (int i = 0; i < 3; ++i) {
          const double w0 = c.mask_origin[i] - 0.5 * c.mask_spacing[i];
          const double w1 = c.mask_origin[i] + (static_cast<double>(c.mask_dims[i]) - 0.5) * c.mask_spacing[i];
          const double u0 = (w0 - gv.origin()[i]) / gs[i], u1 = (w1 - gv.origin()[i]) / gs[i];
          lo[i] = std::min(lo[i], static_cast<std::int64_t>(std::floor(u0)));
          hi[i] = std::max(hi[i], static_cast<std::int64_t>(std::ceil(u1)));
        }
      }
      for (int i = 0; i < 3; ++i) {
        lo[i] = std::max<std::int64_t>(0, lo[i] - 1);
        hi[i] = std::min<std::int64_t>(gd[i] - 1, hi[i] + 1);
      }
      const Index3 rd{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
      std::vector<std::uint8_t> g(static_cast<std::size_t>(volume_of(rd)), 0), p(g.size(), 0);
      std::size_t k = 0;
      for (std::int64_t z = lo[0]; z <= hi[0]; ++z)
        for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
          for (std::int64_t x = lo[2]; x <= hi[2]; ++x, ++k) {
            g[k] = comps.labels[static_cast<std::size_t>(gv.index(z, y, x))] == id;
            const Vec3 w = gv.index_to_world({static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)});
            Index3 q;
            bool inside = true;
            for (int i = 0; i < 3; ++i) {
              q[i] = static_cast<std::int64_t>(std::llround((w[i] - c.mask_origin[i]) / c.mask_spacing[i]));
              inside = inside && q[i] >= 0 && q[i] < c.mask_dims[i];
            }
            if (inside) {
              p[k] = c.mask[static_cast<std::size_t>((q[0] * c.mask_dims[1] + q[1]) * c.mask_dims[2] + q[2])] != 0;
            }
          }
      NoduleSegmentation ns;
      ns.scan_id = m.scans[s].scan_id;
      ns.gt_index = gi;
      ns.score = c.score;
      ns.dsc = dsc(g, p);
      const auto np = std::count(p.begin(), p.end(), std::uint8_t{1});
      const auto ng = std::count(g.begin(), g.end(), std::uint8_t{1});
      ns.hd_mm = np > 0 ? hausdorff_mm(g, p, rd, gs, percentile95) : std::nan("");
      ns.pred_volume_mm3 = static_cast<double>(np) * gv.voxel_volume_mm3();
      ns.gt_volume_mm3 = static_cast<double>(ng) * gv.voxel_volume_mm3();
      rep.nodules.push_back(ns);
    }
  }
  std::vector<double> d, h, pv, gvv;
  for (const auto& n : rep.nodules) {
    d.push_back(n.dsc);
    if (!std::isnan(n.hd_mm)) h.push_back(n.hd_mm);
    pv.push_back(n.pred_volume_mm3);
    gvv.push_back(n.gt_volume_mm3);
  }
  std::tie(rep.dsc_mean, rep.dsc_sd) = mean_sd(d);
  std::tie(rep.hd_mean, rep.hd_sd) = mean_sd(h);
  rep.volume_r = std::nan("");
  if (pv.size() >= 2) {
    try {
      rep.volume_r = volume_correlation(pv, gvv);
    } catch (const ContractError&) {
    }
  }
  return rep;
}

std::string SegmentationReport::summary() const {
  std::ostringstream os;
  if (nodules.empty()) {
    os << "segmentation no matches\n";
    return os.str();
  }
  os << "segmentation_nodules " << nodules.size() << "\n";
  os << "dsc " << fixed(dsc_mean, 4) << " ± " << fixed(dsc_sd, 4) << "\n";
  os << (hd95 ? "hd95_mm " : "hd_mm ") << fixed(hd_mean, 3) << " ± " << fixed(hd_sd, 3) << "\n";
  os << "volume_r " << fixed(volume_r, 4) << "\n";
  return os.str();
}

}  // namespace voxelrcnn
