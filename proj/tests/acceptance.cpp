// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run everything
//   acceptance 1 3 4      run a subset by number
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "voxelrcnn/conv.hpp"
#include "voxelrcnn/eval.hpp"
#include "voxelrcnn/geom3d.hpp"
#include "voxelrcnn/infer.hpp"
#include "voxelrcnn/losses.hpp"
#include "voxelrcnn/pipeline.hpp"
#include "voxelrcnn/roi_align.hpp"

namespace fs = std::filesystem;
using namespace voxelrcnn;
using voxelrcnn::testing::check_gradients;
using voxelrcnn::testing::probe;
using voxelrcnn::testing::random_tensor;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- 1. kernels

// Corners on a 1/4 grid, so counting 1/4-cells is an exact voxelization.
Box3 quarter_box(Rng& rng) {
  Vec3 lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    const auto l = rng.uniform_int(0, 56), s = rng.uniform_int(1, 24);
    lo[a] = static_cast<double>(l) / 4.0;
    hi[a] = static_cast<double>(std::min<std::int64_t>(l + s, 64)) / 4.0;
  }
  return Box3::from_bounds(lo, hi);
}

double voxel_iou(const Box3& a, const Box3& b) {
  std::int64_t na = 0, nb = 0, both = 0;
  for (int z = 0; z < 64; ++z)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double p[3] = {(z + 0.5) / 4.0, (y + 0.5) / 4.0, (x + 0.5) / 4.0};
        bool ia = true, ib = true;
        for (int k = 0; k < 3; ++k) {
          ia = ia && p[k] >= a.lo(k) && p[k] < a.hi(k);
          ib = ib && p[k] >= b.lo(k) && p[k] < b.hi(k);
        }
        na += ia;
        nb += ib;
        both += ia && ib;
      }
  const std::int64_t uni = na + nb - both;
  return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

// Repeatedly take the best remaining box and strike everything it overlaps.
std::set<std::size_t> brute_nms(const std::vector<ScoredBox>& boxes, double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::set<std::size_t> kept;
  for (;;) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && (best == boxes.size() || boxes[i].score > boxes[best].score)) best = i;
    }
    if (best == boxes.size()) break;
    kept.insert(best);
    alive[best] = false;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (alive[j] && iou3d(boxes[best].box, boxes[j].box) > thr) alive[j] = false;
    }
  }
  return kept;
}

Outcome kernel_oracles() {
  Outcome o;
  const auto t0 = clk::now();
  Rng rng(101, 0);
  double iou_err = 0.0;
  for (int t = 0; t < 200; ++t) {
    const Box3 a = quarter_box(rng);
    // Every fourth pair is a copy of `a` slid along z, kept inside the grid.
    Box3 b = quarter_box(rng);
    if (t % 4 == 0) {
      const auto lo = -std::llround(4.0 * a.lo(0)), hi = std::llround(4.0 * (16.0 - a.hi(0)));
      b = a.translated({0.25 * static_cast<double>(rng.uniform_int(std::max<std::int64_t>(lo, -8), std::min<std::int64_t>(hi, 8))), 0.0, 0.0});
    }
    iou_err = std::max(iou_err, std::abs(iou3d(a, b) - voxel_iou(a, b)));
  }
  int nms_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const auto n = rng.uniform_int(1, 40);
    std::vector<ScoredBox> boxes;
    for (std::int64_t i = 0; i < n; ++i) {
      boxes.push_back({Box3{{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(0, 30)},
                            {rng.uniform(2, 12), rng.uniform(2, 12), rng.uniform(2, 12)}},
                       rng.uniform()});
    }
    const double thr = rng.uniform(0.05, 0.7);
    const auto fast = nms3d(boxes, thr);
    if (std::set<std::size_t>(fast.begin(), fast.end()) == brute_nms(boxes, thr)) ++nms_ok;
  }
  double conv_err = 0.0;
  for (int t = 0; t < 30; ++t) {
    const int stride = static_cast<int>(rng.uniform_int(1, 2));
    const int dil = static_cast<int>(rng.uniform_int(1, 3));
    const bool same = rng.bernoulli(0.5);
    const auto c = rng.uniform_int(1, 3), k = rng.uniform_int(1, 4), kk = 2 * rng.uniform_int(0, 1) + 1;
    const Tensor x = random_tensor({rng.uniform_int(1, 2), c, 9, 8, 10}, rng, -1, 1, false);
    const Tensor w = random_tensor({k, c, kk, kk, kk}, rng, -1, 1, false);
    const Tensor b = random_tensor({k}, rng, -1, 1, false);
    const Tensor y = ops::conv3d(x, w, b, {stride, dil, same ? ops::Padding::kSame : ops::Padding::kValid});
    const auto ref = voxelrcnn::testing::direct_conv3d(x, w, b, stride, dil, same);
    if (static_cast<std::size_t>(y.numel()) != ref.size()) {
      conv_err = INFINITY;
      continue;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) conv_err = std::max(conv_err, std::abs(y.data()[i] - ref[i]));
  }
  const double secs = seconds_since(t0);
  o.pass = iou_err < 1e-3 && nms_ok == 100 && conv_err < 1e-10 && secs < 60.0;
  std::ostringstream os;
  os << "iou3d max err " << fmt("%.2e", iou_err) << " (200 pairs), nms3d " << nms_ok << "/100 exact, conv3d max err "
     << fmt("%.2e", conv_err) << ", " << fmt("%.1f", secs) << " s";
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------- 2. gradients

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = clk::now();
  constexpr int kInstances = 20;
  constexpr double kTol = 1e-4;
  Rng rng(202, 0);
  struct Row {
    const char* name;
    double worst = 0.0;
  };
  std::vector<Row> rows;

  auto run = [&](const char* name, const std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(std::uint64_t)>& make) {
    Row r{name};
    for (int i = 0; i < kInstances; ++i) {
      auto [f, inputs] = make(static_cast<std::uint64_t>(i));
      r.worst = std::max(r.worst, check_gradients(f, inputs).rel_error);
    }
    rows.push_back(r);
  };

  run("conv3d", [&](std::uint64_t s) {
    const int stride = static_cast<int>(rng.uniform_int(1, 2)), dil = static_cast<int>(rng.uniform_int(1, 2));
    const bool same = rng.bernoulli(0.5);
    Tensor x = random_tensor({1, 2, 5, 5, 5}, rng), w = random_tensor({2, 2, 3, 3, 3}, rng), b = random_tensor({2}, rng);
    const ops::ConvOptions opt{stride, dil, same ? ops::Padding::kSame : ops::Padding::kValid};
    return std::make_pair(std::function<Tensor()>([=] { return probe(ops::conv3d(x, w, b, opt), s); }), std::vector<Tensor>{x, w, b});
  });
  run("conv3d_transpose", [&](std::uint64_t s) {
    const int stride = static_cast<int>(rng.uniform_int(1, 2));
    Tensor x = random_tensor({1, 2, 3, 3, 3}, rng), w = random_tensor({2, 3, 2, 2, 2}, rng), b = random_tensor({3}, rng);
    return std::make_pair(std::function<Tensor()>([=] { return probe(ops::conv3d_transpose(x, w, b, stride), s); }),
                          std::vector<Tensor>{x, w, b});
  });
  run("roi_align_3d", [&](std::uint64_t s) {
    Tensor f = random_tensor({1, 2, 6, 6, 6}, rng);
    std::vector<Box3> boxes;
    for (int k = 0; k < 2; ++k) {
      boxes.push_back(Box3{{rng.uniform(1.3, 4.7), rng.uniform(1.3, 4.7), rng.uniform(1.3, 4.7)},
                           {rng.uniform(1.1, 3.9), rng.uniform(1.1, 3.9), rng.uniform(1.1, 3.9)}});
    }
    return std::make_pair(std::function<Tensor()>([=] { return probe(ops::roi_align_3d(f, boxes, {3, 3, 3}, 2), s); }),
                          std::vector<Tensor>{f});
  });
  run("focal_loss", [&](std::uint64_t) {
    Tensor z = random_tensor({12}, rng, -3, 3);
    Tensor z2 = random_tensor({12, 2}, rng, -3, 3);
    std::vector<int> labels(12);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(-1, 1));
    labels[0] = 1;
    labels[1] = 0;
    return std::make_pair(std::function<Tensor()>([=] {
                            return ops::add(ops::focal_loss(z, labels, 2.0, 0.75), ops::focal_loss_softmax(z2, labels, 2.0, 0.75));
                          }),
                          std::vector<Tensor>{z, z2});
  });
  run("soft_iou_loss", [&](std::uint64_t) {
    Tensor z = random_tensor({1, 1, 4, 4, 4}, rng, -2, 2);
    std::vector<double> g(64);
    for (auto& v : g) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const Tensor target({1, 1, 4, 4, 4}, g);
    return std::make_pair(std::function<Tensor()>([=] { return ops::soft_iou_loss(ops::sigmoid(z), target); }), std::vector<Tensor>{z});
  });
  run("instance_norm", [&](std::uint64_t s) {
    Tensor x = random_tensor({2, 3, 3, 4, 3}, rng), g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
    return std::make_pair(std::function<Tensor()>([=] { return probe(ops::instance_norm(x, g, b), s); }), std::vector<Tensor>{x, g, b});
  });

  const double secs = seconds_since(t0);
  std::ostringstream os;
  for (const auto& r : rows) {
    o.pass = o.pass && r.worst < kTol;
    os << r.name << " " << fmt("%.1e", r.worst) << ", ";
  }
  o.pass = o.pass && secs < 300.0;
  os << kInstances << " instances each, " << fmt("%.1f", secs) << " s";
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------- 3. metrics

Candidate cand(const std::string& id, Vec3 c, double score) {
  Candidate k;
  k.scan_id = id;
  k.center_world = c;
  k.score = score;
  k.size_world = {4, 4, 4};
  return k;
}

std::vector<std::uint8_t> cube_mask(const Index3& d, const Index3& lo, const Index3& hi) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(d[0] * d[1] * d[2]), 0);
  for (std::int64_t z = lo[0]; z < hi[0]; ++z)
    for (std::int64_t y = lo[1]; y < hi[1]; ++y)
      for (std::int64_t x = lo[2]; x < hi[2]; ++x) m[static_cast<std::size_t>((z * d[1] + y) * d[2] + x)] = 1;
  return m;
}

Outcome metric_fixtures() {
  Outcome o;
  // Eight scans, two GTs: 4 FPs, TP, 12 FPs, TP, 30 FPs.
  std::vector<std::string> ids;
  for (int i = 0; i < 8; ++i) ids.push_back("s" + std::to_string(i));
  const std::vector<Annotation> gs{{"s0", {0, 0, 0}, 10}, {"s1", {0, 0, 0}, 10}};
  std::vector<Candidate> cs;
  double score = 1.0;
  auto next = [&] { return score -= 0.01; };
  for (int i = 0; i < 4; ++i) cs.push_back(cand(ids[static_cast<std::size_t>(i % 8)], {100, 100, 100}, next()));
  cs.push_back(cand("s0", {1, 0, 0}, next()));
  for (int i = 0; i < 12; ++i) cs.push_back(cand(ids[static_cast<std::size_t>(i % 8)], {100, 100, 100}, next()));
  cs.push_back(cand("s1", {0, 1, 0}, next()));
  for (int i = 0; i < 30; ++i) cs.push_back(cand(ids[static_cast<std::size_t>(i % 8)], {-100, 100, 100}, next()));
  const double cpm = froc(match_all(cs, gs, ids)).cpm;
  const bool cpm_ok = cpm == 4.0 / 7.0;

  // DSC: two 100-voxel runs overlapping in 50 -> 0.5; 6x6x6 vs a 6x6x5 sub-block -> 2*180/396.
  std::vector<std::uint8_t> a(400, 0), b(400, 0);
  for (int i = 0; i < 100; ++i) a[static_cast<std::size_t>(i)] = 1;
  for (int i = 50; i < 150; ++i) b[static_cast<std::size_t>(i)] = 1;
  const Index3 d{8, 8, 8};
  const double dsc_err = std::max(std::abs(dsc(a, b) - 0.5),
                                  std::abs(dsc(cube_mask(d, {1, 1, 1}, {7, 7, 7}), cube_mask(d, {1, 1, 1}, {7, 7, 6})) -
                                           360.0 / 396.0));

  // HD: single voxels four apart at 0.5 mm -> 2 mm; a 5-cube shifted 3 along y at 1.3 mm -> 3.9 mm.
  const Index3 e{3, 3, 9}, f{10, 14, 10};
  const double hd_err = std::max(
      std::abs(hausdorff_mm(cube_mask(e, {1, 1, 1}, {2, 2, 2}), cube_mask(e, {1, 1, 5}, {2, 2, 6}), e, {0.5, 0.5, 0.5}) - 2.0),
      std::abs(hausdorff_mm(cube_mask(f, {2, 2, 2}, {7, 7, 7}), cube_mask(f, {2, 5, 2}, {7, 10, 7}), f, {0.7, 1.3, 0.4}) - 3.9));

  // Pearson: (1,2,3,4) vs (2,4,5,4) -> 3.5 / sqrt(5 * 4.75); affine copies -> 1.
  const double r_err = std::max(std::abs(volume_correlation({1, 2, 3, 4}, {2, 4, 5, 4}) - 3.5 / std::sqrt(5.0 * 4.75)),
                                std::abs(volume_correlation({20, 40, 70, 82}, {10, 20, 35, 41}) - 1.0));

  o.pass = cpm_ok && dsc_err < 1e-9 && hd_err < 1e-9 && r_err < 1e-9;
  std::ostringstream os;
  os << "CPM " << fmt("%.17g", cpm) << (cpm_ok ? " == 4/7" : " != 4/7") << ", DSC err " << fmt("%.1e", dsc_err)
     << ", HD err " << fmt("%.1e", hd_err) << ", Pearson err " << fmt("%.1e", r_err);
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------- 4. contracts

ModelConfig reduced_model() {
  ModelConfig m;
  m.early_anchor = 12;
  m.late_anchor = 32;
  return m;
}

Outcome contracts() {
  Outcome o;
  // propose(): every score at or below 0.1 -> exactly fallback_top boxes.
  const ModelConfig mc = reduced_model();
  std::vector<Box3> anchors;
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) anchors.push_back(Box3{{8.0 * z + 4, 8.0 * y + 4, 8.0 * x + 4}, {12, 12, 12}});
  Rng rng(404, 0);
  bool propose_ok = true;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> logits(anchors.size());
    for (auto& z : logits) z = rng.uniform(-12.0, std::log(0.1 / 0.9));
    if (t == 0) std::fill(logits.begin(), logits.end(), std::log(0.1 / 0.9));
    RpnOutput out{Tensor({static_cast<std::int64_t>(anchors.size()), 1}, logits),
                  random_tensor({static_cast<std::int64_t>(anchors.size()), 6}, rng, -0.2, 0.2, false)};
    const ProposalSet ps = propose(out, anchors, {32, 32, 32}, mc, mc.infer_proposals);
    propose_ok = propose_ok && ps.boxes.size() == 10 && ps.fallback;
  }

  // dilate_box: 5 mm per edge at 0.5 mm spacing.
  bool dilate_ok = true;
  for (int t = 0; t < 20; ++t) {
    const Box3 b{{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0, 50)}, {rng.uniform(1, 30), rng.uniform(1, 30), rng.uniform(1, 30)}};
    const Box3 g = dilate_box(b, 5.0, {0.5, 0.5, 0.5});
    for (int a = 0; a < 3; ++a) {
      dilate_ok = dilate_ok && std::abs(g.size[a] - b.size[a] - 20.0) < 1e-12 && std::abs(g.center[a] - b.center[a]) < 1e-12;
    }
  }

  // Inference on all-noise phantoms with an untrained model.
  PhantomSpec ps;
  ps.seed = 4;
  ps.n_volumes = 2;
  ps.volume_dims = {64, 64, 64};
  ps.nodules_min = ps.nodules_max = 0;
  ps.distractors_min = ps.distractors_max = 0;
  const VoxelRcnn model(mc);
  InferConfig ic;
  ic.window = 64;
  std::size_t n = 0;
  bool mask_ok = true;
  for (const auto& c : generate(ps)) {
    for (const auto& k : infer_volume(c.scan, c.scan_id, model, ic)) {
      ++n;
      mask_ok = mask_ok && k.mask_volume_mm3 > 0.0 && k.mask_count() > 0;
    }
  }
  o.pass = propose_ok && dilate_ok && mask_ok;
  std::ostringstream os;
  os << "propose fallback " << (propose_ok ? "10/10 boxes" : "WRONG") << ", dilate_box " << (dilate_ok ? "+20 vox" : "WRONG")
     << ", " << n << " noise-scan candidates " << (mask_ok ? "all with mask volume > 0" : "with EMPTY masks");
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------- 5. end to end

PhantomSpec e2e_phantom() {
  PhantomSpec s;
  s.seed = 7;
  s.n_volumes = 30;
  s.volume_dims = {96, 96, 96};
  s.radius_min_mm = 1.5;
  s.radius_max_mm = 6.0;
  return s;
}

TrainConfig e2e_train() {
  TrainConfig t;
  t.stage1_epochs = 25;
  t.stage2_epochs = 20;
  t.stage2_lr = 0.01;
  t.folds = 5;
  t.fold = 0;
  t.val_scans = 2;
  t.seed = 1;
  return t;
}

struct E2eRun {
  double cpm = 0.0, dsc = 0.0, train_secs = 0.0, total_secs = 0.0;
  std::size_t candidates = 0, empty_masks = 0, n_gt = 0, n_tp = 0;
};

E2eRun e2e_once(const std::vector<PhantomCase>& cases, const fs::path& run_dir) {
  const auto t0 = clk::now();
  const TrainConfig tc = e2e_train();
  const Dataset all = Dataset::from_cases(cases);
  const auto folds = kfold_split(all.ids(), tc.folds, tc.seed);
  const Fold& f = folds[static_cast<std::size_t>(tc.fold)];
  const auto [fit, val] = validation_split(f.train, tc.val_scans);
  VoxelRcnn model(reduced_model());
  train_stage1(model, all.subset(fit), all.subset(val), tc, run_dir);
  train_stage2(model, all.subset(fit), all.subset(val), tc, run_dir / "stage1_best.ckpt", run_dir);
  E2eRun r;
  r.train_secs = seconds_since(t0);

  InferConfig ic;
  ic.window = 96;
  std::vector<Candidate> cands;
  std::vector<Annotation> gts;
  std::vector<Volume> masks;
  for (const auto& id : f.test) {
    const auto it = std::find_if(cases.begin(), cases.end(), [&](const PhantomCase& c) { return c.scan_id == id; });
    const auto c = infer_volume(it->scan, id, model, ic);
    cands.insert(cands.end(), c.begin(), c.end());
    gts.insert(gts.end(), it->annotations.begin(), it->annotations.end());
  }
  const MatchResult m = match_all(cands, gts, f.test);
  for (const auto& s : m.scans) {
    const auto it = std::find_if(cases.begin(), cases.end(), [&](const PhantomCase& c) { return c.scan_id == s.scan_id; });
    masks.push_back(it->mask);
  }
  const FrocResult fr = froc(m);
  const SegmentationReport sr = segmentation_report(m, masks);
  r.cpm = fr.cpm;
  r.dsc = sr.nodules.empty() ? 0.0 : sr.dsc_mean;
  r.candidates = cands.size();
  for (const auto& c : cands) r.empty_masks += !(c.mask_volume_mm3 > 0.0);
  r.n_gt = fr.n_gt;
  r.n_tp = fr.n_tp;
  r.total_secs = seconds_since(t0);
  return r;
}

Outcome end_to_end() {
  Outcome o;
  const auto cases = generate(e2e_phantom());
  const fs::path base = fs::temp_directory_path() / "voxelrcnn_acceptance";
  fs::remove_all(base);
  const E2eRun a = e2e_once(cases, base / "run_a");
  std::printf("  run A: CPM %.4f, DSC %.4f, %zu/%zu GT hit, %zu candidates, train %.0f s, total %.0f s\n", a.cpm, a.dsc,
              a.n_tp, a.n_gt, a.candidates, a.train_secs, a.total_secs);
  std::fflush(stdout);
  const E2eRun b = e2e_once(cases, base / "run_b");
  std::printf("  run B: CPM %.4f, DSC %.4f, train %.0f s\n", b.cpm, b.dsc, b.train_secs);
  fs::remove_all(base);
  o.pass = a.cpm >= 0.6 && a.dsc >= 0.5 && a.cpm == b.cpm && a.train_secs <= 1800.0 && b.train_secs <= 1800.0 &&
           a.empty_masks == 0 && b.empty_masks == 0;
  std::ostringstream os;
  os << "CPM " << fmt("%.4f", a.cpm) << " (>= 0.6), mean DSC " << fmt("%.4f", a.dsc) << " (>= 0.5), repeat CPM "
     << fmt("%.4f", b.cpm) << (a.cpm == b.cpm ? " identical" : " DIFFERS") << ", train " << fmt("%.0f", a.train_secs)
     << " s / " << fmt("%.0f", b.train_secs) << " s (<= 1800)";
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------- 6. overfit

Outcome overfit() {
  Outcome o;
  const auto t0 = clk::now();
  PhantomSpec ps;
  ps.seed = 21;
  ps.n_volumes = 4;
  ps.volume_dims = {64, 64, 64};
  ps.radius_min_mm = 2.0;
  ps.radius_max_mm = 5.0;
  ps.nodules_min = 1;
  ps.nodules_max = 2;
  const Dataset data = Dataset::from_cases(generate(ps));
  TrainConfig tc;
  tc.patch_size = 48;
  tc.jitter_voxels = 4;
  tc.negatives_per_scan = 0;
  tc.augment = false;
  tc.stage2_lr = 0.03;
  tc.batch_patches = 1;
  Rng rng(606, 0);
  std::vector<TrainPatch> patches;
  while (patches.size() < 8) {
    for (const PatchRef& r : sample_patches(data, tc, rng)) {
      if (patches.size() < 8) patches.push_back(make_patch(data.scans[r.scan], r.offset, tc));
    }
  }
  VoxelRcnn model(reduced_model());
  auto stage = [&](const LossFn& loss, const std::vector<std::string>& groups, double lr) {
    ParameterList params;
    for (const auto& g : groups) {
      for (auto& p : model.group(g)) params.push_back(p);
    }
    SgdState opt(lr, tc.momentum);
    const double before = evaluate_loss(patches, loss, tc);
    for (int e = 0; e < 20; ++e) {
      Rng er(tc.seed, 0x6f76000000ULL + static_cast<std::uint64_t>(e));
      run_epoch(patches, loss, params, opt, tc, er);
    }
    return std::make_pair(before, evaluate_loss(patches, loss, tc));
  };
  const auto [s1a, s1b] = stage([&](const TrainPatch& p, bool tr, Rng& r) { return stage1_loss(model, p, tc, tr, r); },
                                {"backbone.", "rpn."}, tc.stage1_lr);
  const auto [s2a, s2b] = stage([&](const TrainPatch& p, bool tr, Rng& r) { return stage2_loss(model, p, tc, tr, r); },
                                {"rcnn.", "mask."}, tc.stage2_lr);
  const double d1 = 1.0 - s1b / s1a, d2 = 1.0 - s2b / s2a;
  o.pass = d1 >= 0.3 && d2 >= 0.3;
  std::ostringstream os;
  os << "stage1 " << fmt("%.4f", s1a) << " -> " << fmt("%.4f", s1b) << " (-" << fmt("%.0f", 100 * d1) << "%), stage2 "
     << fmt("%.4f", s2a) << " -> " << fmt("%.4f", s2b) << " (-" << fmt("%.0f", 100 * d2) << "%), need >= 30%, "
     << fmt("%.0f", seconds_since(t0)) << " s";
  o.detail = os.str();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    Outcome (*fn)();
  };
  const std::vector<Criterion> all{{1, "kernel oracles", kernel_oracles},   {2, "gradient suite", gradient_suite},
                                   {3, "metric fixtures", metric_fixtures}, {4, "contract tests", contracts},
                                   {5, "overfit sanity", overfit},          {6, "end-to-end phantom run", end_to_end}};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!pick.empty() && !pick.count(c.id)) continue;
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
