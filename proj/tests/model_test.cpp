#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/losses.hpp"
#include "voxelrcnn/model.hpp"
#include "voxelrcnn/roi_align.hpp"

namespace voxelrcnn {
namespace {

using testing::check_gradients;
using testing::probe;
using testing::random_tensor;

// ---------------------------------------------------------------- losses

double cross_entropy(double z, int label) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

TEST(FocalLoss, GammaZeroIsHalfCrossEntropy) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    auto z = random_tensor({17}, rng, -4, 4, false);
    std::vector<int> labels(17);
    double ce = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<int>(rng.uniform_int(0, 1));
      ce += cross_entropy(z.data()[i], labels[i]);
    }
    ce /= 17.0;
    EXPECT_NEAR(ops::focal_loss(z, labels, 0.0, 0.5).item(), 0.5 * ce, 1e-12);
  }
}

TEST(FocalLoss, EvenOddsClosedForm) {
  Tensor z({1}, 0.0);
  EXPECT_NEAR(ops::focal_loss(z, {1}, 2.0, 1.0).item(), 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(ops::focal_loss(z, {1}, 2.0, 1.0).item(), 0.17329, 1e-5);
}

TEST(FocalLoss, ConfidentCorrectTendsToZero) {
  Tensor z({2}, std::vector<double>{30.0, -30.0});
  EXPECT_LT(ops::focal_loss(z, {1, 0}).item(), 1e-20);
}

TEST(FocalLoss, IgnoredAndEmpty) {
  Tensor z({3}, std::vector<double>{0.3, -1.0, 2.0});
  const double a = ops::focal_loss(z, {1, -1, -1}).item();
  const double b = ops::focal_loss(Tensor({1}, 0.3), {1}).item();
  EXPECT_DOUBLE_EQ(a, b);
  EXPECT_EQ(ops::focal_loss(z, {-1, -1, -1}).item(), 0.0);
  EXPECT_THROW(ops::focal_loss(z, {1, 0}), ShapeError);
}

TEST(FocalLoss, SoftmaxFormMatchesSigmoidOfDifference) {
  Rng rng(2);
  auto l = random_tensor({9, 2}, rng, -3, 3, false);
  std::vector<int> labels(9);
  std::vector<double> diff(9);
  for (std::size_t i = 0; i < 9; ++i) {
    labels[i] = static_cast<int>(rng.uniform_int(-1, 1));
    diff[i] = l.data()[2 * i + 1] - l.data()[2 * i];
  }
  EXPECT_NEAR(ops::focal_loss_softmax(l, labels).item(), ops::focal_loss(Tensor({9}, diff), labels).item(), 1e-14);
}

TEST(SoftIou, ExactMatchAndEmptyPrediction) {
  std::vector<double> g(64, 0.0);
  for (int i = 0; i < 20; ++i) g[static_cast<std::size_t>(i * 3)] = 1.0;
  const Tensor gt({4, 4, 4}, g);
  EXPECT_NEAR(ops::soft_iou_loss(gt, gt).item(), 0.0, 1e-3);
  const Tensor zero({4, 4, 4}, 0.0);
  EXPECT_NEAR(ops::soft_iou_loss(zero, gt).item(), 1.0 - 1.0 / (20.0 + 1.0), 1e-15);
  EXPECT_THROW(ops::soft_iou_loss(zero, Tensor({64}, 0.0)), ShapeError);
}

TEST(SmoothL1, ClosedForms) {
  Tensor p({2, 3}, 0.5);
  EXPECT_EQ(ops::smooth_l1(p, p).item(), 0.0);
  Tensor q({2, 3}, 1.5);
  EXPECT_DOUBLE_EQ(ops::smooth_l1(p, q).item(), 0.5);
  EXPECT_DOUBLE_EQ(ops::smooth_l1(Tensor({1}, 3.0), Tensor({1}, 0.0)).item(), 2.5);
  EXPECT_EQ(ops::smooth_l1(Tensor{}, Tensor{}).item(), 0.0);
}

TEST(LossGradients, FiniteDifferences) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::int64_t m = 3 + t;
    auto z = random_tensor({m}, rng, -3, 3);
    std::vector<int> labels(static_cast<std::size_t>(m));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(-1, 1));
    labels[0] = 1;
    EXPECT_LT(check_gradients([&] { return ops::focal_loss(z, labels, 2.0, 0.75); }, {z}).rel_error, 1e-4);
    auto l2 = random_tensor({m, 2}, rng, -3, 3);
    EXPECT_LT(check_gradients([&] { return ops::focal_loss_softmax(l2, labels); }, {l2}).rel_error, 1e-4);

    auto p = random_tensor({2, 3, m}, rng, 0.01, 0.99);
    std::vector<double> gv(static_cast<std::size_t>(p.numel()));
    for (auto& g : gv) g = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const Tensor g({2, 3, m}, gv);
    EXPECT_LT(check_gradients([&] { return ops::soft_iou_loss(p, g); }, {p}).rel_error, 1e-4);

    auto a = random_tensor({m, 6}, rng, -2, 2);
    auto b = random_tensor({m, 6}, rng, -2, 2);
    EXPECT_LT(check_gradients([&] { return ops::smooth_l1(a, b); }, {a, b}).rel_error, 1e-4);
  }
}

// ---------------------------------------------------------------- roi align

TEST(RoiAlign, ConstantMapGivesConstant) {
  Tensor f({1, 2, 6, 7, 8}, 3.25);
  const std::vector<Box3> boxes{{{3, 3.5, 4}, {2.2, 3.1, 5.7}}, {{1, 1, 1}, {2, 2, 2}}};
  const auto out = ops::roi_align_3d(f, boxes, {3, 4, 2}, 2);
  ASSERT_EQ(out.shape(), (Shape{2, 2, 3, 4, 2}));
  for (double v : out.data()) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(RoiAlign, WholeMapAtNativeSizeIsIdentity) {
  Rng rng(4);
  auto f = random_tensor({1, 3, 5, 6, 7}, rng, -1, 1, false);
  const Box3 whole{{2.5, 3, 3.5}, {5, 6, 7}};
  const auto out = ops::roi_align_3d(f, {whole}, {5, 6, 7}, 1);
  ASSERT_EQ(out.numel(), f.numel());
  for (std::int64_t i = 0; i < f.numel(); ++i) {
    EXPECT_NEAR(out.data()[static_cast<std::size_t>(i)], f.data()[static_cast<std::size_t>(i)], 1e-9);
  }
}

TEST(RoiAlign, DegenerateBoxRejected) {
  Tensor f({1, 1, 4, 4, 4}, 1.0);
  EXPECT_THROW(ops::roi_align_3d(f, {Box3{{2, 2, 2}, {1, 1e-9, 1}}}, {2, 2, 2}, 2), ContractError);
}

TEST(RoiAlign, LinearInFeature) {
  Rng rng(5);
  auto a = random_tensor({1, 2, 6, 6, 6}, rng, -1, 1, false);
  auto b = random_tensor({1, 2, 6, 6, 6}, rng, -1, 1, false);
  const std::vector<Box3> boxes{{{3, 2.7, 3.3}, {3.5, 2.5, 4.5}}, {{0.5, 5.5, 3}, {3, 3, 3}}};
  const auto lhs = ops::roi_align_3d(ops::add(ops::scale(a, 2.0), ops::scale(b, -0.5)), boxes, {3, 3, 3}, 2);
  const auto fa = ops::roi_align_3d(a, boxes, {3, 3, 3}, 2);
  const auto fb = ops::roi_align_3d(b, boxes, {3, 3, 3}, 2);
  for (std::int64_t i = 0; i < lhs.numel(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    EXPECT_NEAR(lhs.data()[k], 2.0 * fa.data()[k] - 0.5 * fb.data()[k], 1e-12);
  }
}

TEST(RoiAlign, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    auto f = random_tensor({2, 2, 5, 6, 4}, rng);
    std::vector<Box3> boxes;
    for (int k = 0; k < 3; ++k) {
      Box3 b;
      for (int i = 0; i < 3; ++i) {
        b.center[i] = rng.uniform(0.0, static_cast<double>(f.dim(2 + i)));
        b.size[i] = rng.uniform(0.5, 4.0);
      }
      boxes.push_back(b);
    }
    const std::int64_t batch = t % 2;
    auto r = check_gradients([&] { return probe(ops::roi_align_3d(f, boxes, {2, 3, 2}, 1 + t % 3, batch), 7); }, {f});
    EXPECT_LT(r.rel_error, 1e-4) << t;
  }
}

// ---------------------------------------------------------------- network

ModelConfig tiny_config() {
  ModelConfig c;
  c.stem_channels = 4;
  c.early_channels = 8;
  c.late_channels = 8;
  c.rcnn_channels = 4;
  c.rcnn_hidden = 8;
  c.mask_channels = 4;
  c.mask_roi = {6, 6, 6};
  c.seed = 11;
  return c;
}

Tensor random_image(std::int64_t p, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({1, 1, p, p, p}, rng, -1, 1, false);
}

TEST(Backbone, ShapesAndStrides) {
  ModelConfig c;
  c.seed = 1;
  const VoxelRcnn model(c);
  const auto fp = model.backbone(random_image(64, 2));
  EXPECT_EQ(fp.early.shape(), (Shape{1, c.early_channels, 16, 16, 16}));
  EXPECT_EQ(fp.late.shape(), (Shape{1, c.late_channels, 8, 8, 8}));
  EXPECT_EQ(fp.early_stride, 4);
  EXPECT_EQ(fp.late_stride, 8);
  EXPECT_THROW(model.backbone(random_image(20, 3)), ShapeError);
}

TEST(Backbone, ReductionsUseConfiguredDilations) {
  const ModelConfig c;
  EXPECT_EQ(c.reduction_dilations[0], 2);
  EXPECT_EQ(c.reduction_dilations[1], 3);
}

TEST(Backbone, ZeroResidualBranchesAreIdentity) {
  VoxelRcnn model(tiny_config());
  for (auto& p : model.parameters()) {
    if (p.name.find(".out.conv") != std::string::npos && p.name.rfind("backbone.", 0) == 0) {
      for (auto& v : p.tensor.mutable_data()) v = 0.0;
    }
  }
  // The stage-A block then passes the stem output straight through, so the
  // pyramid equals that of a model without residual blocks.
  ModelConfig bare = tiny_config();
  bare.blocks_per_stage = 0;
  VoxelRcnn plain(bare);
  for (auto& p : plain.parameters()) {
    const auto& src = model.param(p.name);
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
  }
  const Tensor x = random_image(16, 4);
  const auto a = model.backbone(x);
  const auto b = plain.backbone(x);
  for (std::int64_t i = 0; i < a.late.numel(); ++i) {
    EXPECT_EQ(a.late.data()[static_cast<std::size_t>(i)], b.late.data()[static_cast<std::size_t>(i)]);
  }
}

TEST(Backbone, GradientReachesStem) {
  const VoxelRcnn model(tiny_config());
  auto params = model.parameters();
  zero_grad(params);
  backward(ops::mean(model.backbone(random_image(16, 5)).late));
  double norm = 0.0;
  for (double g : model.param("backbone.stem.conv.w").grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Rpn, AnchorAndLogitCountsAgree) {
  const VoxelRcnn model(tiny_config());
  const auto fp = model.backbone(random_image(16, 6));
  ASSERT_EQ(fp.early.dim(2), 4);
  ASSERT_EQ(fp.late.dim(2), 2);
  const auto out = model.rpn(fp, false, nullptr);
  EXPECT_EQ(out.logits.shape(), (Shape{72, 1}));
  EXPECT_EQ(out.deltas.shape(), (Shape{72, 6}));
  const auto anchors = model.anchors(fp);
  ASSERT_EQ(anchors.size(), 72u);
  EXPECT_EQ(anchors[0].size[0], 16);
  EXPECT_EQ(anchors[64].size[0], 64);
}

TEST(Rpn, DropoutOnlyInTrainingClassPath) {
  ModelConfig c = tiny_config();
  c.dropout = 0.5;
  const VoxelRcnn model(c);
  const auto fp = model.backbone(random_image(16, 7));
  const auto e1 = model.rpn(fp, false, nullptr);
  const auto e2 = model.rpn(fp, false, nullptr);
  EXPECT_EQ(std::vector<double>(e1.logits.data().begin(), e1.logits.data().end()),
            std::vector<double>(e2.logits.data().begin(), e2.logits.data().end()));
  Rng r1(1), r2(2);
  const auto t1 = model.rpn(fp, true, &r1);
  const auto t2 = model.rpn(fp, true, &r2);
  EXPECT_NE(std::vector<double>(t1.logits.data().begin(), t1.logits.data().end()),
            std::vector<double>(t2.logits.data().begin(), t2.logits.data().end()));
  EXPECT_EQ(std::vector<double>(t1.deltas.data().begin(), t1.deltas.data().end()),
            std::vector<double>(e1.deltas.data().begin(), e1.deltas.data().end()));
}

RpnOutput synthetic_rpn(const std::vector<double>& logits) {
  const auto n = static_cast<std::int64_t>(logits.size());
  return {Tensor({n, 1}, logits), Tensor({n, 6}, 0.0)};
}

std::vector<Box3> grid_anchors() {
  const std::vector<double> s{16};
  return generate_anchors({4, 4, 4}, 8, s);
}

TEST(Propose, AllLowScoresGiveExactlyTenFallback) {
  const auto anchors = grid_anchors();
  std::vector<double> logits(anchors.size(), std::log(0.05 / 0.95));
  logits[7] = std::log(0.1 / 0.9);  // exactly at threshold: not above it
  const ModelConfig cfg;
  const auto ps = propose(synthetic_rpn(logits), anchors, {32, 32, 32}, cfg, cfg.infer_proposals);
  EXPECT_TRUE(ps.fallback);
  EXPECT_EQ(ps.boxes.size(), 10u);
  EXPECT_EQ(ps.scores.size(), 10u);
}

TEST(Propose, SingleConfidentAnchorKept) {
  const auto anchors = grid_anchors();
  std::vector<double> logits(anchors.size(), std::log(0.01 / 0.99));
  logits[21] = std::log(0.9 / 0.1);
  const ModelConfig cfg;
  const auto ps = propose(synthetic_rpn(logits), anchors, {32, 32, 32}, cfg, cfg.infer_proposals);
  ASSERT_EQ(ps.boxes.size(), 1u);
  EXPECT_FALSE(ps.fallback);
  EXPECT_NEAR(ps.scores[0], 0.9, 1e-12);
  // Zero deltas decode to the anchor (clipped to the patch).
  EXPECT_EQ(ps.boxes[0], clip_box(anchors[21], {32, 32, 32}));
}

TEST(Propose, ZeroDeltasReproduceAnchors) {
  std::vector<Box3> anchors{{{8, 8, 8}, {16, 16, 16}}, {{24, 24, 24}, {16, 16, 16}}};
  const ModelConfig cfg;
  const auto ps = propose(synthetic_rpn({3.0, 2.0}), anchors, {32, 32, 32}, cfg, 64);
  ASSERT_EQ(ps.boxes.size(), 2u);
  EXPECT_EQ(ps.boxes[0], anchors[0]);
  EXPECT_EQ(ps.boxes[1], anchors[1]);
}

TEST(Propose, ProposalsStayInsidePatch) {
  Rng rng(8);
  const auto anchors = grid_anchors();
  const ModelConfig cfg;
  for (int t = 0; t < 20; ++t) {
    const auto n = static_cast<std::int64_t>(anchors.size());
    auto out = RpnOutput{random_tensor({n, 1}, rng, -4, 4, false), random_tensor({n, 6}, rng, -3, 3, false)};
    const auto ps = propose(out, anchors, {32, 32, 32}, cfg, 32);
    EXPECT_FALSE(ps.boxes.empty());
    EXPECT_LE(ps.boxes.size(), 32u);
    for (const auto& b : ps.boxes)
      for (int i = 0; i < 3; ++i) {
        EXPECT_GE(b.lo(i), -1e-9);
        EXPECT_LE(b.hi(i), 32 + 1e-9);
        EXPECT_GT(b.size[i], 0.0);
      }
  }
}

TEST(Heads, RcnnShapesSoftmaxAndDeterminism) {
  const VoxelRcnn model(tiny_config());
  const auto fp = model.backbone(random_image(32, 9));
  const std::vector<Box3> rois{{{10, 12, 14}, {8, 9, 10}}, {{20, 20, 20}, {16, 16, 16}}, {{4, 4, 4}, {6, 6, 6}}};
  const auto a = model.rcnn(fp, rois, false, nullptr);
  const auto b = model.rcnn(fp, rois, false, nullptr);
  EXPECT_EQ(a.logits.shape(), (Shape{3, 2}));
  EXPECT_EQ(a.deltas.shape(), (Shape{3, 6}));
  EXPECT_EQ(std::vector<double>(a.logits.data().begin(), a.logits.data().end()),
            std::vector<double>(b.logits.data().begin(), b.logits.data().end()));
  const auto sm = ops::softmax(a.logits, 1);
  for (int r = 0; r < 3; ++r) EXPECT_NEAR(sm.data()[2 * r] + sm.data()[2 * r + 1], 1.0, 1e-12);
}

TEST(Heads, MaskRangeShapeAndZeroFinalLayer) {
  VoxelRcnn model(tiny_config());
  const Tensor img = random_image(32, 10);
  const auto fp = model.backbone(img);
  const std::vector<Box3> rois{dilate_box({{12, 12, 12}, {8, 8, 8}}, 5.0, {0.5, 0.5, 0.5}),
                               {{20, 16, 10}, {10, 12, 14}}};
  const auto m = model.mask(fp, img, rois);
  EXPECT_EQ(m.shape(), (Shape{2, 1, 12, 12, 12}));
  for (double v : m.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (auto& p : model.parameters()) {
    if (p.name.rfind("mask.out.", 0) == 0) for (auto& v : p.tensor.mutable_data()) v = 0.0;
  }
  for (double v : model.mask(fp, img, rois).data()) EXPECT_EQ(v, 0.5);

  ModelConfig full;
  const VoxelRcnn def(full);
  const Tensor img64 = random_image(64, 12);
  EXPECT_EQ(def.mask(def.backbone(img64), img64, rois).shape(), (Shape{2, 1, 28, 28, 28}));
}

TEST(Network, TotalLossGivesFiniteGradsForEveryParameter) {
  VoxelRcnn model(tiny_config());
  const Tensor img = random_image(32, 13);
  Rng rng(14);
  auto& params = model.parameters();
  zero_grad(params);
  const auto fp = model.backbone(img);
  const auto rpn = model.rpn(fp, true, &rng);
  std::vector<int> labels(static_cast<std::size_t>(rpn.logits.numel()), 0);
  labels[3] = 1;
  const Tensor l_cls = ops::focal_loss(rpn.logits, labels);
  const Tensor l_reg = ops::smooth_l1(ops::gather_rows(rpn.deltas, {3}), Tensor({1, 6}, 0.1));
  const std::vector<Box3> rois{{{12, 12, 12}, {10, 10, 10}}, {{20, 20, 20}, {12, 12, 12}}};
  const auto rc = model.rcnn(fp, rois, true, &rng);
  const Tensor l_rc = ops::add(ops::focal_loss_softmax(rc.logits, {1, 0}),
                               ops::smooth_l1(rc.deltas, Tensor({2, 6}, 0.2)));
  const Tensor m = model.mask(fp, img, rois);
  const Tensor l_m = ops::soft_iou_loss(m, Tensor(m.shape(), 1.0));
  backward(ops::add(ops::add(l_cls, l_reg), ops::add(l_rc, l_m)));
  for (const auto& p : params) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    for (double g : p.tensor.grad()) ASSERT_TRUE(std::isfinite(g)) << p.name;
  }
}

TEST(Config, KeyValueRoundTrip) {
  ModelConfig c = tiny_config();
  c.residual_scale = 0.123456789;
  c.seed = 987654321012345ULL;
  KeyValues kv;
  c.to_keyvalues(kv);
  const auto back = ModelConfig::from_keyvalues(KeyValues::parse(kv.dump()));
  EXPECT_EQ(back.stem_channels, c.stem_channels);
  EXPECT_EQ(back.mask_roi, c.mask_roi);
  EXPECT_EQ(back.residual_scale, c.residual_scale);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_TRUE(kv.unknown_keys(ModelConfig::keys()).empty());
}

TEST(MaskTarget, BoxOverInstanceIsFull) {
  std::vector<std::uint8_t> lab(10 * 10 * 10, 0);
  for (int z = 2; z < 8; ++z)
    for (int y = 2; y < 8; ++y)
      for (int x = 2; x < 8; ++x) lab[static_cast<std::size_t>((z * 10 + y) * 10 + x)] = 2;
  const auto t = mask_target(lab, {10, 10, 10}, 2, Box3{{5, 5, 5}, {6, 6, 6}}, {4, 4, 4});
  for (double v : t) EXPECT_EQ(v, 1.0);
  const auto other = mask_target(lab, {10, 10, 10}, 1, Box3{{5, 5, 5}, {6, 6, 6}}, {4, 4, 4});
  for (double v : other) EXPECT_EQ(v, 0.0);
  // Box twice the instance: the central half is foreground.
  const auto big = mask_target(lab, {10, 10, 10}, 2, Box3{{5, 5, 5}, {12, 12, 12}}, {4, 4, 4});
  double s = 0.0;
  for (double v : big) s += v;
  EXPECT_EQ(s, 8.0);
}

}  // namespace
}  // namespace voxelrcnn
