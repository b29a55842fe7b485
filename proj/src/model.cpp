#include "voxelrcnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxelrcnn/conv.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/ops.hpp"
#include "voxelrcnn/roi_align.hpp"

namespace voxelrcnn {

namespace {

double sigmoid(double t) {
  return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (stem_channels < 2 || stem_channels % 2) fail("stem_channels must be even and >= 2");
  if (early_channels < 4 || early_channels % 4) fail("early_channels must be a multiple of 4");
  if (late_channels < 4 || late_channels % 4) fail("late_channels must be a multiple of 4");
  if (blocks_per_stage < 0) fail("blocks_per_stage must be >= 0");
  if (reduction_dilations[0] < 1 || reduction_dilations[1] < 1) fail("dilations must be >= 1");
  if (!(early_anchor > 0 && late_anchor > 0)) fail("anchor sizes must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (fallback_top < 1 || pre_nms_top < 1 || train_proposals < 1 || infer_proposals < 1) {
    fail("proposal counts must be positive");
  }
  for (int i = 0; i < 3; ++i) {
    if (rcnn_roi[static_cast<std::size_t>(i)] < 5) fail("rcnn_roi must be >= 5 per axis");
    if (mask_roi[static_cast<std::size_t>(i)] < 1) fail("mask_roi must be positive");
  }
  if (rcnn_channels < 1 || rcnn_hidden < 1) fail("rcnn widths must be positive");
  if (mask_channels < 2 || mask_channels % 2) fail("mask_channels must be even");
  if (roi_samples < 1) fail("roi_samples must be >= 1");
  if (mask_margin_mm < 0.0) fail("mask_margin_mm must be >= 0");
}

namespace {

template <typename Visit>
void visit_fields(Visit&& v, ModelConfig& c) {
  v("stem_channels", c.stem_channels);
  v("early_channels", c.early_channels);
  v("late_channels", c.late_channels);
  v("blocks_per_stage", c.blocks_per_stage);
  v("dilation_a", c.reduction_dilations[0]);
  v("dilation_b", c.reduction_dilations[1]);
  v("residual_scale", c.residual_scale);
  v("early_anchor", c.early_anchor);
  v("late_anchor", c.late_anchor);
  v("dropout", c.dropout);
  v("score_threshold", c.score_threshold);
  v("fallback_top", c.fallback_top);
  v("pre_nms_top", c.pre_nms_top);
  v("proposal_nms", c.proposal_nms);
  v("train_proposals", c.train_proposals);
  v("infer_proposals", c.infer_proposals);
  v("rcnn_roi", c.rcnn_roi[0]);
  v("rcnn_channels", c.rcnn_channels);
  v("rcnn_hidden", c.rcnn_hidden);
  v("mask_roi", c.mask_roi[0]);
  v("mask_channels", c.mask_channels);
  v("roi_samples", c.roi_samples);
  v("mask_margin_mm", c.mask_margin_mm);
  v("seed", c.seed);
}

}  // namespace

void ModelConfig::to_keyvalues(KeyValues& kv, const std::string& prefix) const {
  ModelConfig c = *this;
  visit_fields([&](const std::string& k, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::uint64_t>) kv.set(prefix + k, std::to_string(field));
    else kv.set(prefix + k, field);
  }, c);
}

ModelConfig ModelConfig::from_keyvalues(const KeyValues& kv, const std::string& prefix) {
  ModelConfig c;
  visit_fields([&](const std::string& k, auto& field) { kv.get(prefix + k, field); }, c);
  c.rcnn_roi = {c.rcnn_roi[0], c.rcnn_roi[0], c.rcnn_roi[0]};
  c.mask_roi = {c.mask_roi[0], c.mask_roi[0], c.mask_roi[0]};
  c.validate();
  return c;
}

std::vector<std::string> ModelConfig::keys(const std::string& prefix) {
  std::vector<std::string> out;
  ModelConfig c;
  visit_fields([&](const std::string& k, auto&) { out.push_back(prefix + k); }, c);
  return out;
}

// ---------------------------------------------------------------- parameters

void VoxelRcnn::add_param(const std::string& name, Shape shape, double stddev, double fill, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), fill);
  if (stddev > 0.0) {
    for (auto& x : v) x = stddev * rng.normal();
  }
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({name, t});
}

void VoxelRcnn::add_conv(const std::string& name, std::int64_t out, std::int64_t in, std::int64_t k,
                         Rng& rng, double gain) {
  add_param(name + ".w", {out, in, k, k, k}, std::sqrt(gain / static_cast<double>(in * k * k * k)), 0.0, rng);
}

void VoxelRcnn::add_norm(const std::string& name, std::int64_t c) {
  Rng unused(0);
  add_param(name + ".g", {c}, 0.0, 1.0, unused);
  add_param(name + ".b", {c}, 0.0, 0.0, unused);
}

VoxelRcnn::VoxelRcnn(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed, 0x6d6f64656cULL);
  auto bias = [&](const std::string& name, std::int64_t c, double v = 0.0) {
    add_param(name + ".b", {c}, 0.0, v, rng);
  };
  auto residual = [&](const std::string& name, std::int64_t c) {
    const std::int64_t h = c / 2;
    add_conv(name + ".b1.conv", h, c, 1, rng);
    add_norm(name + ".b1.norm", h);
    add_conv(name + ".b2a.conv", h, c, 1, rng);
    add_norm(name + ".b2a.norm", h);
    add_conv(name + ".b2b.conv", h, h, 3, rng);
    add_norm(name + ".b2b.norm", h);
    add_conv(name + ".out.conv", c, 2 * h, 1, rng, 1.0);
    bias(name + ".out.conv", c);
  };
  auto reduction = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    const std::int64_t a = out / 2, b = out / 4, c = out - a - b;
    add_conv(name + ".s.conv", a, in, 3, rng);
    add_conv(name + ".da.conv", b, in, 3, rng);
    add_conv(name + ".db.conv", c, in, 3, rng);
    add_norm(name + ".norm", out);
  };
  const std::int64_t c0 = cfg_.stem_channels, c1 = cfg_.early_channels, c2 = cfg_.late_channels;
  add_conv("backbone.stem.conv", c0, 1, 3, rng);
  add_norm("backbone.stem.norm", c0);
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) residual("backbone.a" + std::to_string(i), c0);
  reduction("backbone.red1", c0, c1);
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) residual("backbone.b" + std::to_string(i), c1);
  reduction("backbone.red2", c1, c2);
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) residual("backbone.c" + std::to_string(i), c2);

  // Focal-loss prior: initial foreground probability 0.01.
  const double prior = -std::log(99.0);
  for (const auto& [map, c] : {std::pair<std::string, std::int64_t>{"early", c1}, {"late", c2}}) {
    const std::string base = "rpn." + map;
    add_conv(base + ".tower.conv", c, c, 3, rng);
    bias(base + ".tower.conv", c);
    add_param(base + ".cls.conv.w", {1, c, 1, 1, 1}, 0.01, 0.0, rng);
    bias(base + ".cls.conv", 1, prior);
    add_param(base + ".reg.conv.w", {6, c, 1, 1, 1}, 0.01, 0.0, rng);
    bias(base + ".reg.conv", 6);
  }

  const std::int64_t rc = cfg_.rcnn_channels;
  add_conv("rcnn.conv1", rc, c1, 3, rng);
  bias("rcnn.conv1", rc);
  add_conv("rcnn.conv2", rc, rc, 3, rng);
  bias("rcnn.conv2", rc);
  const std::int64_t flat = rc * (cfg_.rcnn_roi[0] - 4) * (cfg_.rcnn_roi[1] - 4) * (cfg_.rcnn_roi[2] - 4);
  const std::int64_t hid = cfg_.rcnn_hidden;
  add_param("rcnn.fc.w", {hid, flat}, std::sqrt(2.0 / static_cast<double>(flat)), 0.0, rng);
  bias("rcnn.fc", hid);
  add_param("rcnn.cls.w", {2, hid}, 0.01, 0.0, rng);
  bias("rcnn.cls", 2);
  add_param("rcnn.reg.w", {6, hid}, 0.001, 0.0, rng);
  bias("rcnn.reg", 6);

  const std::int64_t mc = cfg_.mask_channels;
  add_conv("mask.conv1", mc, c1 + 1, 3, rng);
  bias("mask.conv1", mc);
  add_conv("mask.conv2", mc, mc, 3, rng);
  bias("mask.conv2", mc);
  add_param("mask.up.w", {mc, mc / 2, 2, 2, 2}, std::sqrt(2.0 / static_cast<double>(mc)), 0.0, rng);
  bias("mask.up", mc / 2);
  add_conv("mask.out.conv", 1, mc / 2, 1, rng, 1.0);
  bias("mask.out.conv", 1);
}

ParameterList VoxelRcnn::group(const std::string& prefix) const {
  ParameterList out;
  for (const auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

const Tensor& VoxelRcnn::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter " + name);
  return params_[it->second].tensor;
}

// ---------------------------------------------------------------- layers

Tensor VoxelRcnn::conv(const std::string& name, const Tensor& x, int stride, int dilation,
                       bool same) const {
  ops::ConvOptions opt{stride, dilation, same ? ops::Padding::kSame : ops::Padding::kValid};
  auto it = index_.find(name + ".b");
  const Tensor bias = it == index_.end() ? Tensor{} : params_[it->second].tensor;
  return ops::conv3d(x, param(name + ".w"), bias, opt);
}

Tensor VoxelRcnn::norm_relu(const std::string& name, const Tensor& x) const {
  return ops::relu(ops::instance_norm(x, param(name + ".g"), param(name + ".b")));
}

// x + scale * W [b1(x), b2(x)]; no activation after the sum, so a zero
// branch leaves the block an exact identity.
Tensor VoxelRcnn::residual_block(const std::string& name, const Tensor& x) const {
  const Tensor b1 = norm_relu(name + ".b1.norm", conv(name + ".b1.conv", x));
  Tensor b2 = norm_relu(name + ".b2a.norm", conv(name + ".b2a.conv", x));
  b2 = norm_relu(name + ".b2b.norm", conv(name + ".b2b.conv", b2));
  const Tensor mixed = conv(name + ".out.conv", ops::concat({b1, b2}, 1));
  return ops::add(x, ops::scale(mixed, cfg_.residual_scale));
}

// Stride-2 downsampling in place of pooling: a plain strided branch next to
// strided branches at the two configured dilations.
Tensor VoxelRcnn::reduction_block(const std::string& name, const Tensor& x) const {
  const Tensor s = conv(name + ".s.conv", x, 2, 1);
  const Tensor a = conv(name + ".da.conv", x, 2, cfg_.reduction_dilations[0]);
  const Tensor b = conv(name + ".db.conv", x, 2, cfg_.reduction_dilations[1]);
  return norm_relu(name + ".norm", ops::concat({s, a, b}, 1));
}

FeaturePyramid VoxelRcnn::backbone(const Tensor& x) const {
  if (x.rank() != 5 || x.dim(1) != 1) {
    throw ShapeError("backbone: expected [N,1,P,P,P], got " + shape_str(x.shape()));
  }
  for (int i = 2; i < 5; ++i) {
    if (x.dim(i) % 8 != 0) throw ShapeError("backbone: spatial dims must be divisible by 8, got " + shape_str(x.shape()));
  }
  Tensor h = norm_relu("backbone.stem.norm", conv("backbone.stem.conv", x, 2));
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) h = residual_block("backbone.a" + std::to_string(i), h);
  h = reduction_block("backbone.red1", h);
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) h = residual_block("backbone.b" + std::to_string(i), h);
  FeaturePyramid fp;
  fp.early = h;
  h = reduction_block("backbone.red2", h);
  for (int i = 0; i < cfg_.blocks_per_stage; ++i) h = residual_block("backbone.c" + std::to_string(i), h);
  fp.late = h;
  fp.early_stride = cfg_.early_stride();
  fp.late_stride = cfg_.late_stride();
  return fp;
}

RpnOutput VoxelRcnn::rpn(const FeaturePyramid& fp, bool train, Rng* rng) const {
  if (fp.early.dim(0) != 1 || fp.late.dim(0) != 1) {
    throw ShapeError("rpn: one patch per call, got batch " + std::to_string(fp.early.dim(0)));
  }
  std::vector<Tensor> logits, deltas;
  for (const auto& [map, f] : {std::pair<std::string, Tensor>{"early", fp.early}, {"late", fp.late}}) {
    const std::string base = "rpn." + map;
    const Tensor t = ops::relu(conv(base + ".tower.conv", f));
    logits.push_back(ops::channels_last(conv(base + ".cls.conv", ops::dropout(t, cfg_.dropout, train, rng))));
    deltas.push_back(ops::channels_last(conv(base + ".reg.conv", t)));
  }
  return {ops::concat(logits, 0), ops::concat(deltas, 0)};
}

std::vector<Box3> VoxelRcnn::anchors(const FeaturePyramid& fp) const {
  const std::vector<double> early{cfg_.early_anchor}, late{cfg_.late_anchor};
  auto out = generate_anchors({fp.early.dim(2), fp.early.dim(3), fp.early.dim(4)}, fp.early_stride, early);
  const auto l = generate_anchors({fp.late.dim(2), fp.late.dim(3), fp.late.dim(4)}, fp.late_stride, late);
  out.insert(out.end(), l.begin(), l.end());
  return out;
}

RcnnOutput VoxelRcnn::rcnn(const FeaturePyramid& fp, const std::vector<Box3>& rois, bool train,
                           Rng* rng, std::int64_t batch_index) const {
  std::vector<Box3> fboxes;
  fboxes.reserve(rois.size());
  for (const auto& b : rois) fboxes.push_back(ops::to_feature_coords(b, fp.early_stride));
  Tensor h = ops::roi_align_3d(fp.early, fboxes, cfg_.rcnn_roi, cfg_.roi_samples, batch_index);
  h = ops::relu(conv("rcnn.conv1", h, 1, 1, false));
  h = ops::relu(conv("rcnn.conv2", h, 1, 1, false));
  const std::int64_t r = h.dim(0);
  h = ops::reshape(h, {r, h.numel() / r});
  h = ops::relu(ops::linear(h, param("rcnn.fc.w"), param("rcnn.fc.b")));
  RcnnOutput out;
  out.logits = ops::linear(ops::dropout(h, cfg_.dropout, train, rng), param("rcnn.cls.w"), param("rcnn.cls.b"));
  out.deltas = ops::linear(h, param("rcnn.reg.w"), param("rcnn.reg.b"));
  return out;
}

Tensor VoxelRcnn::mask(const FeaturePyramid& fp, const Tensor& image, const std::vector<Box3>& rois,
                       std::int64_t batch_index) const {
  std::vector<Box3> fboxes;
  fboxes.reserve(rois.size());
  for (const auto& b : rois) fboxes.push_back(ops::to_feature_coords(b, fp.early_stride));
  const Tensor feat = ops::roi_align_3d(fp.early, fboxes, cfg_.mask_roi, cfg_.roi_samples, batch_index);
  const Tensor pix = ops::roi_align_3d(image, rois, cfg_.mask_roi, cfg_.roi_samples, batch_index);
  Tensor h = ops::concat({feat, pix}, 1);
  h = ops::relu(conv("mask.conv1", h));
  h = ops::relu(conv("mask.conv2", h));
  h = ops::relu(ops::conv3d_transpose(h, param("mask.up.w"), param("mask.up.b"), 2));
  return ops::sigmoid(conv("mask.out.conv", h));
}

// ---------------------------------------------------------------- proposals

ProposalSet propose(const RpnOutput& out, const std::vector<Box3>& anchors, const Vec3& patch_dims,
                    const ModelConfig& cfg, int top_k) {
  const auto n = static_cast<std::size_t>(out.logits.numel());
  if (n != anchors.size() || out.deltas.numel() != static_cast<std::int64_t>(6 * n)) {
    throw ShapeError("propose: " + std::to_string(anchors.size()) + " anchors vs logits " +
                     shape_str(out.logits.shape()) + " and deltas " + shape_str(out.deltas.shape()));
  }
  const auto logit = out.logits.data();
  const auto delta = out.deltas.data();
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = sigmoid(logit[i]);

  auto decoded = [&](std::size_t i) {
    Delta3 d;
    std::copy(delta.begin() + static_cast<std::ptrdiff_t>(6 * i), delta.begin() + static_cast<std::ptrdiff_t>(6 * i + 6), d.v.begin());
    Box3 b = clip_box(decode(anchors[i], d), patch_dims);
    // A box regressed fully outside the patch falls back to its clipped anchor.
    if (b.size[0] < 1e-3 || b.size[1] < 1e-3 || b.size[2] < 1e-3) b = clip_box(anchors[i], patch_dims);
    return b;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

  ProposalSet ps;
  std::vector<std::size_t> passing;
  // Compared in logit space so a score of exactly the threshold never passes.
  const double thr = cfg.score_threshold;
  const double logit_thr = thr <= 0.0 ? -INFINITY : thr >= 1.0 ? INFINITY : std::log(thr / (1.0 - thr));
  for (std::size_t i : order) {
    if (logit[i] > logit_thr) passing.push_back(i);
  }
  if (passing.empty()) {
    ps.fallback = true;
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.fallback_top), n);
    for (std::size_t j = 0; j < k; ++j) {
      ps.boxes.push_back(decoded(order[j]));
      ps.scores.push_back(score[order[j]]);
    }
    return ps;
  }
  if (passing.size() > static_cast<std::size_t>(cfg.pre_nms_top)) passing.resize(static_cast<std::size_t>(cfg.pre_nms_top));
  std::vector<ScoredBox> cand;
  cand.reserve(passing.size());
  for (std::size_t i : passing) cand.push_back({decoded(i), score[i]});
  for (std::size_t k : nms3d(cand, cfg.proposal_nms)) {
    if (ps.boxes.size() >= static_cast<std::size_t>(top_k)) break;
    ps.boxes.push_back(cand[k].box);
    ps.scores.push_back(cand[k].score);
  }
  return ps;
}

std::vector<double> foreground_scores(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("foreground_scores: expected [R,2], got " + shape_str(logits.shape()));
  }
  const auto d = logits.data();
  std::vector<double> out(static_cast<std::size_t>(logits.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(d[2 * i + 1] - d[2 * i]);
  return out;
}

std::vector<double> mask_target(const std::vector<std::uint8_t>& labels, const Index3& dims,
                                std::uint8_t id, const Box3& box, const Index3& out) {
  if (static_cast<std::int64_t>(labels.size()) != volume_of(dims)) {
    throw ShapeError("mask_target: label buffer does not match dims");
  }
  auto value = [&](std::int64_t z, std::int64_t y, std::int64_t x) -> double {
    if (z < 0 || y < 0 || x < 0 || z >= dims[0] || y >= dims[1] || x >= dims[2]) return 0.0;
    return labels[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)] == id ? 1.0 : 0.0;
  };
  std::vector<double> t(static_cast<std::size_t>(volume_of(out)));
  std::size_t k = 0;
  for (std::int64_t oz = 0; oz < out[0]; ++oz)
    for (std::int64_t oy = 0; oy < out[1]; ++oy)
      for (std::int64_t ox = 0; ox < out[2]; ++ox) {
        const Index3 o{oz, oy, ox};
        Vec3 u;
        Index3 i0;
        for (int a = 0; a < 3; ++a) {
          u[a] = box.lo(a) + (static_cast<double>(o[a]) + 0.5) * box.size[a] / static_cast<double>(out[a]) - 0.5;
          i0[a] = static_cast<std::int64_t>(std::floor(u[a]));
          u[a] -= static_cast<double>(i0[a]);
        }
        double s = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const double w = (a ? u[0] : 1 - u[0]) * (b ? u[1] : 1 - u[1]) * (c ? u[2] : 1 - u[2]);
              if (w != 0.0) s += w * value(i0[0] + a, i0[1] + b, i0[2] + c);
            }
        t[k++] = s >= 0.5 ? 1.0 : 0.0;
      }
  return t;
}

}  // namespace voxelrcnn
