#include "voxelrcnn/losses.hpp"

#include <algorithm>
#include <cmath>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn::ops {

namespace {

double sigmoid(double t) {
  return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

// log(sigmoid(t)) without overflow.
double log_sigmoid(double t) { return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }

struct FocalTerm {
  double loss = 0.0;
  double dz = 0.0;  // d loss / d z
};

// t = s z with s = +1 for positives, -1 for negatives; q = sigmoid(t) = p_t.
//   L = -a (1 - q)^g log q
//   dL/dz = s a (1 - q)^g (g q log q - (1 - q))
FocalTerm focal_term(double z, int label, double gamma, double alpha) {
  const double s = label == 1 ? 1.0 : -1.0;
  const double a = label == 1 ? alpha : 1.0 - alpha;
  const double t = s * z;
  const double q = sigmoid(t);
  const double one_minus_q = sigmoid(-t);
  const double log_q = log_sigmoid(t);
  const double w = gamma == 0.0 ? 1.0 : std::pow(one_minus_q, gamma);
  return {-a * w * log_q, s * a * w * (gamma * q * log_q - one_minus_q)};
}

void check_labels(std::int64_t rows, const std::vector<int>& labels, const char* op) {
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l > 1) throw ArgumentError(std::string(op) + ": labels must be 0, 1 or negative (ignored)");
  }
}

Tensor zero_loss() { return Tensor(Shape{1}, 0.0); }

}  // namespace

Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels, double gamma, double alpha) {
  const std::int64_t m = logits.numel();
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.dim(1) != 1)) {
    throw ShapeError("focal_loss: logits must be [M] or [M,1], got " + shape_str(logits.shape()));
  }
  check_labels(m, labels, "focal_loss");
  std::vector<double> dz(static_cast<std::size_t>(m), 0.0);
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < m; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0) continue;
    const auto t = focal_term(logits.data()[static_cast<std::size_t>(i)], l, gamma, alpha);
    total += t.loss;
    dz[static_cast<std::size_t>(i)] = t.dz;
    ++count;
  }
  if (count == 0) return zero_loss();
  const double inv = 1.0 / static_cast<double>(count);
  return make_result({1}, {total * inv}, {logits}, [dz = std::move(dz), inv](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double g0 = n.grad[0] * inv;
    for (std::size_t i = 0; i < dz.size(); ++i) g[i] += g0 * dz[i];
  }, "focal_loss");
}

Tensor focal_loss_softmax(const Tensor& logits, const std::vector<int>& labels, double gamma,
                          double alpha) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("focal_loss_softmax: logits must be [M,2], got " + shape_str(logits.shape()));
  }
  const std::int64_t m = logits.dim(0);
  check_labels(m, labels, "focal_loss_softmax");
  // softmax(l0, l1)[1] = sigmoid(l1 - l0).
  std::vector<double> dz(static_cast<std::size_t>(m), 0.0);
  double total = 0.0;
  std::int64_t count = 0;
  const auto d = logits.data();
  for (std::int64_t i = 0; i < m; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0) continue;
    const auto k = static_cast<std::size_t>(i);
    const auto t = focal_term(d[2 * k + 1] - d[2 * k], l, gamma, alpha);
    total += t.loss;
    dz[k] = t.dz;
    ++count;
  }
  if (count == 0) return zero_loss();
  const double inv = 1.0 / static_cast<double>(count);
  return make_result({1}, {total * inv}, {logits}, [dz = std::move(dz), inv](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double g0 = n.grad[0] * inv;
    for (std::size_t i = 0; i < dz.size(); ++i) {
      g[2 * i] -= g0 * dz[i];
      g[2 * i + 1] += g0 * dz[i];
    }
  }, "focal_loss_softmax");
}

Tensor soft_iou_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("soft_iou_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto p = pred.data();
  const auto g = target.data();
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = inter + eps;
  const double den = sp + sg - inter + eps;
  return make_result({1}, {1.0 - num / den}, {pred, target}, [num, den](Node& n) {
    const auto& pv = n.parents[0]->data;
    const auto& gv = n.parents[1]->data;
    const double g0 = n.grad[0];
    const double den2 = den * den;
    // d/dp_i: -(g_i den - num (1 - g_i)) / den^2, symmetric in the target.
    if (n.parents[0]->requires_grad) {
      auto& gp = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < gv.size(); ++i) gp[i] -= g0 * (gv[i] * den - num * (1.0 - gv[i])) / den2;
    }
    if (n.parents[1]->requires_grad) {
      auto& gg = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < pv.size(); ++i) gg[i] -= g0 * (pv[i] * den - num * (1.0 - pv[i])) / den2;
    }
  }, "soft_iou_loss");
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  if (!pred.defined()) return zero_loss();
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto p = pred.data();
  const auto t = target.data();
  const double inv = 1.0 / static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::abs(p[i] - t[i]);
    total += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return make_result({1}, {total * inv}, {pred, target}, [inv](Node& n) {
    const auto& pv = n.parents[0]->data;
    const auto& tv = n.parents[1]->data;
    const double g0 = n.grad[0] * inv;
    for (int k = 0; k < 2; ++k) {
      if (!n.parents[static_cast<std::size_t>(k)]->requires_grad) continue;
      auto& g = n.parents[static_cast<std::size_t>(k)]->grad_buffer();
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        g[i] += sign * g0 * std::clamp(pv[i] - tv[i], -1.0, 1.0);
      }
    }
  }, "smooth_l1");
}

}  // namespace voxelrcnn::ops
