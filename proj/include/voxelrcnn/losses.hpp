#pragma once

#include <vector>

#include "voxelrcnn/tensor.hpp"

namespace voxelrcnn::ops {

// Binary focal loss on logits z ([M] or [M, 1]) with p = sigmoid(z):
//   mean over labels >= 0 of  -alpha_t (1 - p_t)^gamma log p_t.
// Labels < 0 are skipped. No contributing entries -> constant 0.
Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels, double gamma = 2.0,
                  double alpha = 0.75);

// Same loss for two-class logits [M, 2] (column 1 = foreground) under softmax.
Tensor focal_loss_softmax(const Tensor& logits, const std::vector<int>& labels,
                          double gamma = 2.0, double alpha = 0.75);

// 1 - (sum p g + eps) / (sum p + sum g - sum p g + eps).
Tensor soft_iou_loss(const Tensor& pred, const Tensor& target, double eps = 1.0);

// Elementwise smooth-L1 (delta = 1), mean over all elements. Empty -> 0.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

}  // namespace voxelrcnn::ops
