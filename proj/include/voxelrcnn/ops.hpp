#pragma once

#include <vector>

#include "voxelrcnn/rng.hpp"
#include "voxelrcnn/tensor.hpp"

// Differentiable primitives. All take and return Tensor handles; every op
// records its backward when grad mode is on (see make_result).
namespace voxelrcnn::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// [N, C, ...] -> [N, C]
Tensor global_avg_pool(const Tensor& x);

// x [N, F], w [O, F], b [O] (optional) -> [N, O]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

// Inverted dropout. Identity when `train` is false or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, Rng* rng);

// Normalizes each (sample, channel) slab of x [N, C, ...] to zero mean and
// unit variance, then applies per-channel gamma/beta ([C] each).
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

// [N, C, D, H, W] -> [N*D*H*W, C]; row r is spatial position r in
// sample-major, then z, y, x order.
Tensor channels_last(const Tensor& x);

// Rows of x [M, F] picked by index -> [k, F]. Repeated indices accumulate
// in backward.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows);

}  // namespace voxelrcnn::ops
