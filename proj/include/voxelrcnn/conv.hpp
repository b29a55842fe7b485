#pragma once

#include <array>

#include "voxelrcnn/tensor.hpp"

namespace voxelrcnn::ops {

enum class Padding {
  kValid,
  // Symmetric zero padding totalling (k - 1) * dilation per axis.
  kSame,
};

struct ConvOptions {
  int stride = 1;
  int dilation = 1;
  Padding padding = Padding::kValid;
};

// Output spatial extent of a 3D cross-correlation along one axis.
std::int64_t conv_out_size(std::int64_t in, std::int64_t kernel, const ConvOptions& opt);

// x [N, C, D, H, W], w [K, C, kd, kh, kw], bias [K] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvOptions& opt);

// Adjoint of conv3d with respect to its input (unpadded, dilation 1):
// x [N, Cin, D, H, W], w [Cin, Cout, kd, kh, kw] -> [N, Cout, (D-1)*s+kd, ...].
Tensor conv3d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias, int stride);

}  // namespace voxelrcnn::ops
