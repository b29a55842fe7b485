#include "voxelrcnn/conv.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Index mapping between an input grid and its output grid:
// in = out * stride + tap * dilation - pad_lo.
struct Geometry {
  std::int64_t channels = 0;
  std::array<std::int64_t, 3> in{}, kernel{}, out{}, pad{};
  std::int64_t stride = 1, dilation = 1;

  std::int64_t in_vol() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_vol() const { return out[0] * out[1] * out[2]; }
  std::int64_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
  bool pointwise() const {
    return taps() == 1 && stride == 1 && pad[0] == 0 && pad[1] == 0 && pad[2] == 0;
  }
};

// [lo, hi) of output positions along an axis whose input index is in range.
std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t offset, std::int64_t stride,
                                                  std::int64_t in, std::int64_t out) {
  // in_idx = o * stride + offset, need 0 <= in_idx < in.
  std::int64_t lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  std::int64_t hi = in - 1 - offset < 0 ? 0 : (in - 1 - offset) / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Forward=true: col <- im2col(x). Forward=false: x += col2im(col).
template <bool kGather>
void transfer(const Geometry& g, std::conditional_t<kGather, const double*, double*> x,
              std::conditional_t<kGather, double*, const double*> col) {
  const auto [kd, kh, kw] = g.kernel;
  const auto [od, oh, ow] = g.out;
  const auto [id, ih, iw] = g.in;
  const std::int64_t ov = g.out_vol();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const std::int64_t xbase = c * g.in_vol();
    for (std::int64_t a = 0; a < kd; ++a) {
      const std::int64_t offz = a * g.dilation - g.pad[0];
      const auto [zlo, zhi] = valid_range(offz, g.stride, id, od);
      for (std::int64_t b = 0; b < kh; ++b) {
        const std::int64_t offy = b * g.dilation - g.pad[1];
        const auto [ylo, yhi] = valid_range(offy, g.stride, ih, oh);
        for (std::int64_t e = 0; e < kw; ++e) {
          const std::int64_t offx = e * g.dilation - g.pad[2];
          const auto [xlo, xhi] = valid_range(offx, g.stride, iw, ow);
          const std::int64_t row = ((c * kd + a) * kh + b) * kw + e;
          auto* crow = col + row * ov;
          if constexpr (kGather) std::fill(crow, crow + ov, 0.0);
          for (std::int64_t oz = zlo; oz < zhi; ++oz) {
            const std::int64_t iz = oz * g.stride + offz;
            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
              const std::int64_t iy = oy * g.stride + offy;
              auto* cdst = crow + (oz * oh + oy) * ow;
              auto* xsrc = x + xbase + (iz * ih + iy) * iw + offx;
              if (g.stride == 1) {
                for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                  if constexpr (kGather) cdst[ox] = xsrc[ox];
                  else xsrc[ox] += cdst[ox];
                }
              } else {
                for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                  if constexpr (kGather) cdst[ox] = xsrc[ox * g.stride];
                  else xsrc[ox * g.stride] += cdst[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

void im2col(const Geometry& g, const double* x, double* col) { transfer<true>(g, x, col); }
void col2im(const Geometry& g, const double* col, double* x) { transfer<false>(g, x, col); }

std::int64_t pad_total(std::int64_t kernel, const ConvOptions& opt) {
  return opt.padding == Padding::kSame ? (kernel - 1) * opt.dilation : 0;
}

// Geometry of a conv3d mapping `in` (channels c) through kernel dims.
Geometry make_geometry(std::int64_t channels, const std::array<std::int64_t, 3>& in,
                       const std::array<std::int64_t, 3>& kernel, const ConvOptions& opt) {
  Geometry g;
  g.channels = channels;
  g.in = in;
  g.kernel = kernel;
  g.stride = opt.stride;
  g.dilation = opt.dilation;
  for (int i = 0; i < 3; ++i) {
    g.pad[static_cast<std::size_t>(i)] = pad_total(kernel[static_cast<std::size_t>(i)], opt) / 2;
    g.out[static_cast<std::size_t>(i)] = conv_out_size(in[static_cast<std::size_t>(i)], kernel[static_cast<std::size_t>(i)], opt);
  }
  return g;
}

std::array<std::int64_t, 3> spatial(const Tensor& t) { return {t.dim(2), t.dim(3), t.dim(4)}; }

// Y[K, O] = W[K, CT] * X-columns, for one sample.
void conv_forward_sample(const Geometry& g, const double* x, const double* w, std::int64_t k,
                         double* y, std::vector<double>& scratch) {
  const std::int64_t rows = g.channels * g.taps();
  const double* colp = x;
  if (!g.pointwise()) {
    scratch.resize(static_cast<std::size_t>(rows * g.out_vol()));
    im2col(g, x, scratch.data());
    colp = scratch.data();
  }
  MutMap(y, k, g.out_vol()).noalias() = ConstMap(w, k, rows) * ConstMap(colp, rows, g.out_vol());
}

// gx += col2im(W^T gy); gw += gy * col^T, for one sample.
void conv_backward_sample(const Geometry& g, const double* x, const double* w, std::int64_t k,
                          const double* gy, double* gx, double* gw,
                          std::vector<double>& scratch) {
  const std::int64_t rows = g.channels * g.taps();
  const std::int64_t ov = g.out_vol();
  ConstMap gym(gy, k, ov);
  if (gw) {
    const double* colp = x;
    if (!g.pointwise()) {
      scratch.resize(static_cast<std::size_t>(rows * ov));
      im2col(g, x, scratch.data());
      colp = scratch.data();
    }
    MutMap(gw, k, rows).noalias() += gym * ConstMap(colp, rows, ov).transpose();
  }
  if (gx) {
    if (g.pointwise()) {
      MutMap(gx, rows, ov).noalias() += ConstMap(w, k, rows).transpose() * gym;
    } else {
      scratch.resize(static_cast<std::size_t>(rows * ov));
      MutMap(scratch.data(), rows, ov).noalias() = ConstMap(w, k, rows).transpose() * gym;
      col2im(g, scratch.data(), gx);
    }
  }
}

void check_bias(const Tensor& bias, std::int64_t channels, const char* op) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != channels)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(channels) + " output channels");
  }
}

void add_bias(std::vector<double>& y, const Tensor& bias, std::int64_t batch,
              std::int64_t channels, std::int64_t vol) {
  if (!bias.defined()) return;
  auto bd = bias.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double* p = y.data() + (n * channels + c) * vol;
      const double bv = bd[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < vol; ++i) p[i] += bv;
    }
  }
}

void bias_grad(const std::vector<double>& gy, double* gb, std::int64_t batch,
               std::int64_t channels, std::int64_t vol) {
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const double* p = gy.data() + (n * channels + c) * vol;
      double s = 0.0;
      for (std::int64_t i = 0; i < vol; ++i) s += p[i];
      gb[c] += s;
    }
  }
}

double* grad_of(Node& n, std::size_t i) {
  if (i >= n.parents.size()) return nullptr;
  Node& p = *n.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

}  // namespace

std::int64_t conv_out_size(std::int64_t in, std::int64_t kernel, const ConvOptions& opt) {
  if (opt.stride < 1 || opt.dilation < 1) throw ArgumentError("conv: stride and dilation must be >= 1");
  const std::int64_t span = (kernel - 1) * opt.dilation + 1;
  const std::int64_t padded = in + pad_total(kernel, opt);
  if (padded < span) return 0;
  return (padded - span) / opt.stride + 1;
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvOptions& opt) {
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(1)) {
    throw ShapeError("conv3d: incompatible shapes x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  }
  const std::int64_t batch = x.dim(0), k = w.dim(0);
  check_bias(bias, k, "conv3d");
  const Geometry g = make_geometry(x.dim(1), spatial(x), {w.dim(2), w.dim(3), w.dim(4)}, opt);
  if (g.out_vol() <= 0 || g.out[0] <= 0 || g.out[1] <= 0 || g.out[2] <= 0) {
    throw ShapeError("conv3d: kernel " + shape_str(w.shape()) + " larger than input " +
                     shape_str(x.shape()));
  }
  std::vector<double> y(static_cast<std::size_t>(batch * k * g.out_vol()));
  std::vector<double> scratch;
  for (std::int64_t n = 0; n < batch; ++n) {
    conv_forward_sample(g, x.data().data() + n * g.channels * g.in_vol(), w.data().data(), k,
                        y.data() + n * k * g.out_vol(), scratch);
  }
  add_bias(y, bias, batch, k, g.out_vol());
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({batch, k, g.out[0], g.out[1], g.out[2]}, std::move(y), inputs,
                     [g, batch, k](Node& n) {
    double* gx = grad_of(n, 0);
    double* gw = grad_of(n, 1);
    double* gb = grad_of(n, 2);
    const auto& xv = n.parents[0]->data;
    const auto& wv = n.parents[1]->data;
    std::vector<double> scratch;
    for (std::int64_t s = 0; s < batch; ++s) {
      conv_backward_sample(g, xv.data() + s * g.channels * g.in_vol(), wv.data(), k,
                           n.grad.data() + s * k * g.out_vol(),
                           gx ? gx + s * g.channels * g.in_vol() : nullptr, gw, scratch);
    }
    if (gb) bias_grad(n.grad, gb, batch, k, g.out_vol());
  }, "conv3d");
}

Tensor conv3d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(0)) {
    throw ShapeError("conv3d_transpose: incompatible shapes x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  }
  const std::int64_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(1);
  check_bias(bias, cout, "conv3d_transpose");
  ConvOptions opt;
  opt.stride = stride;
  const std::array<std::int64_t, 3> kernel{w.dim(2), w.dim(3), w.dim(4)};
  std::array<std::int64_t, 3> out_dims{};
  for (int i = 0; i < 3; ++i) {
    out_dims[static_cast<std::size_t>(i)] = (x.dim(2 + i) - 1) * stride + kernel[static_cast<std::size_t>(i)];
  }
  // The conv3d that this op is the input-adjoint of: out_dims -> x dims.
  const Geometry g = make_geometry(cout, out_dims, kernel, opt);
  const std::int64_t ov = g.in_vol();
  std::vector<double> y(static_cast<std::size_t>(batch * cout * ov), 0.0);
  std::vector<double> scratch;
  const std::int64_t xv_per = cin * g.out_vol();
  for (std::int64_t n = 0; n < batch; ++n) {
    conv_backward_sample(g, nullptr, w.data().data(), cin, x.data().data() + n * xv_per,
                         y.data() + n * cout * ov, nullptr, scratch);
  }
  add_bias(y, bias, batch, cout, ov);
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({batch, cout, out_dims[0], out_dims[1], out_dims[2]}, std::move(y), inputs,
                     [g, batch, cin, cout, ov, xv_per](Node& n) {
    double* gx = grad_of(n, 0);
    double* gw = grad_of(n, 1);
    double* gb = grad_of(n, 2);
    const auto& xv = n.parents[0]->data;
    const auto& wv = n.parents[1]->data;
    const std::int64_t rows = cout * g.taps();
    std::vector<double> col(static_cast<std::size_t>(rows * g.out_vol()));
    for (std::int64_t s = 0; s < batch; ++s) {
      im2col(g, n.grad.data() + s * cout * ov, col.data());
      ConstMap colm(col.data(), rows, g.out_vol());
      ConstMap xm(xv.data() + s * xv_per, cin, g.out_vol());
      if (gx) MutMap(gx + s * xv_per, cin, g.out_vol()).noalias() += ConstMap(wv.data(), cin, rows) * colm;
      if (gw) MutMap(gw, cin, rows).noalias() += xm * colm.transpose();
    }
    if (gb) bias_grad(n.grad, gb, batch, cout, ov);
  }, "conv3d_transpose");
}

}  // namespace voxelrcnn::ops
