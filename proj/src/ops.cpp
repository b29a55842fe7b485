#include "voxelrcnn/ops.hpp"

#include <algorithm>
#include <cmath>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn::ops {

namespace {

// Grad buffer of parent i, or nullptr when that parent does not need one.
double* parent_grad(Node& n, std::size_t i) {
  Node& p = *n.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ArgumentError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(n, k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
      }
    }
  }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (double* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    const auto& x = n.parents[0]->data;
    const auto& y = n.parents[1]->data;
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * y[i];
    }
    if (double* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * x[i];
    }
  }, "mul");
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += s * n.grad[i];
    }
  }, "scale");
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      const auto& in = n.parents[0]->data;
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        if (in[i] > 0.0) g[i] += n.grad[i];
      }
    }
  }, "relu");
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        const double s = n.data[i];
        g[i] += n.grad[i] * s * (1.0 - s);
      }
    }
  }, "sigmoid");
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const auto& shape = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<std::size_t>(i)];
  const std::int64_t len = shape[static_cast<std::size_t>(axis)];
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < inner; ++j) {
      const std::int64_t base = o * len * inner + j;
      double mx = in[static_cast<std::size_t>(base)];
      for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, in[static_cast<std::size_t>(base + k * inner)]);
      double total = 0.0;
      for (std::int64_t k = 0; k < len; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * inner);
        out[idx] = std::exp(in[idx] - mx);
        total += out[idx];
      }
      for (std::int64_t k = 0; k < len; ++k) out[static_cast<std::size_t>(base + k * inner)] /= total;
    }
  }
  return make_result(shape, std::move(out), {x}, [outer, inner, len](Node& n) {
    double* g = parent_grad(n, 0);
    if (!g) return;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t j = 0; j < inner; ++j) {
        const std::int64_t base = o * len * inner + j;
        double dot = 0.0;
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * inner);
          dot += n.grad[idx] * n.data[idx];
        }
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * inner);
          g[idx] += n.data[idx] * (n.grad[idx] - dot);
        }
      }
    }
  }, "softmax");
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const std::int64_t out_len = out_shape[static_cast<std::size_t>(axis)];

  std::vector<std::int64_t> offsets;
  std::vector<double> out(static_cast<std::size_t>(outer * out_len * inner));
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t len = p.shape()[static_cast<std::size_t>(axis)];
    auto src = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * len * inner, len * inner,
                  out.begin() + (o * out_len + off) * inner);
    }
    off += len;
  }
  return make_result(out_shape, std::move(out), parts,
                     [outer, inner, out_len, offsets](Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      double* g = parent_grad(n, k);
      if (!g) continue;
      const std::int64_t len =
          static_cast<std::int64_t>(n.parents[k]->data.size()) / (outer * inner);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = n.grad.data() + (o * out_len + offsets[k]) * inner;
        double* dst = g + o * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    }
  }, "concat");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  }, "reshape");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      const double g0 = n.grad[0];
      for (std::size_t i = 0; i < n.parents[0]->data.size(); ++i) g[i] += g0;
    }
  }, "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 3) throw ShapeError("global_avg_pool: expected [N,C,...], got " + shape_str(x.shape()));
  const std::int64_t nc = x.dim(0) * x.dim(1);
  const std::int64_t spatial = x.numel() / nc;
  auto in = x.data();
  std::vector<double> out(static_cast<std::size_t>(nc), 0.0);
  for (std::int64_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < spatial; ++j) s += in[static_cast<std::size_t>(i * spatial + j)];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(spatial);
  }
  return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [nc, spatial](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      const double inv = 1.0 / static_cast<double>(spatial);
      for (std::int64_t i = 0; i < nc; ++i) {
        const double gi = n.grad[static_cast<std::size_t>(i)] * inv;
        for (std::int64_t j = 0; j < spatial; ++j) g[i * spatial + j] += gi;
      }
    }
  }, "global_avg_pool");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: incompatible shapes x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  }
  const std::int64_t rows = x.dim(0), in_f = x.dim(1), out_f = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_f)) {
    throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " does not match " +
                     std::to_string(out_f) + " outputs");
  }
  auto xd = x.data();
  auto wd = w.data();
  std::vector<double> out(static_cast<std::size_t>(rows * out_f));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t o = 0; o < out_f; ++o) {
      double s = b.defined() ? b.data()[static_cast<std::size_t>(o)] : 0.0;
      for (std::int64_t f = 0; f < in_f; ++f) s += xd[static_cast<std::size_t>(r * in_f + f)] * wd[static_cast<std::size_t>(o * in_f + f)];
      out[static_cast<std::size_t>(r * out_f + o)] = s;
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result({rows, out_f}, std::move(out), inputs, [rows, in_f, out_f](Node& n) {
    const auto& xv = n.parents[0]->data;
    const auto& wv = n.parents[1]->data;
    double* gx = parent_grad(n, 0);
    double* gw = parent_grad(n, 1);
    double* gb = n.parents.size() > 2 ? parent_grad(n, 2) : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t o = 0; o < out_f; ++o) {
        const double go = n.grad[static_cast<std::size_t>(r * out_f + o)];
        if (go == 0.0) continue;
        if (gb) gb[o] += go;
        for (std::int64_t f = 0; f < in_f; ++f) {
          if (gx) gx[r * in_f + f] += go * wv[static_cast<std::size_t>(o * in_f + f)];
          if (gw) gw[o * in_f + f] += go * xv[static_cast<std::size_t>(r * in_f + f)];
        }
      }
    }
  }, "linear");
}

Tensor dropout(const Tensor& x, double p, bool train, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  if (!rng) throw ContractError("dropout: training mode needs an rng");
  const double keep = 1.0 - p;
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    if (double* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * mask[i];
    }
  }, "dropout");
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 3) throw ShapeError("instance_norm: expected [N,C,...], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), channels = x.dim(1);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("instance_norm: scale/shift must have " + std::to_string(channels) + " entries");
  }
  const std::int64_t spatial = x.numel() / (batch * channels);
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<double> out(in.size());
  // xhat is kept for backward; inv_std per slab.
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(static_cast<std::size_t>(batch * channels));
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const std::int64_t slab = n * channels + c;
      const double* src = in.data() + slab * spatial;
      double mu = 0.0;
      for (std::int64_t i = 0; i < spatial; ++i) mu += src[i];
      mu /= static_cast<double>(spatial);
      double var = 0.0;
      for (std::int64_t i = 0; i < spatial; ++i) var += (src[i] - mu) * (src[i] - mu);
      var /= static_cast<double>(spatial);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(slab)] = is;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const auto idx = static_cast<std::size_t>(slab * spatial + i);
        xhat[idx] = (src[i] - mu) * is;
        out[idx] = gm[static_cast<std::size_t>(c)] * xhat[idx] + bt[static_cast<std::size_t>(c)];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [batch, channels, spatial, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Node& n) {
    double* gx = parent_grad(n, 0);
    double* gg = parent_grad(n, 1);
    double* gb = parent_grad(n, 2);
    const auto& gm = n.parents[1]->data;
    const double m = static_cast<double>(spatial);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const std::int64_t base = (b * channels + c) * spatial;
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const auto idx = static_cast<std::size_t>(base + i);
          sum_g += n.grad[idx];
          sum_gx += n.grad[idx] * xhat[idx];
        }
        if (gg) gg[c] += sum_gx;
        if (gb) gb[c] += sum_g;
        if (gx) {
          const double k = gm[static_cast<std::size_t>(c)] * inv_std[static_cast<std::size_t>(b * channels + c)] / m;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const auto idx = static_cast<std::size_t>(base + i);
            gx[idx] += k * (m * n.grad[idx] - sum_g - xhat[idx] * sum_gx);
          }
        }
      }
    }
  }, "instance_norm");
}

Tensor channels_last(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("channels_last: expected [N,C,D,H,W], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), channels = x.dim(1);
  const std::int64_t spatial = x.dim(2) * x.dim(3) * x.dim(4);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t s = 0; s < spatial; ++s) {
        out[static_cast<std::size_t>((b * spatial + s) * channels + c)] =
            in[static_cast<std::size_t>((b * channels + c) * spatial + s)];
      }
    }
  }
  return make_result({batch * spatial, channels}, std::move(out), {x},
                     [batch, channels, spatial](Node& n) {
    double* g = parent_grad(n, 0);
    if (!g) return;
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t s = 0; s < spatial; ++s) {
          g[(b * channels + c) * spatial + s] +=
              n.grad[static_cast<std::size_t>((b * spatial + s) * channels + c)];
        }
      }
    }
  }, "channels_last");
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected [M,F], got " + shape_str(x.shape()));
  const std::int64_t m = x.dim(0), f = x.dim(1);
  if (rows.empty()) throw ArgumentError("gather_rows: empty index list");
  auto in = x.data();
  std::vector<double> out(rows.size() * static_cast<std::size_t>(f));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= m) throw ArgumentError("gather_rows: row index out of range");
    std::copy_n(in.begin() + rows[r] * f, f, out.begin() + static_cast<std::int64_t>(r) * f);
  }
  return make_result({static_cast<std::int64_t>(rows.size()), f}, std::move(out), {x},
                     [rows, f](Node& n) {
    double* g = parent_grad(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::int64_t j = 0; j < f; ++j) g[rows[r] * f + j] += n.grad[r * static_cast<std::size_t>(f) + static_cast<std::size_t>(j)];
    }
  }, "gather_rows");
}

}  // namespace voxelrcnn::ops
