#include "voxelrcnn/roi_align.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn::ops {

namespace {

struct Tap {
  std::int64_t index;  // spatial offset in the feature map
  double weight;
};

// Linear interpolation stencil along one axis.
struct AxisSample {
  std::int64_t i0 = 0, i1 = 0;
  double w0 = 0.0, w1 = 0.0;
  bool valid = false;
};

AxisSample axis_sample(double pos, std::int64_t dim) {
  AxisSample s;
  double u = pos - 0.5;  // continuous index, cell centres at integers
  if (u < -1.0 || u > static_cast<double>(dim)) return s;
  u = std::clamp(u, 0.0, static_cast<double>(dim - 1));
  s.i0 = static_cast<std::int64_t>(std::floor(u));
  s.i1 = std::min(s.i0 + 1, dim - 1);
  s.w1 = u - static_cast<double>(s.i0);
  s.w0 = 1.0 - s.w1;
  s.valid = true;
  return s;
}

// Per output cell (row-major over out_size), the taps it averages; cell k's
// taps are taps[offsets[k] .. offsets[k + 1]).
struct RoiStencil {
  std::vector<Tap> taps;
  std::vector<std::size_t> offsets;
};

RoiStencil build_stencil(const Box3& box, const Index3& fdims, const Index3& out, int spb) {
  // Per axis and output index: the spb samples' stencils.
  std::array<std::vector<AxisSample>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double bin = box.size[a] / static_cast<double>(out[a]);
    const double lo = box.lo(a);
    axis[a].resize(static_cast<std::size_t>(out[a] * spb));
    for (std::int64_t o = 0; o < out[a]; ++o)
      for (int s = 0; s < spb; ++s) {
        const double pos = lo + (static_cast<double>(o) + (s + 0.5) / spb) * bin;
        axis[a][static_cast<std::size_t>(o * spb + s)] = axis_sample(pos, fdims[a]);
      }
  }
  const double norm = 1.0 / static_cast<double>(spb * spb * spb);
  RoiStencil st;
  st.offsets.reserve(static_cast<std::size_t>(volume_of(out) + 1));
  st.offsets.push_back(0);
  for (std::int64_t oz = 0; oz < out[0]; ++oz)
    for (std::int64_t oy = 0; oy < out[1]; ++oy)
      for (std::int64_t ox = 0; ox < out[2]; ++ox) {
        for (int sz = 0; sz < spb; ++sz) {
          const auto& az = axis[0][static_cast<std::size_t>(oz * spb + sz)];
          if (!az.valid) continue;
          for (int sy = 0; sy < spb; ++sy) {
            const auto& ay = axis[1][static_cast<std::size_t>(oy * spb + sy)];
            if (!ay.valid) continue;
            for (int sx = 0; sx < spb; ++sx) {
              const auto& ax = axis[2][static_cast<std::size_t>(ox * spb + sx)];
              if (!ax.valid) continue;
              const std::int64_t zi[2] = {az.i0, az.i1}, yi[2] = {ay.i0, ay.i1}, xi[2] = {ax.i0, ax.i1};
              const double zw[2] = {az.w0, az.w1}, yw[2] = {ay.w0, ay.w1}, xw[2] = {ax.w0, ax.w1};
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  for (int c = 0; c < 2; ++c) {
                    const double w = zw[a] * yw[b] * xw[c] * norm;
                    if (w == 0.0) continue;
                    st.taps.push_back({(zi[a] * fdims[1] + yi[b]) * fdims[2] + xi[c], w});
                  }
            }
          }
        }
        st.offsets.push_back(st.taps.size());
      }
  return st;
}

}  // namespace

Box3 to_feature_coords(const Box3& b, double stride) {
  Box3 f;
  for (int i = 0; i < 3; ++i) {
    f.center[i] = b.center[i] / stride;
    f.size[i] = b.size[i] / stride;
  }
  return f;
}

Tensor roi_align_3d(const Tensor& feature, const std::vector<Box3>& boxes, const Index3& out_size,
                    int samples_per_bin, std::int64_t batch_index) {
  if (feature.rank() != 5) {
    throw ShapeError("roi_align_3d: feature must be [N,C,D,H,W], got " + shape_str(feature.shape()));
  }
  if (batch_index < 0 || batch_index >= feature.dim(0)) {
    throw ArgumentError("roi_align_3d: batch index out of range");
  }
  if (boxes.empty()) throw ContractError("roi_align_3d: no boxes");
  if (samples_per_bin < 1 || out_size[0] < 1 || out_size[1] < 1 || out_size[2] < 1) {
    throw ArgumentError("roi_align_3d: out_size and samples_per_bin must be positive");
  }
  for (const auto& b : boxes) {
    for (int i = 0; i < 3; ++i) {
      if (!(b.size[i] >= 1e-6) || !std::isfinite(b.center[i])) {
        throw ContractError("roi_align_3d: degenerate box");
      }
    }
  }
  const std::int64_t channels = feature.dim(1);
  const Index3 fdims{feature.dim(2), feature.dim(3), feature.dim(4)};
  const std::int64_t fvol = volume_of(fdims);
  const std::int64_t cells = volume_of(out_size);
  const auto r = static_cast<std::int64_t>(boxes.size());

  auto stencils = std::make_shared<std::vector<RoiStencil>>();
  stencils->reserve(boxes.size());
  for (const auto& b : boxes) stencils->push_back(build_stencil(b, fdims, out_size, samples_per_bin));

  const double* fd = feature.data().data() + batch_index * channels * fvol;
  std::vector<double> out(static_cast<std::size_t>(r * channels * cells), 0.0);
  for (std::int64_t k = 0; k < r; ++k) {
    const auto& st = (*stencils)[static_cast<std::size_t>(k)];
    for (std::int64_t c = 0; c < channels; ++c) {
      const double* src = fd + c * fvol;
      double* dst = out.data() + (k * channels + c) * cells;
      for (std::int64_t cell = 0; cell < cells; ++cell) {
        double s = 0.0;
        for (std::size_t t = st.offsets[static_cast<std::size_t>(cell)]; t < st.offsets[static_cast<std::size_t>(cell) + 1]; ++t) {
          s += st.taps[t].weight * src[st.taps[t].index];
        }
        dst[cell] = s;
      }
    }
  }
  return make_result({r, channels, out_size[0], out_size[1], out_size[2]}, std::move(out), {feature},
                     [stencils, channels, fvol, cells, batch_index](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    double* g = p.grad_buffer().data() + batch_index * channels * fvol;
    for (std::size_t k = 0; k < stencils->size(); ++k) {
      const auto& st = (*stencils)[k];
      for (std::int64_t c = 0; c < channels; ++c) {
        double* dst = g + c * fvol;
        const double* go = n.grad.data() + (static_cast<std::int64_t>(k) * channels + c) * cells;
        for (std::int64_t cell = 0; cell < cells; ++cell) {
          const double gc = go[cell];
          if (gc == 0.0) continue;
          for (std::size_t t = st.offsets[static_cast<std::size_t>(cell)]; t < st.offsets[static_cast<std::size_t>(cell) + 1]; ++t) {
            dst[st.taps[t].index] += st.taps[t].weight * gc;
          }
        }
      }
    }
  }, "roi_align_3d");
}

}  // namespace voxelrcnn::ops
