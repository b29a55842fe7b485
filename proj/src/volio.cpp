#include "voxelrcnn/volio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "le_io.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/rng.hpp"

namespace voxelrcnn {

namespace fs = std::filesystem;

const char* met_type_name(ElementType t) {
  switch (t) {
    case ElementType::kInt16: return "MET_SHORT";
    case ElementType::kFloat32: return "MET_FLOAT";
    case ElementType::kUInt8: return "MET_UCHAR";
  }
  return "MET_FLOAT";
}

namespace {

std::size_t element_bytes(ElementType t) {
  switch (t) {
    case ElementType::kInt16: return 2;
    case ElementType::kFloat32: return 4;
    case ElementType::kUInt8: return 1;
  }
  return 4;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_numbers(const std::string& key, const std::string& value,
                                  std::size_t expected) {
  std::istringstream is(value);
  std::vector<double> out;
  std::string tok;
  while (is >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw FormatError("malformed value for key " + key);
    out.push_back(v);
  }
  if (out.size() != expected) {
    throw FormatError("key " + key + " needs " + std::to_string(expected) + " values");
  }
  return out;
}

const std::string& require_key(const std::map<std::string, std::string>& kv,
                               const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("missing key " + key);
  return it->second;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Volume::Volume(Index3 dims, Vec3 spacing, Vec3 origin, ElementType type, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), origin_(origin), type_(type), voxels_(std::move(voxels)) {
  for (int i = 0; i < 3; ++i) {
    if (dims_[i] <= 0) throw ArgumentError("volume dims must be positive");
    if (!(spacing_[i] > 0.0)) throw ArgumentError("volume spacing must be positive");
  }
  if (static_cast<std::int64_t>(voxels_.size()) != volume_of(dims_)) {
    throw ArgumentError("volume voxel count does not match dims");
  }
}

Volume Volume::filled(Index3 dims, Vec3 spacing, Vec3 origin, ElementType type, float value) {
  return Volume(dims, spacing, origin, type,
                std::vector<float>(static_cast<std::size_t>(volume_of(dims)), value));
}

Vec3 Volume::index_to_world(const Vec3& index) const {
  Vec3 w;
  for (int i = 0; i < 3; ++i) w[i] = origin_[i] + index[i] * spacing_[i];
  return w;
}

Vec3 Volume::world_to_index(const Vec3& world) const {
  Vec3 idx;
  for (int i = 0; i < 3; ++i) idx[i] = (world[i] - origin_[i]) / spacing_[i];
  return idx;
}

Volume Volume::with_voxels(std::vector<float> voxels, ElementType type) const {
  return Volume(dims_, spacing_, origin_, type, std::move(voxels));
}

Volume read_mhd(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open MetaImage header: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed header line: " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  if (auto it = kv.find("ObjectType"); it != kv.end() && it->second != "Image") {
    throw FormatError("malformed value for key ObjectType: " + it->second);
  }
  const auto ndims = parse_numbers("NDims", require_key(kv, "NDims"), 1);
  if (ndims[0] != 3.0) throw FormatError("malformed value for key NDims: only 3D volumes are supported");
  if (auto it = kv.find("CompressedData"); it != kv.end() && it->second != "False") {
    throw FormatError("malformed value for key CompressedData: compressed raw is unsupported");
  }
  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"}) {
    if (auto it = kv.find(key); it != kv.end() && it->second != "False") {
      throw FormatError(std::string("malformed value for key ") + key + ": big-endian payload unsupported");
    }
  }
  if (auto it = kv.find("TransformMatrix"); it != kv.end()) {
    const auto m = parse_numbers("TransformMatrix", it->second, 9);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        if (std::abs(m[static_cast<std::size_t>(r * 3 + c)] - (r == c ? 1.0 : 0.0)) > 1e-6) {
          throw FormatError("malformed value for key TransformMatrix: only axis-aligned volumes are supported");
        }
      }
    }
  }

  const auto dims_xyz = parse_numbers("DimSize", require_key(kv, "DimSize"), 3);
  const auto spacing_xyz = parse_numbers("ElementSpacing", require_key(kv, "ElementSpacing"), 3);
  std::string offset_key = "Offset";
  if (!kv.count("Offset")) {
    for (const char* alias : {"Origin", "Position"}) {
      if (kv.count(alias)) offset_key = alias;
    }
  }
  const auto origin_xyz = parse_numbers("Offset", require_key(kv, offset_key), 3);

  Index3 dims;
  Vec3 spacing, origin;
  for (int i = 0; i < 3; ++i) {
    const double d = dims_xyz[static_cast<std::size_t>(2 - i)];
    if (d < 1.0 || d != std::floor(d)) throw FormatError("malformed value for key DimSize");
    dims[i] = static_cast<std::int64_t>(d);
    spacing[i] = spacing_xyz[static_cast<std::size_t>(2 - i)];
    if (!(spacing[i] > 0.0)) throw FormatError("malformed value for key ElementSpacing: must be positive");
    origin[i] = origin_xyz[static_cast<std::size_t>(2 - i)];
  }

  const std::string& etype = require_key(kv, "ElementType");
  ElementType type;
  if (etype == "MET_SHORT") type = ElementType::kInt16;
  else if (etype == "MET_FLOAT") type = ElementType::kFloat32;
  else if (etype == "MET_UCHAR") type = ElementType::kUInt8;
  else throw FormatError("malformed value for key ElementType: " + etype);

  const std::string& data_file = require_key(kv, "ElementDataFile");
  if (data_file == "LOCAL") throw FormatError("malformed value for key ElementDataFile: LOCAL is unsupported");
  const fs::path raw_path = fs::path(data_file).is_absolute() ? fs::path(data_file)
                                                              : path.parent_path() / data_file;
  std::error_code ec;
  const auto bytes = fs::file_size(raw_path, ec);
  if (ec) throw IoError("cannot open raw payload: " + raw_path.string());
  const auto count = static_cast<std::uintmax_t>(volume_of(dims));
  if (bytes != count * element_bytes(type)) {
    throw TruncationError("raw payload " + raw_path.string() + " has " + std::to_string(bytes) +
                          " bytes, DimSize needs " + std::to_string(count * element_bytes(type)));
  }
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw IoError("cannot open raw payload: " + raw_path.string());
  std::vector<char> payload(static_cast<std::size_t>(bytes));
  if (!raw.read(payload.data(), static_cast<std::streamsize>(payload.size()))) {
    throw TruncationError("short read on raw payload: " + raw_path.string());
  }
  std::vector<float> voxels(static_cast<std::size_t>(count));
  const std::size_t eb = element_bytes(type);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const char* src = payload.data() + i * eb;
    switch (type) {
      case ElementType::kInt16: voxels[i] = static_cast<float>(detail::decode_le<std::int16_t>(src)); break;
      case ElementType::kFloat32: voxels[i] = detail::decode_le<float>(src); break;
      case ElementType::kUInt8: voxels[i] = static_cast<float>(static_cast<unsigned char>(*src)); break;
    }
  }
  return Volume(dims, spacing, origin, type, std::move(voxels));
}

void write_mhd(const Volume& v, const fs::path& path) {
  fs::path raw_path = path;
  raw_path.replace_extension(".raw");
  {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write MetaImage header: " + path.string());
    const auto& d = v.dims();
    const auto& s = v.spacing();
    const auto& o = v.origin();
    os << "ObjectType = Image\n"
       << "NDims = 3\n"
       << "BinaryData = True\n"
       << "BinaryDataByteOrderMSB = False\n"
       << "CompressedData = False\n"
       << "TransformMatrix = 1 0 0 0 1 0 0 0 1\n"
       << "Offset = " << format_double(o[2]) << ' ' << format_double(o[1]) << ' '
       << format_double(o[0]) << '\n'
       << "ElementSpacing = " << format_double(s[2]) << ' ' << format_double(s[1]) << ' '
       << format_double(s[0]) << '\n'
       << "DimSize = " << d[2] << ' ' << d[1] << ' ' << d[0] << '\n'
       << "ElementType = " << met_type_name(v.element_type()) << '\n'
       << "ElementDataFile = " << raw_path.filename().string() << '\n';
    if (!os) throw IoError("failed writing header: " + path.string());
  }
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  if (!raw) throw IoError("cannot write raw payload: " + raw_path.string());
  for (float x : v.voxels()) {
    switch (v.element_type()) {
      case ElementType::kInt16:
        detail::put_le<std::int16_t>(raw, static_cast<std::int16_t>(std::lround(std::clamp(x, -32768.f, 32767.f))));
        break;
      case ElementType::kFloat32: detail::put_le<float>(raw, x); break;
      case ElementType::kUInt8:
        detail::put_le<std::uint8_t>(raw, static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.f, 255.f))));
        break;
    }
  }
  if (!raw) throw IoError("failed writing raw payload: " + raw_path.string());
}

namespace {

// `outside` unset: every sample clamps to the nearest edge voxel.
Volume sample_grid(const Volume& v, const Index3& dims, const Vec3& spacing, const Vec3& origin,
                   Interpolation interp, std::optional<float> outside) {
  std::vector<float> out(static_cast<std::size_t>(volume_of(dims)));
  const auto& sd = v.dims();
  // Per-axis source coordinate of every output index.
  std::array<std::vector<double>, 3> src;
  for (int a = 0; a < 3; ++a) {
    src[a].resize(static_cast<std::size_t>(dims[a]));
    for (std::int64_t j = 0; j < dims[a]; ++j) {
      src[a][static_cast<std::size_t>(j)] = (origin[a] + j * spacing[a] - v.origin()[a]) / v.spacing()[a];
    }
  }
  // Half a voxel of tolerance past the edge samples are clamped; further out is `outside`.
  auto axis_ok = [&](int a, double c) {
    return !outside || (c >= -0.5 && c <= static_cast<double>(sd[a]) - 0.5);
  };
  std::size_t k = 0;
  for (std::int64_t z = 0; z < dims[0]; ++z) {
    const double cz = src[0][static_cast<std::size_t>(z)];
    for (std::int64_t y = 0; y < dims[1]; ++y) {
      const double cy = src[1][static_cast<std::size_t>(y)];
      for (std::int64_t x = 0; x < dims[2]; ++x, ++k) {
        const double cx = src[2][static_cast<std::size_t>(x)];
        if (!axis_ok(0, cz) || !axis_ok(1, cy) || !axis_ok(2, cx)) {
          out[k] = *outside;
          continue;
        }
        if (interp == Interpolation::kNearest) {
          auto nearest = [&](double c, int a) {
            return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(c + 0.5)), 0, sd[a] - 1);
          };
          out[k] = v.at(nearest(cz, 0), nearest(cy, 1), nearest(cx, 2));
          continue;
        }
        std::int64_t i0[3], i1[3];
        double f[3];
        const double c[3] = {cz, cy, cx};
        for (int a = 0; a < 3; ++a) {
          const double cc = std::clamp(c[a], 0.0, static_cast<double>(sd[a] - 1));
          i0[a] = static_cast<std::int64_t>(std::floor(cc));
          i1[a] = std::min(i0[a] + 1, sd[a] - 1);
          f[a] = cc - static_cast<double>(i0[a]);
        }
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz) {
          const double wz = dz ? f[0] : 1.0 - f[0];
          if (wz == 0.0) continue;
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? f[1] : 1.0 - f[1];
            if (wy == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const double wx = dx ? f[2] : 1.0 - f[2];
              if (wx == 0.0) continue;
              acc += wz * wy * wx * v.at(dz ? i1[0] : i0[0], dy ? i1[1] : i0[1], dx ? i1[2] : i0[2]);
            }
          }
        }
        out[k] = static_cast<float>(acc);
      }
    }
  }
  const ElementType type = interp == Interpolation::kNearest ? v.element_type() : ElementType::kFloat32;
  return Volume(dims, spacing, origin, type, std::move(out));
}

}  // namespace

Volume resample_to_grid(const Volume& v, const Index3& dims, const Vec3& spacing,
                        const Vec3& origin, Interpolation interp, float outside) {
  return sample_grid(v, dims, spacing, origin, interp, outside);
}

Volume resample(const Volume& v, const Vec3& target_spacing, Interpolation interp) {
  for (int i = 0; i < 3; ++i) {
    if (!(target_spacing[i] > 0.0)) throw ArgumentError("resample: target spacing must be positive");
  }
  if (target_spacing == v.spacing()) return v;
  Index3 dims;
  for (int i = 0; i < 3; ++i) {
    dims[i] = std::max<std::int64_t>(
        1, std::llround(static_cast<double>(v.dims()[i]) * v.spacing()[i] / target_spacing[i]));
  }
  return sample_grid(v, dims, target_spacing, v.origin(), interp, std::nullopt);
}

std::vector<Annotation> read_annotations(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open annotations: " + path.string());
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line_no == 1) continue;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (fields.size() != 5) throw ParseError("expected 5 fields", line_no);
    double vals[4];
    for (int i = 0; i < 4; ++i) {
      const std::string& tok = fields[static_cast<std::size_t>(i + 1)];
      char* end = nullptr;
      vals[i] = std::strtod(tok.c_str(), &end);
      if (tok.empty() || *end != '\0' || !std::isfinite(vals[i])) {
        throw ParseError("non-numeric field '" + tok + "'", line_no);
      }
    }
    if (!(vals[3] > 0.0)) throw ParseError("diameter must be positive", line_no);
    out.push_back({fields[0], {vals[2], vals[1], vals[0]}, vals[3]});
  }
  return out;
}

void write_annotations(const std::vector<Annotation>& annos, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write annotations: " + path.string());
  os << "seriesuid,coordX,coordY,coordZ,diameter_mm\n";
  for (const auto& a : annos) {
    os << a.scan_id << ',' << format_double(a.center_world[2]) << ','
       << format_double(a.center_world[1]) << ',' << format_double(a.center_world[0]) << ','
       << format_double(a.diameter_mm) << '\n';
  }
}

std::vector<float> crop_values(const Volume& v, const Index3& offset, const Index3& dims, float pad) {
  std::vector<float> out(static_cast<std::size_t>(volume_of(dims)), pad);
  const auto& vd = v.dims();
  for (std::int64_t z = 0; z < dims[0]; ++z) {
    const std::int64_t sz = offset[0] + z;
    if (sz < 0 || sz >= vd[0]) continue;
    for (std::int64_t y = 0; y < dims[1]; ++y) {
      const std::int64_t sy = offset[1] + y;
      if (sy < 0 || sy >= vd[1]) continue;
      const std::int64_t x0 = std::max<std::int64_t>(0, -offset[2]);
      const std::int64_t x1 = std::min<std::int64_t>(dims[2], vd[2] - offset[2]);
      if (x1 <= x0) continue;
      const float* src = v.voxels().data() + v.index(sz, sy, offset[2] + x0);
      std::copy(src, src + (x1 - x0), out.begin() + (z * dims[1] + y) * dims[2] + x0);
    }
  }
  return out;
}

Patch normalized_crop(const Volume& v, const Index3& offset, const Index3& dims, double hu_min,
                      double hu_max) {
  Patch p;
  p.dims = dims;
  p.offset_voxel = offset;
  const std::int64_t total = volume_of(dims);
  p.data.assign(static_cast<std::size_t>(total), 0.0);
  std::vector<bool> inside(static_cast<std::size_t>(total), false);
  const auto& vd = v.dims();
  double sum = 0.0;
  std::int64_t n_in = 0;
  std::size_t k = 0;
  for (std::int64_t z = 0; z < dims[0]; ++z) {
    for (std::int64_t y = 0; y < dims[1]; ++y) {
      for (std::int64_t x = 0; x < dims[2]; ++x, ++k) {
        const std::int64_t sz = offset[0] + z, sy = offset[1] + y, sx = offset[2] + x;
        if (sz < 0 || sy < 0 || sx < 0 || sz >= vd[0] || sy >= vd[1] || sx >= vd[2]) continue;
        const double val = std::clamp(static_cast<double>(v.at(sz, sy, sx)), hu_min, hu_max);
        p.data[k] = val;
        inside[k] = true;
        sum += val;
        ++n_in;
      }
    }
  }
  if (n_in == 0) return p;
  const double mu = sum / static_cast<double>(n_in);
  double ss = 0.0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    if (inside[i]) ss += (p.data[i] - mu) * (p.data[i] - mu);
  }
  // Padding sits at exactly 0, so the in-bounds part is scaled such that the
  // whole crop (padding included) has unit variance.
  const double var_total = ss / static_cast<double>(total);
  const double inv = var_total > 0.0 ? 1.0 / std::sqrt(var_total) : 0.0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    p.data[i] = inside[i] ? (p.data[i] - mu) * inv : 0.0;
  }
  return p;
}

namespace {

bool patch_holds(const Index3& offset, std::int64_t size, const Vec3& box_point) {
  for (int a = 0; a < 3; ++a) {
    const double c = box_point[a];
    if (c < static_cast<double>(offset[a]) || c >= static_cast<double>(offset[a] + size)) return false;
  }
  return true;
}

}  // namespace

std::vector<Patch> extract_patches(const Volume& v, const std::vector<Annotation>& annos,
                                   const PatchConfig& cfg) {
  for (int a = 0; a < 3; ++a) {
    if (std::abs(v.spacing()[a] - cfg.expected_spacing_mm) > 1e-6) {
      throw ContractError("extract_patches: volume must be resampled to " +
                          std::to_string(cfg.expected_spacing_mm) + " mm first");
    }
  }
  Rng rng(cfg.seed, 0x70a7c4);
  const std::int64_t p = cfg.size;
  const Index3 dims{p, p, p};
  // Annotation centres in box coordinates (voxel i spans [i, i + 1)).
  std::vector<Vec3> centers;
  for (const auto& a : annos) {
    Vec3 c = v.world_to_index(a.center_world);
    for (auto& x : c) x += 0.5;
    centers.push_back(c);
  }
  std::vector<Patch> out;
  for (const auto& c : centers) {
    for (int i = 0; i < cfg.positives_per_annotation; ++i) {
      Index3 off;
      for (int a = 0; a < 3; ++a) {
        const auto jitter = rng.uniform_int(-cfg.jitter_voxels, cfg.jitter_voxels);
        off[a] = static_cast<std::int64_t>(std::floor(c[a])) - p / 2 + jitter;
        // Keep the centre inside the crop whatever the jitter.
        off[a] = std::clamp(off[a], static_cast<std::int64_t>(std::floor(c[a])) - p + 1,
                            static_cast<std::int64_t>(std::floor(c[a])));
      }
      Patch patch = normalized_crop(v, off, dims, cfg.hu_min, cfg.hu_max);
      patch.label = PatchLabel::kPositive;
      out.push_back(std::move(patch));
    }
  }
  const auto& vd = v.dims();
  for (int i = 0; i < cfg.negatives; ++i) {
    for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
      Index3 off;
      for (int a = 0; a < 3; ++a) {
        off[a] = vd[a] >= p ? rng.uniform_int(0, vd[a] - p) : rng.uniform_int(vd[a] - p, 0);
      }
      const bool clean = std::none_of(centers.begin(), centers.end(),
                                      [&](const Vec3& c) { return patch_holds(off, p, c); });
      if (!clean) continue;
      Patch patch = normalized_crop(v, off, dims, cfg.hu_min, cfg.hu_max);
      patch.label = PatchLabel::kNegative;
      out.push_back(std::move(patch));
      break;
    }
  }
  return out;
}

}  // namespace voxelrcnn
