#include "voxelrcnn/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/rng.hpp"

namespace voxelrcnn {

namespace {

constexpr std::uint64_t kPlacementStream = 1, kNoiseStream = 2;

struct Tube {
  Vec3 point{};  // voxel index
  Vec3 dir{};    // unit, in mm space
  double radius_mm = 0.0;
};

Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-3 && n <= 1.0) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

double max_axis(const Nodule& n) {
  return std::max({n.semi_axes_mm[0], n.semi_axes_mm[1], n.semi_axes_mm[2]});
}

// Bounding sphere distance test in mm.
bool too_close(const Nodule& a, const Nodule& b, const Vec3& spacing, double gap_mm) {
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = (a.center_index[i] - b.center_index[i]) * spacing[i];
    d2 += d * d;
  }
  const double need = max_axis(a) + max_axis(b) + gap_mm;
  return d2 < need * need;
}

std::vector<Nodule> place_nodules(const PhantomSpec& spec, Rng& rng) {
  const auto count = static_cast<int>(rng.uniform_int(spec.nodules_min, spec.nodules_max));
  std::vector<Nodule> out;
  for (int k = 0; k < count; ++k) {
    Nodule n;
    n.radius_mm = rng.uniform(spec.radius_min_mm, spec.radius_max_mm);
    Vec3 s{rng.uniform(1.0, spec.max_axis_ratio), rng.uniform(1.0, spec.max_axis_ratio),
           rng.uniform(1.0, spec.max_axis_ratio)};
    const double norm = std::cbrt(s[0] * s[1] * s[2]);
    for (int i = 0; i < 3; ++i) n.semi_axes_mm[i] = n.radius_mm * s[i] / norm;
    n.kind = rng.uniform() < spec.subsolid_fraction ? NoduleKind::kSubsolid : NoduleKind::kSolid;
    bool placed = false;
    for (int t = 0; t < spec.max_placement_tries && !placed; ++t) {
      bool fits = true;
      for (int i = 0; i < 3; ++i) {
        // Continuous index range keeping the whole ellipsoid plus margin inside.
        const double extent = (n.semi_axes_mm[i] + spec.margin_mm) / spec.spacing_mm[i];
        const double lo = extent - 0.5;
        const double hi = static_cast<double>(spec.volume_dims[i]) - 0.5 - extent;
        if (hi <= lo) {
          fits = false;
          break;
        }
        n.center_index[i] = rng.uniform(lo, hi);
      }
      if (!fits) break;
      placed = std::none_of(out.begin(), out.end(), [&](const Nodule& o) {
        return too_close(o, n, spec.spacing_mm, spec.min_gap_mm);
      });
    }
    if (!placed) {
      throw PlacementError("cannot place nodule " + std::to_string(k + 1) + " of " +
                           std::to_string(count) + " (radius " + std::to_string(n.radius_mm) +
                           " mm) in volume");
    }
    out.push_back(n);
  }
  return out;
}

template <typename F>
void for_each_in_box(const Index3& dims, const Vec3& center, const Vec3& half, F&& f) {
  Index3 lo, hi;
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(center[i] - half[i])));
    hi[i] = std::min<std::int64_t>(dims[i] - 1, static_cast<std::int64_t>(std::ceil(center[i] + half[i])));
  }
  for (std::int64_t z = lo[0]; z <= hi[0]; ++z)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t x = lo[2]; x <= hi[2]; ++x) f(z, y, x);
}

}  // namespace

void PhantomSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("phantom spec: " + m); };
  if (n_volumes < 0) fail("n_volumes must be >= 0");
  for (int i = 0; i < 3; ++i) {
    if (volume_dims[i] <= 0) fail("volume_dims must be positive");
    if (!(spacing_mm[i] > 0.0)) fail("spacing must be positive");
  }
  if (nodules_min < 0 || nodules_max < nodules_min) fail("bad nodule count range");
  if (distractors_min < 0 || distractors_max < distractors_min) fail("bad distractor count range");
  if (!(radius_min_mm >= 0.5 && radius_max_mm <= 20.0 && radius_min_mm <= radius_max_mm)) {
    fail("nodule radius range must lie within [0.5, 20] mm");
  }
  if (!(max_axis_ratio >= 1.0 && max_axis_ratio <= 1.5)) fail("max_axis_ratio must be in [1, 1.5]");
  if (!(subsolid_fraction >= 0.0 && subsolid_fraction <= 1.0)) fail("subsolid_fraction must be in [0, 1]");
  if (!(tube_radius_min_mm > 0.0 && tube_radius_min_mm <= tube_radius_max_mm)) fail("bad tube radius range");
  if (noise_sigma_hu < 0.0) fail("noise_sigma_hu must be >= 0");
  if (max_placement_tries < 1) fail("max_placement_tries must be >= 1");
}

namespace {

template <typename T>
std::string triple_text(const std::array<T, 3>& t) {
  std::ostringstream os;
  for (int a = 0; a < 3; ++a) {
    if (a) os << ' ';
    if constexpr (std::is_floating_point_v<T>) os << format_double(t[a]);
    else os << t[a];
  }
  return os.str();
}

template <typename T>
void parse_triple(const KeyValues& kv, const std::string& key, std::array<T, 3>& out) {
  if (!kv.has(key)) return;
  std::string text;
  kv.get(key, text);
  for (char& c : text) {
    if (c == ',') c = ' ';
  }
  std::istringstream is(text);
  std::array<T, 3> v{};
  std::string rest;
  if (!(is >> v[0] >> v[1] >> v[2]) || (is >> rest)) {
    throw ConfigError("key " + key + ": expected three numbers, got '" + text + "'");
  }
  out = v;
}

template <typename Visit>
void visit_fields(Visit&& v, PhantomSpec& s) {
  v("seed", s.seed);
  v("n_volumes", s.n_volumes);
  v("nodules_min", s.nodules_min);
  v("nodules_max", s.nodules_max);
  v("radius_min_mm", s.radius_min_mm);
  v("radius_max_mm", s.radius_max_mm);
  v("max_axis_ratio", s.max_axis_ratio);
  v("subsolid_fraction", s.subsolid_fraction);
  v("distractors_min", s.distractors_min);
  v("distractors_max", s.distractors_max);
  v("tube_radius_min_mm", s.tube_radius_min_mm);
  v("tube_radius_max_mm", s.tube_radius_max_mm);
  v("background_hu", s.background_hu);
  v("solid_hu", s.solid_hu);
  v("subsolid_hu", s.subsolid_hu);
  v("tube_hu", s.tube_hu);
  v("noise_sigma_hu", s.noise_sigma_hu);
  v("min_gap_mm", s.min_gap_mm);
  v("margin_mm", s.margin_mm);
  v("max_placement_tries", s.max_placement_tries);
}

}  // namespace

void PhantomSpec::to_keyvalues(KeyValues& kv, const std::string& prefix) const {
  PhantomSpec s = *this;
  visit_fields([&](const std::string& k, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::uint64_t>) kv.set(prefix + k, std::to_string(field));
    else kv.set(prefix + k, field);
  }, s);
  kv.set(prefix + "volume_dims", triple_text(volume_dims));
  kv.set(prefix + "spacing_mm", triple_text(spacing_mm));
}

PhantomSpec PhantomSpec::from_keyvalues(const KeyValues& kv, const std::string& prefix) {
  PhantomSpec s;
  visit_fields([&](const std::string& k, auto& field) { kv.get(prefix + k, field); }, s);
  parse_triple(kv, prefix + "volume_dims", s.volume_dims);
  parse_triple(kv, prefix + "spacing_mm", s.spacing_mm);
  s.validate();
  return s;
}

std::vector<std::string> PhantomSpec::keys(const std::string& prefix) {
  std::vector<std::string> out{prefix + "volume_dims", prefix + "spacing_mm"};
  PhantomSpec s;
  visit_fields([&](const std::string& k, auto&) { out.push_back(prefix + k); }, s);
  return out;
}

std::string phantom_scan_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%04d", index);
  return buf;
}

PhantomCase generate_case(const PhantomSpec& spec, int index) {
  spec.validate();
  const auto stream = static_cast<std::uint64_t>(index) * 4;
  Rng rng(spec.seed, stream + kPlacementStream);
  const Index3 dims = spec.volume_dims;
  const Vec3 sp = spec.spacing_mm;
  const Vec3 origin{-0.5 * static_cast<double>(dims[0]) * sp[0], -0.5 * static_cast<double>(dims[1]) * sp[1],
                    -0.5 * static_cast<double>(dims[2]) * sp[2]};

  PhantomCase pc;
  pc.scan_id = phantom_scan_id(index);
  pc.nodules = place_nodules(spec, rng);

  std::vector<float> hu(static_cast<std::size_t>(volume_of(dims)), static_cast<float>(spec.background_hu));
  std::vector<float> mask(hu.size(), 0.f);
  auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    return static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x);
  };

  const auto n_tubes = rng.uniform_int(spec.distractors_min, spec.distractors_max);
  for (std::int64_t t = 0; t < n_tubes; ++t) {
    Tube tube;
    for (int i = 0; i < 3; ++i) tube.point[i] = rng.uniform(0.0, static_cast<double>(dims[i] - 1));
    tube.dir = random_unit(rng);
    tube.radius_mm = rng.uniform(spec.tube_radius_min_mm, spec.tube_radius_max_mm);
    const float value = static_cast<float>(spec.tube_hu + rng.uniform(-50.0, 50.0));
    for (std::int64_t z = 0; z < dims[0]; ++z)
      for (std::int64_t y = 0; y < dims[1]; ++y)
        for (std::int64_t x = 0; x < dims[2]; ++x) {
          const Vec3 d{(static_cast<double>(z) - tube.point[0]) * sp[0],
                       (static_cast<double>(y) - tube.point[1]) * sp[1],
                       (static_cast<double>(x) - tube.point[2]) * sp[2]};
          const double along = d[0] * tube.dir[0] + d[1] * tube.dir[1] + d[2] * tube.dir[2];
          const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along;
          if (r2 <= tube.radius_mm * tube.radius_mm) hu[at(z, y, x)] = value;
        }
  }

  for (const auto& n : pc.nodules) {
    const double base = n.kind == NoduleKind::kSolid ? spec.solid_hu : spec.subsolid_hu;
    const float value = static_cast<float>(base + rng.uniform(-50.0, 50.0));
    Vec3 half;
    for (int i = 0; i < 3; ++i) half[i] = n.semi_axes_mm[i] / sp[i] + 1.0;
    for_each_in_box(dims, n.center_index, half, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
      const Vec3 p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
      double q = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double u = (p[i] - n.center_index[i]) * sp[i] / n.semi_axes_mm[i];
        q += u * u;
      }
      if (q <= 1.0) {
        hu[at(z, y, x)] = value;
        mask[at(z, y, x)] = 1.f;
      }
    });
  }

  if (spec.noise_sigma_hu > 0.0) {
    Rng noise(spec.seed, stream + kNoiseStream);
    for (auto& v : hu) v += static_cast<float>(spec.noise_sigma_hu * noise.normal());
  }
  for (auto& v : hu) v = std::clamp(std::round(v), -32768.f, 32767.f);

  pc.scan = Volume(dims, sp, origin, ElementType::kInt16, std::move(hu));
  pc.mask = pc.scan.with_voxels(std::move(mask), ElementType::kUInt8);
  for (const auto& n : pc.nodules) {
    pc.annotations.push_back({pc.scan_id, pc.scan.index_to_world(n.center_index), 2.0 * n.radius_mm});
  }
  return pc;
}

std::vector<PhantomCase> generate(const PhantomSpec& spec) {
  spec.validate();
  std::vector<PhantomCase> out;
  out.reserve(static_cast<std::size_t>(spec.n_volumes));
  for (int i = 0; i < spec.n_volumes; ++i) out.push_back(generate_case(spec, i));
  return out;
}

void write_dataset(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "scans", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + dir.string() + ": " + ec.message());
  std::vector<Annotation> all;
  for (const auto& c : cases) {
    write_mhd(c.scan, dir / "scans" / (c.scan_id + ".mhd"));
    write_mhd(c.mask, dir / "masks" / (c.scan_id + ".mhd"));
    all.insert(all.end(), c.annotations.begin(), c.annotations.end());
  }
  write_annotations(all, dir / "annotations.csv");
}

}  // namespace voxelrcnn
