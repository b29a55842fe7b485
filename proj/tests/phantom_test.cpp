#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/phantom.hpp"

namespace voxelrcnn {
namespace {

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  s.n_volumes = 3;
  s.volume_dims = {48, 56, 64};
  s.radius_min_mm = 2.0;
  s.radius_max_mm = 4.0;
  s.nodules_min = 1;
  s.nodules_max = 3;
  return s;
}

TEST(Phantom, SameSeedIsBitIdentical) {
  const auto a = generate(small_spec(5));
  const auto b = generate(small_spec(5));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].scan.voxels(), b[i].scan.voxels());
    EXPECT_EQ(a[i].mask.voxels(), b[i].mask.voxels());
    ASSERT_EQ(a[i].annotations.size(), b[i].annotations.size());
  }
  EXPECT_NE(generate(small_spec(6))[0].scan.voxels(), a[0].scan.voxels());
}

TEST(Phantom, CasesAreIndependentOfGenerationOrder) {
  const auto all = generate(small_spec(9));
  const PhantomCase c2 = generate_case(small_spec(9), 2);
  EXPECT_EQ(c2.scan.voxels(), all[2].scan.voxels());
  EXPECT_EQ(c2.scan_id, all[2].scan_id);
}

TEST(Phantom, ZeroNodulesGiveEmptyAnnotationsAndMask) {
  auto s = small_spec(1);
  s.nodules_min = s.nodules_max = 0;
  for (const auto& c : generate(s)) {
    EXPECT_TRUE(c.annotations.empty());
    for (float v : c.mask.voxels()) EXPECT_EQ(v, 0.f);
  }
}

TEST(Phantom, SphereVolumeMatchesAnalytic) {
  PhantomSpec s;
  s.volume_dims = {40, 40, 40};
  s.nodules_min = s.nodules_max = 1;
  s.radius_min_mm = s.radius_max_mm = 4.0;
  s.max_axis_ratio = 1.0;
  const auto c = generate_case(s, 0);
  double count = 0;
  for (float v : c.mask.voxels()) count += v;
  const double analytic = 4.0 / 3.0 * std::numbers::pi * 8.0 * 8.0 * 8.0;
  EXPECT_NEAR(count, analytic, 0.1 * analytic);
}

TEST(Phantom, EllipsoidVolumesAndCentresInsideMask) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto s = small_spec(seed);
    s.distractors_min = s.distractors_max = 0;
    for (const auto& c : generate(s)) {
      ASSERT_EQ(c.annotations.size(), c.nodules.size());
      std::int64_t total = 0;
      for (float v : c.mask.voxels()) total += v > 0;
      double expected = 0.0;
      for (const auto& n : c.nodules) {
        // Per-nodule count over its own bounding region.
        std::int64_t own = 0;
        const auto& d = c.mask.dims();
        for (std::int64_t z = 0; z < d[0]; ++z)
          for (std::int64_t y = 0; y < d[1]; ++y)
            for (std::int64_t x = 0; x < d[2]; ++x) {
              double q = 0.0;
              const Vec3 p{double(z), double(y), double(x)};
              for (int i = 0; i < 3; ++i) {
                const double u = (p[i] - n.center_index[i]) * 0.5 / n.semi_axes_mm[i];
                q += u * u;
              }
              own += q <= 1.0;
            }
        const double analytic = 4.0 / 3.0 * std::numbers::pi * std::pow(n.radius_mm / 0.5, 3);
        EXPECT_NEAR(static_cast<double>(own), analytic, 0.1 * analytic);
        expected += static_cast<double>(own);
        const double ratio = std::max({n.semi_axes_mm[0], n.semi_axes_mm[1], n.semi_axes_mm[2]}) /
                             std::min({n.semi_axes_mm[0], n.semi_axes_mm[1], n.semi_axes_mm[2]});
        EXPECT_LE(ratio, 1.5 + 1e-12);
        EXPECT_NEAR(n.semi_axes_mm[0] * n.semi_axes_mm[1] * n.semi_axes_mm[2], std::pow(n.radius_mm, 3), 1e-9);
      }
      // Non-overlapping: the mask is exactly the disjoint union.
      EXPECT_EQ(static_cast<double>(total), expected);
      for (const auto& a : c.annotations) {
        const Vec3 idx = c.mask.world_to_index(a.center_world);
        EXPECT_EQ(c.mask.at(std::llround(idx[0]), std::llround(idx[1]), std::llround(idx[2])), 1.f);
        EXPECT_EQ(a.scan_id, c.scan_id);
        EXPECT_GT(a.diameter_mm, 0.0);
      }
    }
  }
}

TEST(Phantom, DistractorsAreNotInMask) {
  auto s = small_spec(3);
  s.nodules_min = s.nodules_max = 0;
  s.distractors_min = s.distractors_max = 3;
  s.noise_sigma_hu = 0.0;
  const auto c = generate_case(s, 0);
  std::int64_t bright = 0;
  for (float v : c.scan.voxels()) bright += v > -400.f;
  EXPECT_GT(bright, 0);
  for (float v : c.mask.voxels()) EXPECT_EQ(v, 0.f);
}

TEST(Phantom, OvercrowdedVolumeRaisesPlacementError) {
  PhantomSpec s;
  s.volume_dims = {24, 24, 24};
  s.nodules_min = s.nodules_max = 10;
  s.radius_min_mm = s.radius_max_mm = 4.0;
  EXPECT_THROW(generate_case(s, 0), PlacementError);
  s.nodules_min = s.nodules_max = 1;
  s.radius_min_mm = s.radius_max_mm = 8.0;
  EXPECT_THROW(generate_case(s, 0), PlacementError);
}

TEST(Phantom, InvalidSpecRejected) {
  PhantomSpec s;
  s.radius_max_mm = 25.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = PhantomSpec{};
  s.max_axis_ratio = 2.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Phantom, DatasetLayoutRoundTrips) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "voxelrcnn_phantom_layout";
  fs::remove_all(dir);
  auto s = small_spec(4);
  s.n_volumes = 2;
  const auto cases = generate(s);
  write_dataset(cases, dir);
  std::size_t n_annos = 0;
  for (const auto& c : cases) {
    const Volume scan = read_mhd(dir / "scans" / (c.scan_id + ".mhd"));
    const Volume mask = read_mhd(dir / "masks" / (c.scan_id + ".mhd"));
    EXPECT_EQ(scan.voxels(), c.scan.voxels());
    EXPECT_EQ(mask.voxels(), c.mask.voxels());
    EXPECT_EQ(mask.element_type(), ElementType::kUInt8);
    n_annos += c.annotations.size();
  }
  EXPECT_EQ(read_annotations(dir / "annotations.csv").size(), n_annos);
  fs::remove_all(dir);
}

}  // namespace
TEST(Phantom, SpecKeyValuesRoundTrip) {
  PhantomSpec s;
  s.seed = 99;
  s.n_volumes = 4;
  s.volume_dims = {64, 80, 96};
  s.spacing_mm = {0.5, 0.6, 0.7};
  s.radius_max_mm = 5.25;
  KeyValues kv;
  s.to_keyvalues(kv);
  const PhantomSpec t = PhantomSpec::from_keyvalues(kv);
  EXPECT_EQ(t.seed, 99u);
  EXPECT_EQ(t.n_volumes, 4);
  EXPECT_EQ(t.volume_dims, s.volume_dims);
  EXPECT_EQ(t.spacing_mm, s.spacing_mm);
  EXPECT_EQ(t.radius_max_mm, 5.25);
  EXPECT_TRUE(kv.unknown_keys(PhantomSpec::keys()).empty());
  kv.set("phantom.volume_dims", std::string("64,80"));
  EXPECT_THROW(PhantomSpec::from_keyvalues(kv), ConfigError);
  kv.set("phantom.volume_dims", std::string("64, 80, 16"));
  EXPECT_EQ(PhantomSpec::from_keyvalues(kv).volume_dims, (Index3{64, 80, 16}));
}

}  // namespace voxelrcnn
