#pragma once

#include <array>
#include <cstdint>

namespace voxelrcnn {

// All triples are (z, y, x).
using Vec3 = std::array<double, 3>;
using Index3 = std::array<std::int64_t, 3>;

inline std::int64_t volume_of(const Index3& d) { return d[0] * d[1] * d[2]; }

}  // namespace voxelrcnn
