#include "voxelrcnn/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn {

SliceAxis parse_axis(const std::string& s) {
  if (s == "z") return SliceAxis::kZ;
  if (s == "y") return SliceAxis::kY;
  if (s == "x") return SliceAxis::kX;
  throw ArgumentError("axis must be z, y or x, got '" + s + "'");
}

std::vector<std::uint8_t> label_boundary(const std::vector<std::int32_t>& labels, std::int64_t width,
                                         std::int64_t height) {
  std::vector<std::uint8_t> out(labels.size(), 0);
  auto at = [&](std::int64_t r, std::int64_t c) { return labels[static_cast<std::size_t>(r * width + c)]; };
  for (std::int64_t r = 0; r < height; ++r)
    for (std::int64_t c = 0; c < width; ++c) {
      const std::int32_t l = at(r, c);
      if (l == 0) continue;
      const bool edge = r == 0 || c == 0 || r == height - 1 || c == width - 1;
      if (edge || at(r - 1, c) != l || at(r + 1, c) != l || at(r, c - 1) != l || at(r, c + 1) != l) {
        out[static_cast<std::size_t>(r * width + c)] = 1;
      }
    }
  return out;
}

namespace {

std::array<std::uint8_t, 3> colour(std::int32_t label) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette{{
      {255, 0, 0}, {0, 255, 0}, {0, 128, 255}, {255, 255, 0}, {255, 0, 255}, {0, 255, 255}}};
  return kPalette[static_cast<std::size_t>(label - 1) % kPalette.size()];
}

void write_binary(const std::filesystem::path& path, const std::string& header, const std::vector<std::uint8_t>& px) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << header;
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace

SliceImage render_slice(const Volume& scan, const Volume* labels, SliceAxis axis, std::int64_t index,
                        double hu_min, double hu_max) {
  const Index3& d = scan.dims();
  const int ax = static_cast<int>(axis);
  if (index < 0 || index >= d[ax]) {
    throw ArgumentError("slice " + std::to_string(index) + " out of range [0, " + std::to_string(d[ax]) + ")");
  }
  if (labels != nullptr && labels->dims() != d) throw DataError("label volume dims do not match the scan");
  if (!(hu_min < hu_max)) throw ArgumentError("hu_min must be below hu_max");
  const int ra = ax == 0 ? 1 : 0;
  const int ca = ax == 2 ? 1 : 2;
  SliceImage img;
  img.height = d[ra];
  img.width = d[ca];
  const auto n = static_cast<std::size_t>(img.width * img.height);
  img.gray.resize(n);
  std::vector<std::int32_t> lab(n, 0);
  for (std::int64_t r = 0; r < img.height; ++r)
    for (std::int64_t c = 0; c < img.width; ++c) {
      std::int64_t p[3];
      p[ax] = index;
      p[ra] = r;
      p[ca] = c;
      const double v = (scan.at(p[0], p[1], p[2]) - hu_min) / (hu_max - hu_min);
      const auto k = static_cast<std::size_t>(r * img.width + c);
      img.gray[k] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
      if (labels != nullptr) lab[k] = static_cast<std::int32_t>(std::lround(labels->at(p[0], p[1], p[2])));
    }
  const std::vector<std::uint8_t> edge = label_boundary(lab, img.width, img.height);
  img.rgb.resize(3 * n);
  for (std::size_t k = 0; k < n; ++k) {
    if (edge[k]) {
      const auto col = colour(lab[k]);
      std::copy(col.begin(), col.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(3 * k));
      ++img.overlay_pixels;
    } else {
      std::fill_n(img.rgb.begin() + static_cast<std::ptrdiff_t>(3 * k), 3, img.gray[k]);
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const SliceImage& img) {
  write_binary(path, "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.gray);
}

void write_ppm(const std::filesystem::path& path, const SliceImage& img) {
  write_binary(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.rgb);
}

}  // namespace voxelrcnn
