#include "voxelrcnn/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "le_io.hpp"

namespace voxelrcnn {

using detail::get_le;
using detail::put_le;

void save_checkpoint(const std::filesystem::path& path, const ParameterList& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  put_le<std::uint32_t>(os, kCheckpointMagic);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.data()) put_le<double>(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

ParameterList read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  if (get_le<std::uint32_t>(is) != kCheckpointMagic) {
    throw FormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is);
  ParameterList out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(is);
    if (len > 4096) throw FormatError("checkpoint: implausible parameter name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw TruncationError("checkpoint truncated in name");
    const auto rank = get_le<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(get_le<std::uint64_t>(is));
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = get_le<double>(is);
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, ParameterList& params) {
  auto stored = read_checkpoint(path);
  std::set<std::string> used;
  for (auto& p : params) {
    auto it = std::find_if(stored.begin(), stored.end(),
                           [&](const Parameter& s) { return s.name == p.name; });
    if (it == stored.end()) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (it->tensor.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint shape mismatch for '" + p.name + "': " +
                        shape_str(it->tensor.shape()) + " vs " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    auto src = it->tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
    used.insert(p.name);
  }
  if (used.size() != stored.size()) {
    throw FormatError("checkpoint has parameters the model does not define");
  }
}

}  // namespace voxelrcnn
