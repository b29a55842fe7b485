#include "voxelrcnn/candidate.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/keyvalue.hpp"

namespace voxelrcnn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::int64_t Candidate::mask_count() const {
  return std::accumulate(mask.begin(), mask.end(), std::int64_t{0},
                         [](std::int64_t acc, std::uint8_t v) { return acc + (v ? 1 : 0); });
}

void write_candidates_csv(const std::vector<Candidate>& cands, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write candidates: " + path.string());
  os << "seriesuid,coordX,coordY,coordZ,probability,d_mm,volume_mm3\n";
  for (const auto& c : cands) {
    os << c.scan_id << ',' << format_double(c.center_world[2]) << ',' << format_double(c.center_world[1])
       << ',' << format_double(c.center_world[0]) << ',' << format_double(c.score) << ','
       << format_double(c.diameter_mm()) << ',' << format_double(c.mask_volume_mm3) << '\n';
  }
  if (!os) throw IoError("cannot write candidates: " + path.string());
}

std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open candidates: " + path.string());
  std::vector<Candidate> out;
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
    if (fields.size() != 5 && fields.size() != 7) throw ParseError("expected 5 or 7 fields", line_no);
    std::vector<double> vals;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      char* end = nullptr;
      const double v = std::strtod(fields[i].c_str(), &end);
      if (fields[i].empty() || *end != '\0' || !std::isfinite(v)) {
        throw ParseError("non-numeric field '" + fields[i] + "'", line_no);
      }
      vals.push_back(v);
    }
    Candidate c;
    c.scan_id = fields[0];
    c.center_world = {vals[2], vals[1], vals[0]};
    c.score = vals[3];
    if (vals.size() == 6) {
      c.size_world = {vals[4], vals[4], vals[4]};
      c.mask_volume_mm3 = vals[5];
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace voxelrcnn
