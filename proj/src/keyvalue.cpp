#include "voxelrcnn/keyvalue.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValues::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void KeyValues::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  out << dump();
  if (!out) throw IoError("cannot write " + path.string());
}

void KeyValues::set(const std::string& key, double value) { values_[key] = format_double(value); }
void KeyValues::set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }

void KeyValues::get(const std::string& key, std::string& out) const {
  if (auto it = values_.find(key); it != values_.end()) out = it->second;
}

void KeyValues::get(const std::string& key, double& out) const {
  if (auto it = values_.find(key); it != values_.end()) out = parse_number<double>(key, it->second);
}

void KeyValues::get(const std::string& key, std::int64_t& out) const {
  if (auto it = values_.find(key); it != values_.end()) out = parse_number<std::int64_t>(key, it->second);
}

void KeyValues::get(const std::string& key, int& out) const {
  if (auto it = values_.find(key); it != values_.end()) out = parse_number<int>(key, it->second);
}

void KeyValues::get(const std::string& key, std::uint64_t& out) const {
  if (auto it = values_.find(key); it != values_.end()) out = parse_number<std::uint64_t>(key, it->second);
}

void KeyValues::get(const std::string& key, bool& out) const {
  auto it = values_.find(key);
  if (it == values_.end()) return;
  if (it->second == "true" || it->second == "1") out = true;
  else if (it->second == "false" || it->second == "0") out = false;
  else throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
}

std::vector<std::string> KeyValues::unknown_keys(const std::vector<std::string>& known) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
  }
  return out;
}

void KeyValues::merge(const KeyValues& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

}  // namespace voxelrcnn
