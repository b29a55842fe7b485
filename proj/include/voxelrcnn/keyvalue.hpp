#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace voxelrcnn {

// Flat `key = value` configuration. '#' starts a comment; blank lines are
// ignored. Keys are kept sorted so dumps are byte-stable.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
  std::string dump() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

  // Each getter leaves `out` untouched when the key is absent and throws
  // ConfigError on a malformed value.
  void get(const std::string& key, std::string& out) const;
  void get(const std::string& key, double& out) const;
  void get(const std::string& key, std::int64_t& out) const;
  void get(const std::string& key, int& out) const;
  void get(const std::string& key, std::uint64_t& out) const;
  void get(const std::string& key, bool& out) const;

  // Keys not in `known`; used to reject typos.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;
  const std::map<std::string, std::string>& entries() const { return values_; }
  void merge(const KeyValues& other);

 private:
  std::map<std::string, std::string> values_;
};

// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace voxelrcnn
