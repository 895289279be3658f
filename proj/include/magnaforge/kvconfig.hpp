#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace magnaforge {

/// Flat `key = value` configuration. `#` starts a comment; blank lines are ignored.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  std::string dump() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  int get(const std::string& key, int fallback) const;
  long long get(const std::string& key, long long fallback) const;
  bool get(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void set(const std::string& key, const char* value) { entries_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, int value) { entries_[key] = std::to_string(value); }
  void set(const std::string& key, long long value) { entries_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { entries_[key] = value ? "true" : "false"; }

  /// Later values win.
  void merge(const KeyValues& overlay);

  std::vector<std::string> unknown_keys(const std::set<std::string>& known) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

/// Shortest round-trip text for a double.
std::string format_double(double value);

}  // namespace magnaforge
