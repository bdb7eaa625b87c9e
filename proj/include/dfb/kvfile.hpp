#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace dfb {

/// Flat "key=value" text: one pair per line, '#' starts a comment line, blank
/// lines ignored. Getters consume keys so leftovers can be rejected as unknown.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "config");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.contains(key); }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::string require_string(const std::string& key);
  double get_double(const std::string& key, double fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  std::size_t require_size(const std::string& key);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback);
  std::vector<std::size_t> get_sizes(const std::string& key, std::vector<std::size_t> fallback);

  /// Throws naming the first key no getter asked for.
  void reject_unknown() const;

 private:
  std::optional<std::string> take(const std::string& key);
  [[noreturn]] void fail(const std::string& key, const std::string& value, const char* what) const;

  std::string source_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::size_t> lines_;
  std::set<std::string> used_;
};

/// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

template <typename V>
std::string join_list(const std::vector<V>& values);

}  // namespace dfb
