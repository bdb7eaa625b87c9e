#include "dfb/kvfile.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dfb/tensor.hpp"

namespace dfb {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(const std::string& s, N& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && !s.empty();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(source + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw Error(source + ":" + std::to_string(lineno) + ": empty key");
    if (kv.values_.contains(key)) {
      throw Error(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv.values_[key] = value;
    kv.lines_[key] = lineno;
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::string> KeyValues::take(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  used_.insert(key);
  return it->second;
}

void KeyValues::fail(const std::string& key, const std::string& value, const char* what) const {
  auto it = lines_.find(key);
  const std::string where = it == lines_.end() ? source_ : source_ + ":" + std::to_string(it->second);
  throw Error(where + ": key '" + key + "': cannot parse '" + value + "' as " + what);
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) {
  auto v = take(key);
  return v ? *v : fallback;
}

std::string KeyValues::require_string(const std::string& key) {
  auto v = take(key);
  if (!v) throw Error(source_ + ": missing required key '" + key + "'");
  return *v;
}

double KeyValues::get_double(const std::string& key, double fallback) {
  auto v = take(key);
  if (!v) return fallback;
  double out = 0;
  if (!parse_number(*v, out)) fail(key, *v, "a number");
  return out;
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::size_t out = 0;
  if (!parse_number(*v, out)) fail(key, *v, "a non-negative integer");
  return out;
}

std::size_t KeyValues::require_size(const std::string& key) {
  if (!values_.contains(key)) throw Error(source_ + ": missing required key '" + key + "'");
  return get_size(key, 0);
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  if (!parse_number(*v, out)) fail(key, *v, "an unsigned 64-bit integer");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) {
  auto v = take(key);
  if (!v) return fallback;
  if (*v == "1" || *v == "true") return true;
  if (*v == "0" || *v == "false") return false;
  fail(key, *v, "a boolean (0/1/true/false)");
}

std::vector<double> KeyValues::get_doubles(const std::string& key, std::vector<double> fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::vector<double> out;
  if (v->empty()) return out;
  for (const auto& item : split_commas(*v)) {
    double d = 0;
    if (!parse_number(item, d)) fail(key, *v, "a comma-separated list of numbers");
    out.push_back(d);
  }
  return out;
}

std::vector<std::size_t> KeyValues::get_sizes(const std::string& key, std::vector<std::size_t> fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::vector<std::size_t> out;
  if (v->empty()) return out;
  for (const auto& item : split_commas(*v)) {
    std::size_t d = 0;
    if (!parse_number(item, d)) fail(key, *v, "a comma-separated list of non-negative integers");
    out.push_back(d);
  }
  return out;
}

void KeyValues::reject_unknown() const {
  for (const auto& [key, value] : values_) {
    if (!used_.contains(key)) {
      throw Error(source_ + ":" + std::to_string(lines_.at(key)) + ": unknown key '" + key + "'");
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("cannot format number");
  return std::string(buf, ptr);
}

template <typename V>
std::string join_list(const std::vector<V>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<V>) out += format_double(values[i]);
    else out += std::to_string(values[i]);
  }
  return out;
}

template std::string join_list<double>(const std::vector<double>&);
template std::string join_list<std::size_t>(const std::vector<std::size_t>&);

}  // namespace dfb
