#include "dfb/vten.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace dfb::vten {
namespace {

constexpr std::array<char, 4> kMagic{'V', 'T', 'E', 'N'};
constexpr std::uint8_t kVersion = 1;

template <typename U>
void put_le(std::vector<char>& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
constexpr DType dtype_for() {
  if constexpr (std::is_same_v<T, float>) return DType::kFloat32;
  else return DType::kFloat64;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

void read_exact(std::istream& is, void* dst, std::size_t n, const std::string& what, const char* field) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw Error(what + ": truncated VTEN data while reading " + field + " (wanted " + std::to_string(n) +
                " bytes, got " + std::to_string(is.gcount()) + ")");
  }
}

// Bytes left in a seekable stream, or nullopt.
std::optional<std::uint64_t> remaining(std::istream& is) {
  const auto here = is.tellg();
  if (here < 0) return std::nullopt;
  is.seekg(0, std::ios::end);
  const auto end = is.tellg();
  is.seekg(here);
  if (end < here) return std::nullopt;
  return static_cast<std::uint64_t>(end - here);
}

template <typename T>
Tensor<T> read_values(std::istream& is, Shape shape, const std::string& what) {
  std::uint64_t n = 1;
  for (std::size_t e : shape) {
    if (n > (UINT64_MAX / sizeof(T)) / e) throw Error(what + ": extents overflow the addressable size");
    n *= e;
  }
  if (auto left = remaining(is); left && *left < n * sizeof(T)) {
    throw Error(what + ": truncated VTEN data, header declares " + std::to_string(n * sizeof(T)) +
                " value bytes but only " + std::to_string(*left) + " remain");
  }
  std::vector<unsigned char> raw(n * sizeof(T));
  read_exact(is, raw.data(), raw.size(), what, "values");
  std::vector<T> vals(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = std::bit_cast<T>(get_le<Bits<T>>(raw.data() + i * sizeof(T)));
  return Tensor<T>(std::move(shape), std::move(vals));
}

}  // namespace

template <typename T>
void write(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw Error("VTEN: rank exceeds 255");
  std::vector<char> buf(kMagic.begin(), kMagic.end());
  buf.push_back(static_cast<char>(kVersion));
  buf.push_back(static_cast<char>(dtype_for<T>()));
  buf.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > UINT32_MAX) throw Error("VTEN: extent exceeds 32 bits");
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
  }
  buf.reserve(buf.size() + t.size() * sizeof(T));
  for (T v : t.values()) put_le<Bits<T>>(buf, std::bit_cast<Bits<T>>(v));
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error("VTEN: write failed");
}

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write(os, t);
}

AnyTensor read_any(std::istream& is, const std::string& what) {
  std::array<char, 4> magic{};
  read_exact(is, magic.data(), 4, what, "magic");
  if (magic != kMagic) throw Error(what + ": bad magic, expected \"VTEN\"");
  unsigned char hdr[3];
  read_exact(is, hdr, 3, what, "header");
  if (hdr[0] != kVersion) {
    throw Error(what + ": unsupported VTEN version " + std::to_string(hdr[0]) + " (expected 1)");
  }
  const std::uint8_t dtype = hdr[1];
  if (dtype > 1) throw Error(what + ": unknown dtype byte " + std::to_string(dtype));
  const std::size_t rank = hdr[2];
  if (rank == 0) throw Error(what + ": rank must be at least 1");
  std::vector<unsigned char> ext(rank * 4);
  read_exact(is, ext.data(), ext.size(), what, "extents");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_le<std::uint32_t>(ext.data() + 4 * i);
    if (shape[i] == 0) throw Error(what + ": zero extent on axis " + std::to_string(i));
  }
  if (dtype == 0) return read_values<float>(is, std::move(shape), what);
  return read_values<double>(is, std::move(shape), what);
}

AnyTensor load_any(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_any(is, path.string());
}

template <typename T>
Tensor<T> load(const std::filesystem::path& path, const std::optional<Shape>& expected) {
  AnyTensor any = load_any(path);
  Tensor<T> t = std::visit([](auto& v) { return v.template cast<T>(); }, any);
  if (expected && t.shape() != *expected) {
    if (t.rank() != expected->size()) {
      throw Error(path.string() + ": wrong rank, expected " + std::to_string(expected->size()) + " " +
                  shape_str(*expected) + " but found " + std::to_string(t.rank()) + " " + shape_str(t.shape()));
    }
    throw Error(path.string() + ": extent mismatch, expected " + shape_str(*expected) + " but found " +
                shape_str(t.shape()));
  }
  return t;
}

DType dtype_of(const AnyTensor& t) {
  return std::holds_alternative<Tensor<float>>(t) ? DType::kFloat32 : DType::kFloat64;
}

template void write<float>(std::ostream&, const Tensor<float>&);
template void write<double>(std::ostream&, const Tensor<double>&);
template void save<float>(const std::filesystem::path&, const Tensor<float>&);
template void save<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load<float>(const std::filesystem::path&, const std::optional<Shape>&);
template Tensor<double> load<double>(const std::filesystem::path&, const std::optional<Shape>&);

}  // namespace dfb::vten
