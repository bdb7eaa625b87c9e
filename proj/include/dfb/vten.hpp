#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>

#include "dfb/tensor.hpp"

namespace dfb {

/// VTEN binary container:
///   "VTEN" | version u8 (=1) | dtype u8 (0=f32, 1=f64) | rank u8 |
///   rank x u32 LE extents | row-major LE values.
namespace vten {

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write(std::ostream& os, const Tensor<T>& t);
template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t);

/// Reads whatever dtype the stream holds. `what` names the source in diagnostics.
AnyTensor read_any(std::istream& is, const std::string& what = "stream");
AnyTensor load_any(const std::filesystem::path& path);

/// Reads and converts to T. When `expected` is given, the shape must match.
template <typename T>
Tensor<T> load(const std::filesystem::path& path, const std::optional<Shape>& expected = std::nullopt);

DType dtype_of(const AnyTensor& t);

}  // namespace vten
}  // namespace dfb
