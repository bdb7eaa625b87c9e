#include "dfb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dfb {

std::size_t volume(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw Error("tensor shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw Error("zero extent on axis " + std::to_string(i) + " of shape " + shape_str(shape));
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(volume(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  check_shape(shape_);
  if (volume(shape_) != data_.size()) {
    throw Error("shape " + shape_str(shape_) + " holds " + std::to_string(volume(shape_)) +
                " values but " + std::to_string(data_.size()) + " were given");
  }
}

template <typename T>
std::size_t Tensor<T>::offset(std::span<const std::size_t> coord) const {
  if (coord.size() != shape_.size()) {
    throw Error("coordinate rank " + std::to_string(coord.size()) + " does not match tensor rank " +
                std::to_string(shape_.size()));
  }
  std::size_t off = 0;
  for (std::size_t i = 0; i < coord.size(); ++i) {
    if (coord[i] >= shape_[i]) throw Error("coordinate out of range on axis " + std::to_string(i));
    off = off * shape_[i] + coord[i];
  }
  return off;
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (volume(shape) != data_.size()) {
    throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape(), T(0));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape(), T(0));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape(), T(0));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape(), T(0));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape(), T(0));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + s;
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || b.rank() != 1 || (x.rank() != 1 && x.rank() != 2)) {
    throw Error("dense: expected x[B,F] or x[F], W[F,O], b[O]; got " + shape_str(x.shape()) + ", " +
                shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  const std::size_t rows = x.rank() == 2 ? x.extent(0) : 1;
  const std::size_t in = x.rank() == 2 ? x.extent(1) : x.extent(0);
  const std::size_t out_dim = w.extent(1);
  if (w.extent(0) != in || b.extent(0) != out_dim) {
    throw Error("dense: extent mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                shape_str(b.shape()));
  }
  Tensor<T> y(x.rank() == 2 ? Shape{rows, out_dim} : Shape{out_dim}, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    T* yrow = y.data() + i * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) yrow[j] = b[j];
    for (std::size_t k = 0; k < in; ++k) {
      const T xv = x[i * in + k];
      const T* wrow = w.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) yrow[j] += xv * wrow[j];
    }
  }
  return y;
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> out(Shape{n, n}, T(0));
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = T(1);
  return out;
}

#define DFB_INSTANTIATE_TENSOR(T)                                              \
  template class Tensor<T>;                                                    \
  template bool bit_equal<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                            \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                       \
  template Tensor<T> dense<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> identity<T>(std::size_t);

DFB_INSTANTIATE_TENSOR(float)
DFB_INSTANTIATE_TENSOR(double)

}  // namespace dfb
