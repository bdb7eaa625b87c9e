#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfb {

/// Base exception for every recoverable failure in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t volume(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major N-dimensional array.
///
/// The shape is fixed at construction. Element storage is exposed mutably only
/// so that builders, kernels and the optimizer can fill values in place.
/// Allocator with a fixed 64-byte alignment, so vectorised kernels see the
/// same alignment, and therefore the same summation order, on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlign}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, T fill);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> values() const noexcept { return data_; }
  std::span<T> values() noexcept { return data_; }
  const T* data() const noexcept { return data_.data(); }
  T* data() noexcept { return data_.data(); }

  T operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }

  /// Row-major flat offset of a full coordinate.
  std::size_t offset(std::span<const std::size_t> coord) const;
  std::size_t offset(std::initializer_list<std::size_t> coord) const {
    return offset(std::span<const std::size_t>(coord.begin(), coord.size()));
  }
  T at(std::initializer_list<std::size_t> coord) const { return data_[offset(coord)]; }
  T& at(std::initializer_list<std::size_t> coord) { return data_[offset(coord)]; }

  /// Value of a single-element tensor.
  T item() const;

  /// Same values under a new shape of equal volume.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

/// Bit-level equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b);

// Plain (non-recording) tensor math. All functions are pure.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
/// Adds a scalar to every element.
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);

/// y[i,j] = sum_k x[i,k] * W[k,j] + b[j]. A rank-1 x is treated as one row and
/// yields a rank-1 result.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> identity(std::size_t n);

}  // namespace dfb
