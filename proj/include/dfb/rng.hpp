#pragma once

#include <cstdint>
#include <optional>

#include "dfb/tensor.hpp"

namespace dfb {

/// Counter-based random stream.
///
/// The n-th 64-bit draw of a stream is a pure function of (seed, stream id, n),
/// so any item of a parallel job can re-derive its own stream from its index.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  /// Independent child stream keyed by (seed, this stream, id).
  Rng split(std::uint64_t id) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer on [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

template <typename T>
Tensor<T> rng_normal(Rng& rng, const Shape& shape, double mean, double stddev);

template <typename T>
Tensor<T> rng_uniform(Rng& rng, const Shape& shape, double lo, double hi);

}  // namespace dfb
