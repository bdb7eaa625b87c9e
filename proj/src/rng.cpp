#include "dfb/rng.hpp"

#include <cmath>
#include <numbers>

namespace dfb {

std::uint64_t mix64(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), key_(mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

Rng Rng::split(std::uint64_t id) const {
  Rng child(seed_, 0);
  child.key_ = mix64(key_ ^ mix64(id + 0x8cb92ba72f3d8dd7ULL));
  return child;
}

std::uint64_t Rng::next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * (counter_++)); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw Error("uniform_int: empty range");
  // Rejection sampling keeps the result exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  return r * std::cos(theta);
}

template <typename T>
Tensor<T> rng_normal(Rng& rng, const Shape& shape, double mean, double stddev) {
  if (!(stddev >= 0.0)) throw Error("rng_normal: std must be non-negative");
  Tensor<T> out(shape, T(0));
  for (auto& v : out.values()) v = static_cast<T>(mean + stddev * rng.normal());
  return out;
}

template <typename T>
Tensor<T> rng_uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor<T> out(shape, T(0));
  for (auto& v : out.values()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return out;
}

template Tensor<float> rng_normal<float>(Rng&, const Shape&, double, double);
template Tensor<double> rng_normal<double>(Rng&, const Shape&, double, double);
template Tensor<float> rng_uniform<float>(Rng&, const Shape&, double, double);
template Tensor<double> rng_uniform<double>(Rng&, const Shape&, double, double);

}  // namespace dfb
