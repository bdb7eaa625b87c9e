#pragma once

// Brute-force reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dfb/nn_ops.hpp"
#include "dfb/rng.hpp"
#include "dfb/tensor.hpp"

namespace oracle {

using dfb::ConvSpec;
using dfb::Shape;
using dfb::Tensor;

// Six nested loops over (out channel, output voxel, in channel, kernel tap);
// rank-3 inputs are treated as T = 1.
inline Tensor<double> conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           const ConvSpec& s) {
  const bool planar = x.rank() == 3;
  const std::size_t ci = x.extent(0);
  const std::size_t ti = planar ? 1 : x.extent(1), hi = x.extent(x.rank() - 2), wi = x.extent(x.rank() - 1);
  const long pt = static_cast<long>(s.pad[0]), ph = static_cast<long>(s.pad[1]), pw = static_cast<long>(s.pad[2]);
  const std::size_t to = (ti + 2 * s.pad[0] - s.kernel[0]) / s.stride[0] + 1;
  const std::size_t ho = (hi + 2 * s.pad[1] - s.kernel[1]) / s.stride[1] + 1;
  const std::size_t wo = (wi + 2 * s.pad[2] - s.kernel[2]) / s.stride[2] + 1;
  Shape shape = planar ? Shape{s.out_channels, ho, wo} : Shape{s.out_channels, to, ho, wo};
  Tensor<double> y(shape, 0.0);
  std::size_t n = 0;
  for (std::size_t o = 0; o < s.out_channels; ++o)
    for (std::size_t t = 0; t < to; ++t)
      for (std::size_t yy = 0; yy < ho; ++yy)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t kt = 0; kt < s.kernel[0]; ++kt)
              for (std::size_t ky = 0; ky < s.kernel[1]; ++ky)
                for (std::size_t kx = 0; kx < s.kernel[2]; ++kx) {
                  const long it = static_cast<long>(t * s.stride[0] + kt) - pt;
                  const long iy = static_cast<long>(yy * s.stride[1] + ky) - ph;
                  const long ix = static_cast<long>(xx * s.stride[2] + kx) - pw;
                  if (it < 0 || iy < 0 || ix < 0 || it >= static_cast<long>(ti) || iy >= static_cast<long>(hi) ||
                      ix >= static_cast<long>(wi))
                    continue;
                  const double xv = x[((c * ti + static_cast<std::size_t>(it)) * hi + static_cast<std::size_t>(iy)) *
                                          wi +
                                      static_cast<std::size_t>(ix)];
                  acc += xv * w[(((o * ci + c) * s.kernel[0] + kt) * s.kernel[1] + ky) * s.kernel[2] + kx];
                }
          y[n++] = acc;
        }
  return y;
}

inline std::vector<double> avg_pool(const Tensor<double>& x) {
  const std::size_t c = x.extent(0), v = x.size() / c;
  std::vector<double> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < v; ++i) s += x[k * v + i];
    out[k] = s / static_cast<double>(v);
  }
  return out;
}

struct Max {
  std::vector<double> values;
  std::vector<std::size_t> argmax;
};

inline Max max_pool(const Tensor<double>& x) {
  const std::size_t c = x.extent(0), v = x.size() / c;
  Max m;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v; ++i)
      if (x[k * v + i] > x[k * v + best]) best = i;
    m.values.push_back(x[k * v + best]);
    m.argmax.push_back(best);
  }
  return m;
}

// Half-pixel centres: s = (d + 0.5) / 2 - 0.5, clamped to [0, n - 1].
inline Tensor<double> upsample2x(const Tensor<double>& x) {
  const std::size_t r = x.rank(), h = x.extent(r - 2), w = x.extent(r - 1), planes = x.size() / (h * w);
  Shape shape = x.shape();
  shape[r - 2] *= 2;
  shape[r - 1] *= 2;
  Tensor<double> y(shape, 0.0);
  auto coord = [](std::size_t d, std::size_t n) {
    double s = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
  };
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < 2 * h; ++oy)
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const double sy = coord(oy, h), sx = coord(ox, w);
        const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
        const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
        auto at = [&](std::size_t yy, std::size_t xx) { return x[(p * h + yy) * w + xx]; };
        y[(p * 2 * h + oy) * 2 * w + ox] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                           fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
  return y;
}

inline std::vector<double> block_mean(const std::vector<double>& v, std::size_t n, std::size_t c) {
  std::vector<double> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += v[k * n + j];
    out[k] = s / static_cast<double>(n);
  }
  return out;
}

inline Tensor<double> dense(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t rows = x.rank() == 1 ? 1 : x.extent(0), f = w.extent(0), o = w.extent(1);
  Tensor<double> y(x.rank() == 1 ? Shape{o} : Shape{rows, o}, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < f; ++k) s += x[i * f + k] * w[k * o + j];
      y[i * o + j] = s;
    }
  return y;
}

// -log softmax(z)[label] in extended precision with compensated summation.
inline double softmax_xent(const std::vector<double>& z, std::size_t label) {
  long double m = z[0];
  for (double v : z) m = std::max<long double>(m, v);
  long double sum = 0, comp = 0;
  for (double v : z) {
    const long double term = std::exp(static_cast<long double>(v) - m);
    const long double t = sum + term;
    comp += std::fabs(sum) >= std::fabs(term) ? (sum - t) + term : (term - t) + sum;
    sum = t;
  }
  return static_cast<double>(std::log(sum + comp) + m - static_cast<long double>(z[label]));
}

inline Tensor<double> random(dfb::Rng& rng, const Shape& shape, double lo = -1, double hi = 1) {
  return dfb::rng_uniform<double>(rng, shape, lo, hi);
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
