#include "dfb/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <Eigen/Core>

namespace dfb {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Left-to-right sum; Eigen's vectorised reductions depend on pointer alignment.
template <typename T>
T row_sum(const T* v, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s;
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void axpy(Tensor<T>& dst, const Tensor<T>& src, T s = T(1)) {
  T* d = dst.data();
  const T* p = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * p[i];
}

/// Product of all extents after the channel axis.
std::size_t voxels(const Shape& s) { return volume(s) / s[0]; }

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / linear

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = dfb::add(tape.value(a), tape.value(b));
  return tape.record("add", {a, b}, std::move(out), [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
    if (gin[0]) axpy(*gin[0], g);
    if (gin[1]) axpy(*gin[1], g);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = dfb::mul(tape.value(a), tape.value(b));
  const std::size_t ia = a.index, ib = b.index;
  return tape.record("mul", {a, b}, std::move(out),
                     [ia, ib](const Tape<T>& t, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const Tensor<T>& va = t.value_at(ia);
                       const Tensor<T>& vb = t.value_at(ib);
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * vb[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * va[i];
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var a) {
  Tensor<T> out = dfb::relu(tape.value(a));
  const std::size_t ia = a.index;
  return tape.record("relu", {a}, std::move(out),
                     [ia](const Tape<T>& t, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const Tensor<T>& x = t.value_at(ia);
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (x[i] > T(0)) (*gin[0])[i] += g[i];
                     });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
  Tensor<T> out = dfb::scale(tape.value(a), s);
  return tape.record("scale", {a}, std::move(out),
                     [s](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) { axpy(*gin[0], g, s); });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  T acc = 0;
  for (T v : tape.value(a).values()) acc += v;
  return tape.record("sum", {a}, Tensor<T>::scalar(acc),
                     [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (auto& v : gin[0]->values()) v += g[0];
                     });
}

template <typename T>
Var reshape(Tape<T>& tape, Var a, Shape shape) {
  Tensor<T> out = tape.value(a).reshaped(std::move(shape));
  return tape.record("reshape", {a}, std::move(out),
                     [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                     });
}

template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b) {
  Tensor<T> out = dfb::dense(tape.value(x), tape.value(w), tape.value(b));
  const std::size_t ix = x.index, iw = w.index;
  return tape.record("dense", {x, w, b}, std::move(out),
                     [ix, iw](const Tape<T>& t, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const Tensor<T>& xv = t.value_at(ix);
                       const Tensor<T>& wv = t.value_at(iw);
                       const std::size_t in = wv.extent(0), out_dim = wv.extent(1);
                       const std::size_t rows = xv.size() / in;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* grow = g.data() + r * out_dim;
                         for (std::size_t k = 0; k < in; ++k) {
                           const T* wrow = wv.data() + k * out_dim;
                           if (gin[0]) {
                             T acc = 0;
                             for (std::size_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                             (*gin[0])[r * in + k] += acc;
                           }
                           if (gin[1]) {
                             const T xk = xv[r * in + k];
                             T* gw = gin[1]->data() + k * out_dim;
                             for (std::size_t j = 0; j < out_dim; ++j) gw[j] += xk * grow[j];
                           }
                         }
                         if (gin[2])
                           for (std::size_t j = 0; j < out_dim; ++j) (*gin[2])[j] += grow[j];
                       }
                     });
}

template <typename T>
Var mean_of(Tape<T>& tape, std::span<const Var> parts) {
  if (parts.empty()) throw Error("mean_of: empty list");
  Tensor<T> acc = tape.value(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require_same(acc, tape.value(parts[i]), "mean_of");
    auto a = acc.values();
    auto v = tape.value(parts[i]).values();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += v[j];
  }
  const T n = static_cast<T>(parts.size());
  for (auto& v : acc.values()) v /= n;
  return tape.record("mean_of", std::vector<Var>(parts.begin(), parts.end()), std::move(acc),
                     [n](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (auto* gi : gin)
                         if (gi)
                           for (std::size_t j = 0; j < g.size(); ++j) (*gi)[j] += g[j] / n;
                     });
}

// ---------------------------------------------------------------------------
// Convolution

ConvSpec ConvSpec::square(std::size_t in, std::size_t out, std::size_t k, bool temporal, std::size_t stride_t,
                          std::size_t stride_hw) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {temporal ? k : 1, k, k};
  s.stride = {temporal ? stride_t : 1, stride_hw, stride_hw};
  s.pad = {temporal ? k / 2 : 0, k / 2, k / 2};
  return s;
}

ConvSpec ConvSpec::pointwise(std::size_t in, std::size_t out) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  return s;
}

std::size_t ConvSpec::out_extent(std::size_t axis, std::size_t in) const {
  if (stride[axis] == 0 || kernel[axis] == 0) throw Error("conv: zero kernel or stride");
  const std::size_t padded = in + 2 * pad[axis];
  if (padded < kernel[axis]) {
    throw Error("conv: output extent < 1 on axis " + std::to_string(axis) + " (input " + std::to_string(in) +
                ", kernel " + std::to_string(kernel[axis]) + ", pad " + std::to_string(pad[axis]) + ")");
  }
  return (padded - kernel[axis]) / stride[axis] + 1;
}

Shape ConvSpec::weight_shape() const { return {out_channels, in_channels, kernel[0], kernel[1], kernel[2]}; }

Shape ConvSpec::output_shape(const Shape& input) const {
  if (input.size() != 3 && input.size() != 4) {
    throw Error("conv: input must be [C,H,W] or [C,T,H,W], got " + shape_str(input));
  }
  if (input[0] != in_channels) {
    throw Error("conv: input has " + std::to_string(input[0]) + " channels, spec expects " +
                std::to_string(in_channels));
  }
  if (input.size() == 3) {
    if (kernel[0] != 1 || pad[0] != 0) throw Error("conv: 2D input needs a temporal kernel of 1 and no temporal pad");
    return {out_channels, out_extent(1, input[1]), out_extent(2, input[2])};
  }
  return {out_channels, out_extent(0, input[1]), out_extent(1, input[2]), out_extent(2, input[3])};
}

namespace {

struct ConvGeo {
  std::size_t ci, ti, hi, wi;
  std::size_t co, to, ho, wo;
  std::size_t kt, kh, kw;
  std::size_t st, sh, sw;
  std::ptrdiff_t pt, ph, pw;
  std::size_t taps() const { return ci * kt * kh * kw; }
  std::size_t out_voxels() const { return to * ho * wo; }
};

template <typename T>
ConvGeo conv_geometry(const Shape& x, const Tensor<T>& w, const ConvSpec& spec, Shape* out_shape) {
  Shape out = spec.output_shape(x);
  if (w.shape() != spec.weight_shape()) {
    throw Error("conv: weight shape " + shape_str(w.shape()) + " does not match spec " +
                shape_str(spec.weight_shape()));
  }
  const bool r4 = x.size() == 4;
  ConvGeo g{};
  g.ci = x[0];
  g.ti = r4 ? x[1] : 1;
  g.hi = x[r4 ? 2 : 1];
  g.wi = x[r4 ? 3 : 2];
  g.co = out[0];
  g.to = r4 ? out[1] : 1;
  g.ho = out[r4 ? 2 : 1];
  g.wo = out[r4 ? 3 : 2];
  g.kt = spec.kernel[0];
  g.kh = spec.kernel[1];
  g.kw = spec.kernel[2];
  g.st = spec.stride[0];
  g.sh = spec.stride[1];
  g.sw = spec.stride[2];
  g.pt = static_cast<std::ptrdiff_t>(spec.pad[0]);
  g.ph = static_cast<std::ptrdiff_t>(spec.pad[1]);
  g.pw = static_cast<std::ptrdiff_t>(spec.pad[2]);
  if (out_shape) *out_shape = std::move(out);
  return g;
}

// Range of output indices o with 0 <= o*stride + k - pad < in.
struct Span1 {
  std::size_t lo, hi;
};
Span1 valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t k, std::ptrdiff_t pad) {
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 - off;
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline std::size_t src_index(std::size_t o, std::size_t stride, std::size_t k, std::ptrdiff_t pad) {
  return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(o * stride + k) - pad);
}

template <typename T>
void conv_forward_direct(const ConvGeo& g, const T* x, const T* w, const T* b, T* out) {
  const std::size_t ov = g.out_voxels();
  for (std::size_t co = 0; co < g.co; ++co) {
    T* o = out + co * ov;
    std::fill(o, o + ov, b[co]);
    for (std::size_t ci = 0; ci < g.ci; ++ci)
      for (std::size_t dt = 0; dt < g.kt; ++dt) {
        const Span1 rt = valid_range(g.to, g.ti, g.st, dt, g.pt);
        for (std::size_t dh = 0; dh < g.kh; ++dh) {
          const Span1 rh = valid_range(g.ho, g.hi, g.sh, dh, g.ph);
          for (std::size_t dw = 0; dw < g.kw; ++dw) {
            const Span1 rw = valid_range(g.wo, g.wi, g.sw, dw, g.pw);
            const T wv = w[(((co * g.ci + ci) * g.kt + dt) * g.kh + dh) * g.kw + dw];
            for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
              const std::size_t it = src_index(ot, g.st, dt, g.pt);
              for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                const std::size_t ih = src_index(oh, g.sh, dh, g.ph);
                const T* xrow = x + ((ci * g.ti + it) * g.hi + ih) * g.wi;
                T* orow = o + (ot * g.ho + oh) * g.wo;
                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) orow[ow] += wv * xrow[src_index(ow, g.sw, dw, g.pw)];
              }
            }
          }
        }
      }
  }
}

template <typename T>
void conv_backward_direct(const ConvGeo& g, const T* x, const T* w, const T* gout, T* gx, T* gw, T* gb) {
  const std::size_t ov = g.out_voxels();
  for (std::size_t co = 0; co < g.co; ++co) {
    const T* go = gout + co * ov;
    if (gb) {
      T acc = 0;
      for (std::size_t i = 0; i < ov; ++i) acc += go[i];
      gb[co] += acc;
    }
    for (std::size_t ci = 0; ci < g.ci; ++ci)
      for (std::size_t dt = 0; dt < g.kt; ++dt) {
        const Span1 rt = valid_range(g.to, g.ti, g.st, dt, g.pt);
        for (std::size_t dh = 0; dh < g.kh; ++dh) {
          const Span1 rh = valid_range(g.ho, g.hi, g.sh, dh, g.ph);
          for (std::size_t dw = 0; dw < g.kw; ++dw) {
            const Span1 rw = valid_range(g.wo, g.wi, g.sw, dw, g.pw);
            const std::size_t widx = (((co * g.ci + ci) * g.kt + dt) * g.kh + dh) * g.kw + dw;
            const T wv = w[widx];
            T wacc = 0;
            for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
              const std::size_t it = src_index(ot, g.st, dt, g.pt);
              for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                const std::size_t ih = src_index(oh, g.sh, dh, g.ph);
                const std::size_t xoff = ((ci * g.ti + it) * g.hi + ih) * g.wi;
                const T* grow = go + (ot * g.ho + oh) * g.wo;
                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) {
                  const std::size_t iw = src_index(ow, g.sw, dw, g.pw);
                  if (gw) wacc += grow[ow] * x[xoff + iw];
                  if (gx) gx[xoff + iw] += wv * grow[ow];
                }
              }
            }
            if (gw) gw[widx] += wacc;
          }
        }
      }
  }
}

// col[r, c], r = ((ci*kt + dt)*kh + dh)*kw + dw, c = (ot*ho + oh)*wo + ow.
template <typename T>
void im2col(const ConvGeo& g, const T* x, T* col) {
  const std::size_t n = g.out_voxels();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci)
    for (std::size_t dt = 0; dt < g.kt; ++dt) {
      const Span1 rt = valid_range(g.to, g.ti, g.st, dt, g.pt);
      for (std::size_t dh = 0; dh < g.kh; ++dh) {
        const Span1 rh = valid_range(g.ho, g.hi, g.sh, dh, g.ph);
        for (std::size_t dw = 0; dw < g.kw; ++dw, ++r) {
          const Span1 rw = valid_range(g.wo, g.wi, g.sw, dw, g.pw);
          T* crow = col + r * n;
          std::fill(crow, crow + n, T(0));
          for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
            const std::size_t it = src_index(ot, g.st, dt, g.pt);
            for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
              const std::size_t ih = src_index(oh, g.sh, dh, g.ph);
              const T* xrow = x + ((ci * g.ti + it) * g.hi + ih) * g.wi;
              T* dst = crow + (ot * g.ho + oh) * g.wo;
              for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) dst[ow] = xrow[src_index(ow, g.sw, dw, g.pw)];
            }
          }
        }
      }
    }
}

template <typename T>
void col2im_add(const ConvGeo& g, const T* col, T* gx) {
  const std::size_t n = g.out_voxels();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci)
    for (std::size_t dt = 0; dt < g.kt; ++dt) {
      const Span1 rt = valid_range(g.to, g.ti, g.st, dt, g.pt);
      for (std::size_t dh = 0; dh < g.kh; ++dh) {
        const Span1 rh = valid_range(g.ho, g.hi, g.sh, dh, g.ph);
        for (std::size_t dw = 0; dw < g.kw; ++dw, ++r) {
          const Span1 rw = valid_range(g.wo, g.wi, g.sw, dw, g.pw);
          const T* crow = col + r * n;
          for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
            const std::size_t it = src_index(ot, g.st, dt, g.pt);
            for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
              const std::size_t ih = src_index(oh, g.sh, dh, g.ph);
              T* xrow = gx + ((ci * g.ti + it) * g.hi + ih) * g.wi;
              const T* src = crow + (ot * g.ho + oh) * g.wo;
              for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) xrow[src_index(ow, g.sw, dw, g.pw)] += src[ow];
            }
          }
        }
      }
    }
}

template <typename T>
void conv_forward_gemm(const ConvGeo& g, const T* x, const T* w, const T* b, T* out) {
  const std::size_t k = g.taps(), n = g.out_voxels();
  AlignedVector<T> col(k * n);
  im2col(g, x, col.data());
  MapR<T> o(out, g.co, n);
  o.noalias() = CMapR<T>(w, g.co, k) * CMapR<T>(col.data(), k, n);
  for (std::size_t co = 0; co < g.co; ++co) o.row(co).array() += b[co];
}

template <typename T>
void conv_backward_gemm(const ConvGeo& g, const T* x, const T* w, const T* gout, T* gx, T* gw, T* gb) {
  const std::size_t k = g.taps(), n = g.out_voxels();
  CMapR<T> go(gout, g.co, n);
  if (gb)
    for (std::size_t co = 0; co < g.co; ++co) gb[co] += row_sum(gout + co * n, n);
  if (gw) {
    AlignedVector<T> col(k * n);
    im2col(g, x, col.data());
    MapR<T>(gw, g.co, k).noalias() += go * CMapR<T>(col.data(), k, n).transpose();
  }
  if (gx) {
    AlignedVector<T> gcol(k * n);
    MapR<T>(gcol.data(), k, n).noalias() = CMapR<T>(w, g.co, k).transpose() * go;
    col2im_add(g, gcol.data(), gx);
  }
}

}  // namespace

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& spec,
                       ConvAlgo algo) {
  Shape out_shape;
  const ConvGeo g = conv_geometry(x.shape(), w, spec, &out_shape);
  if (b.shape() != Shape{spec.out_channels}) {
    throw Error("conv: bias shape " + shape_str(b.shape()) + " does not match " + std::to_string(spec.out_channels) +
                " output channels");
  }
  Tensor<T> out(out_shape, T(0));
  if (algo == ConvAlgo::kDirect) conv_forward_direct(g, x.data(), w.data(), b.data(), out.data());
  else conv_forward_gemm(g, x.data(), w.data(), b.data(), out.data());
  return out;
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, const ConvSpec& spec,
                   ConvAlgo algo, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  Shape out_shape;
  const ConvGeo g = conv_geometry(x.shape(), w, spec, &out_shape);
  if (grad_out.shape() != out_shape) throw Error("conv backward: gradient shape mismatch");
  T* gx = grad_x ? grad_x->data() : nullptr;
  T* gw = grad_w ? grad_w->data() : nullptr;
  T* gb = grad_b ? grad_b->data() : nullptr;
  if (algo == ConvAlgo::kDirect) conv_backward_direct(g, x.data(), w.data(), grad_out.data(), gx, gw, gb);
  else conv_backward_gemm(g, x.data(), w.data(), grad_out.data(), gx, gw, gb);
}

template <typename T>
Var conv(Tape<T>& tape, Var x, Var w, Var b, const ConvSpec& spec, ConvAlgo algo) {
  Tensor<T> out = conv_forward(tape.value(x), tape.value(w), tape.value(b), spec, algo);
  const std::size_t ix = x.index, iw = w.index;
  return tape.record("conv", {x, w, b}, std::move(out),
                     [ix, iw, spec, algo](const Tape<T>& t, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       conv_backward(t.value_at(ix), t.value_at(iw), g, spec, algo, gin[0], gin[1], gin[2]);
                     });
}

template <typename T>
Var pointwise_conv(Tape<T>& tape, Var x, Var w, Var b) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(w);
  const Tensor<T>& bv = tape.value(b);
  if (xv.rank() < 2 || wv.rank() != 2 || wv.extent(1) != xv.extent(0) || bv.shape() != Shape{wv.extent(0)}) {
    throw Error("pointwise_conv: shape mismatch x" + shape_str(xv.shape()) + " W" + shape_str(wv.shape()) + " b" +
                shape_str(bv.shape()));
  }
  const std::size_t ci = xv.extent(0), co = wv.extent(0), n = voxels(xv.shape());
  Shape out_shape = xv.shape();
  out_shape[0] = co;
  Tensor<T> out(out_shape, T(0));
  MapR<T> o(out.data(), co, n);
  o.noalias() = CMapR<T>(wv.data(), co, ci) * CMapR<T>(xv.data(), ci, n);
  for (std::size_t c = 0; c < co; ++c) o.row(c).array() += bv[c];
  const std::size_t ix = x.index, iw = w.index;
  return tape.record("pointwise_conv", {x, w, b}, std::move(out),
                     [ix, iw, ci, co, n](const Tape<T>& t, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       CMapR<T> go(g.data(), co, n);
                       if (gin[0])
                         MapR<T>(gin[0]->data(), ci, n).noalias() +=
                             CMapR<T>(t.value_at(iw).data(), co, ci).transpose() * go;
                       if (gin[1])
                         MapR<T>(gin[1]->data(), co, ci).noalias() +=
                             go * CMapR<T>(t.value_at(ix).data(), ci, n).transpose();
                       if (gin[2])
                         for (std::size_t c = 0; c < co; ++c) (*gin[2])[c] += row_sum(go.data() + c * n, n);
                     });
}

// ---------------------------------------------------------------------------
// Pooling, resampling, regularisation, loss

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() < 2) throw Error("global_avg_pool: expected [C,...], got " + shape_str(xv.shape()));
  const std::size_t c = xv.extent(0), n = voxels(xv.shape());
  Tensor<T> out(Shape{c}, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    T acc = 0;
    const T* p = xv.data() + k * n;
    for (std::size_t i = 0; i < n; ++i) acc += p[i];
    out[k] = acc / static_cast<T>(n);
  }
  return tape.record("global_avg_pool", {x}, std::move(out),
                     [c, n](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t k = 0; k < c; ++k) {
                         const T v = g[k] / static_cast<T>(n);
                         T* p = gin[0]->data() + k * n;
                         for (std::size_t i = 0; i < n; ++i) p[i] += v;
                       }
                     });
}

std::vector<std::size_t> PoolResult::coords(std::size_t c) const {
  std::vector<std::size_t> out(volume.size());
  std::size_t rem = argmax.at(c);
  for (std::size_t a = volume.size(); a-- > 0;) {
    out[a] = rem % volume[a];
    rem /= volume[a];
  }
  return out;
}

template <typename T>
PoolResult global_max_pool(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() < 2) throw Error("global_max_pool: expected [C,...], got " + shape_str(xv.shape()));
  const std::size_t c = xv.extent(0), n = voxels(xv.shape());
  PoolResult res;
  res.volume.assign(xv.shape().begin() + 1, xv.shape().end());
  res.argmax.resize(c);
  Tensor<T> out(Shape{c}, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    const T* p = xv.data() + k * n;
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (p[i] > p[best]) best = i;
    res.argmax[k] = best;
    out[k] = p[best];
  }
  res.values = tape.record("global_max_pool", {x}, std::move(out),
                           [arg = res.argmax, n](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                             for (std::size_t k = 0; k < arg.size(); ++k) (*gin[0])[k * n + arg[k]] += g[k];
                           });
  return res;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel-centre source taps for a 2x upsample of an axis of length n.
std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  for (std::size_t d = 0; d < 2 * n; ++d) {
    double s = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double f = s - static_cast<double>(i0);
    taps[d] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace

template <typename T>
Var upsample_bilinear2x(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 3 && xv.rank() != 4) {
    throw Error("upsample_bilinear2x: expected [C,H,W] or [C,T,H,W], got " + shape_str(xv.shape()));
  }
  const std::size_t r = xv.rank();
  const std::size_t h = xv.extent(r - 2), w = xv.extent(r - 1);
  const std::size_t planes = xv.size() / (h * w);
  Shape out_shape = xv.shape();
  out_shape[r - 2] = 2 * h;
  out_shape[r - 1] = 2 * w;
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  Tensor<T> out(out_shape, T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const Tap& a = ty[oy];
      const T* r0 = src + a.i0 * w;
      const T* r1 = src + a.i1 * w;
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const Tap& b = tx[ox];
        const T top = static_cast<T>(b.w0) * r0[b.i0] + static_cast<T>(b.w1) * r0[b.i1];
        const T bot = static_cast<T>(b.w0) * r1[b.i0] + static_cast<T>(b.w1) * r1[b.i1];
        dst[oy * 2 * w + ox] = static_cast<T>(a.w0) * top + static_cast<T>(a.w1) * bot;
      }
    }
  }
  return tape.record("upsample_bilinear2x", {x}, std::move(out),
                     [ty, tx, planes, h, w](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t p = 0; p < planes; ++p) {
                         const T* go = g.data() + p * 4 * h * w;
                         T* gi = gin[0]->data() + p * h * w;
                         for (std::size_t oy = 0; oy < 2 * h; ++oy) {
                           const Tap& a = ty[oy];
                           for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                             const Tap& b = tx[ox];
                             const T v = go[oy * 2 * w + ox];
                             const T top = static_cast<T>(a.w0) * v, bot = static_cast<T>(a.w1) * v;
                             gi[a.i0 * w + b.i0] += static_cast<T>(b.w0) * top;
                             gi[a.i0 * w + b.i1] += static_cast<T>(b.w1) * top;
                             gi[a.i1 * w + b.i0] += static_cast<T>(b.w0) * bot;
                             gi[a.i1 * w + b.i1] += static_cast<T>(b.w1) * bot;
                           }
                         }
                       }
                     });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, double p, DropoutMode mode, Rng* rng, const Tensor<T>* mask, Tensor<T>* mask_out) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: probability must be in [0, 1), got " + std::to_string(p));
  const Tensor<T>& xv = tape.value(x);
  if (mode == DropoutMode::kEval) {
    if (mask_out) *mask_out = Tensor<T>(xv.shape(), T(1));
    return x;
  }
  Tensor<T> keep;
  if (mode == DropoutMode::kTrain) {
    if (!rng) throw Error("dropout: train mode needs a random stream");
    keep = Tensor<T>(xv.shape(), T(0));
    for (auto& k : keep.values()) k = rng->uniform() >= p ? T(1) : T(0);
  } else {
    if (!mask) throw Error("dropout: fixed-mask mode needs a mask");
    require_same(*mask, xv, "dropout mask");
    keep = *mask;
  }
  const T s = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape(), T(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * keep[i] * s;
  if (mask_out) *mask_out = keep;
  return tape.record("dropout", {x}, std::move(out),
                     [keep = std::move(keep), s](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * keep[i] * s;
                     });
}

template <typename T>
Var softmax_xent(Tape<T>& tape, Var logits, std::size_t label) {
  const Tensor<T>& z = tape.value(logits);
  if (z.rank() != 1) throw Error("softmax_xent: logits must be a vector, got " + shape_str(z.shape()));
  const std::size_t c = z.size();
  if (label >= c) {
    throw Error("softmax_xent: label " + std::to_string(label) + " out of range for " + std::to_string(c) + " classes");
  }
  std::size_t top = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (z[j] > z[top]) top = j;
  const T m = z[top];
  std::vector<T> e(c);
  T rest = 0;
  for (std::size_t j = 0; j < c; ++j) {
    e[j] = std::exp(z[j] - m);
    if (j != top) rest += e[j];
  }
  const T loss = std::log1p(rest) + (m - z[label]);
  const T denom = T(1) + rest;
  Tensor<T> prob(Shape{c}, T(0));
  for (std::size_t j = 0; j < c; ++j) prob[j] = e[j] / denom;
  return tape.record("softmax_xent", {logits}, Tensor<T>::scalar(loss),
                     [prob = std::move(prob), label](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t j = 0; j < prob.size(); ++j)
                         (*gin[0])[j] += g[0] * (prob[j] - (j == label ? T(1) : T(0)));
                     });
}

template <typename T>
Var cross_channel_pool(Tape<T>& tape, Var maxvec, std::size_t n, std::size_t c) {
  const Tensor<T>& v = tape.value(maxvec);
  if (n == 0 || c == 0) throw Error("cross_channel_pool: N and C must be positive");
  if (v.rank() != 1 || v.size() != n * c) {
    throw Error("cross_channel_pool: expected a vector of N*C = " + std::to_string(n * c) + " entries, got " +
                shape_str(v.shape()));
  }
  Tensor<T> out(Shape{c}, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += v[k * n + i];
    out[k] = acc / static_cast<T>(n);
  }
  return tape.record("cross_channel_pool", {maxvec}, std::move(out),
                     [n, c](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t i = 0; i < n; ++i) (*gin[0])[k * n + i] += g[k] / static_cast<T>(n);
                     });
}

#define DFB_INSTANTIATE_NN(T)                                                                                  \
  template Var add<T>(Tape<T>&, Var, Var);                                                                     \
  template Var mul<T>(Tape<T>&, Var, Var);                                                                     \
  template Var relu<T>(Tape<T>&, Var);                                                                         \
  template Var scale<T>(Tape<T>&, Var, T);                                                                     \
  template Var sum<T>(Tape<T>&, Var);                                                                          \
  template Var reshape<T>(Tape<T>&, Var, Shape);                                                               \
  template Var dense<T>(Tape<T>&, Var, Var, Var);                                                              \
  template Var mean_of<T>(Tape<T>&, std::span<const Var>);                                                     \
  template Tensor<T> conv_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&,    \
                                     ConvAlgo);                                                                \
  template void conv_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&,        \
                                 ConvAlgo, Tensor<T>*, Tensor<T>*, Tensor<T>*);                                \
  template Var conv<T>(Tape<T>&, Var, Var, Var, const ConvSpec&, ConvAlgo);                                    \
  template Var pointwise_conv<T>(Tape<T>&, Var, Var, Var);                                                     \
  template Var global_avg_pool<T>(Tape<T>&, Var);                                                              \
  template PoolResult global_max_pool<T>(Tape<T>&, Var);                                                       \
  template Var upsample_bilinear2x<T>(Tape<T>&, Var);                                                          \
  template Var dropout<T>(Tape<T>&, Var, double, DropoutMode, Rng*, const Tensor<T>*, Tensor<T>*);             \
  template Var softmax_xent<T>(Tape<T>&, Var, std::size_t);                                                    \
  template Var cross_channel_pool<T>(Tape<T>&, Var, std::size_t, std::size_t);

DFB_INSTANTIATE_NN(float)
DFB_INSTANTIATE_NN(double)

}  // namespace dfb
