#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "dfb/autodiff.hpp"
#include "dfb/rng.hpp"
#include "dfb/tensor.hpp"

namespace dfb {

// ---------------------------------------------------------------------------
// Elementwise and linear ops recorded on a tape.

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var relu(Tape<T>& tape, Var a);
template <typename T>
Var scale(Tape<T>& tape, Var a, T s);
/// Sum of all elements, as a [1] tensor.
template <typename T>
Var sum(Tape<T>& tape, Var a);
template <typename T>
Var reshape(Tape<T>& tape, Var a, Shape shape);
/// x[B,F] or x[F] times W[F,O] plus b[O].
template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b);
/// Arithmetic mean of equally shaped tensors, summed in list order.
template <typename T>
Var mean_of(Tape<T>& tape, std::span<const Var> parts);

// ---------------------------------------------------------------------------
// Convolution.

/// Geometry of one convolution. Axis order is (t, h, w); 2D features use
/// kernel/stride 1 and padding 0 on the t axis.
struct ConvSpec {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  /// k x k (x k) "same"-padded kernel with the given strides.
  static ConvSpec square(std::size_t in, std::size_t out, std::size_t k, bool temporal, std::size_t stride_t,
                         std::size_t stride_hw);
  static ConvSpec pointwise(std::size_t in, std::size_t out);

  /// floor((in + 2 pad - k) / stride) + 1; throws when that is below 1.
  std::size_t out_extent(std::size_t axis, std::size_t in) const;
  Shape weight_shape() const;
  /// Output shape for an input of rank 3 ([C,H,W]) or rank 4 ([C,T,H,W]).
  Shape output_shape(const Shape& input) const;
};

enum class ConvAlgo {
  kDirect,  ///< Nested loops, reference implementation.
  kGemm,    ///< im2col followed by a matrix product.
};

/// Plain cross-correlation with zero padding.
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& spec,
                       ConvAlgo algo = ConvAlgo::kGemm);

/// Gradients of a convolution; any output pointer may be null.
template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, const ConvSpec& spec,
                   ConvAlgo algo, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
Var conv(Tape<T>& tape, Var x, Var w, Var b, const ConvSpec& spec, ConvAlgo algo = ConvAlgo::kGemm);

/// Channel mixing: y[o, p] = b[o] + sum_i W[o, i] x[i, p] over every voxel p.
template <typename T>
Var pointwise_conv(Tape<T>& tape, Var x, Var w, Var b);

// ---------------------------------------------------------------------------
// Pooling and resampling.

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x);

/// Per-channel maxima of a feature volume plus where they occur.
struct PoolResult {
  Var values;
  /// Flat offset of each channel's maximum inside its (T,)H,W volume; ties
  /// resolve to the lowest offset.
  std::vector<std::size_t> argmax;
  /// Extents of the pooled volume without the channel axis.
  Shape volume;

  /// Coordinates of channel `c`'s maximum in `volume` order.
  std::vector<std::size_t> coords(std::size_t c) const;
};

template <typename T>
PoolResult global_max_pool(Tape<T>& tape, Var x);

/// Spatial 2x bilinear upsampling with half-pixel centres; a temporal axis, if
/// present, is left untouched.
template <typename T>
Var upsample_bilinear2x(Tape<T>& tape, Var x);

enum class DropoutMode { kTrain, kEval, kFixedMask };

/// Inverted dropout. In kTrain mode the mask is drawn from `rng`; in
/// kFixedMask mode `mask` (0/1 keep flags, same shape as x) is reused. The
/// mask actually applied is written to `mask_out` when given.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double p, DropoutMode mode, Rng* rng = nullptr, const Tensor<T>* mask = nullptr,
            Tensor<T>* mask_out = nullptr);

/// -log softmax(logits)[label], computed with max subtraction.
template <typename T>
Var softmax_xent(Tape<T>& tape, Var logits, std::size_t label);

/// Averages the C blocks of N consecutive entries: out[c] = mean(x[cN .. cN+N-1]).
template <typename T>
Var cross_channel_pool(Tape<T>& tape, Var maxvec, std::size_t n, std::size_t c);

}  // namespace dfb
