#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "dfb/autodiff.hpp"
#include "dfb/nn_ops.hpp"
#include "dfb/rng.hpp"

namespace dfb {

enum class BackboneMode {
  k2D,  ///< Per-frame 2D network over S sampled segments, shared weights.
  k3D,  ///< Inflated spatio-temporal network over the whole clip.
};

/// Extents of one feature volume (t is 1 in 2D mode).
struct Extents3 {
  std::size_t t = 1, h = 1, w = 1;
  friend bool operator==(const Extents3&, const Extents3&) = default;
};

struct BackboneConfig {
  BackboneMode mode = BackboneMode::k3D;
  std::size_t segments = 3;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t stem_width = 8;
  std::array<std::size_t, 4> stage_widths{8, 16, 24, 32};
  std::size_t stage5_width = 48;
  /// Temporal stride of the stem convolution (3D mode only).
  std::size_t temporal_stride = 2;
  /// Spatial stride of the first 3x3 convolution of stages 1..5.
  std::array<std::size_t, 5> stage_strides{1, 2, 2, 2, 2};
  /// Adds an identity shortcut around the second convolution of each stage.
  bool residual = false;

  bool is3d() const noexcept { return mode == BackboneMode::k3D; }
  std::size_t stage_width(std::size_t stage) const;  // 1..5

  /// Feature extents after the stem (index 0) and after stages 1..5.
  /// Throws when any extent underflows or stage 5 is not half of stage 4.
  std::array<Extents3, 6> extents() const;
  void validate() const { (void)extents(); }

  ConvSpec stem_spec() const;
  /// Spec of convolution `j` (0 or 1) of stage `stage` (1..5) given its input width.
  ConvSpec stage_spec(std::size_t stage, std::size_t j, std::size_t in_width) const;
};

/// Backbone parameters: stem, stages 1..5. Weights are He-normal, biases zero.
template <typename T>
void add_backbone_params(ParamSet<T>& params, const BackboneConfig& cfg, std::uint64_t seed);

/// Parameters of a stage-5-shaped block under `prefix` (used for the local copy).
template <typename T>
void add_stage5_params(ParamSet<T>& params, const BackboneConfig& cfg, const std::string& prefix,
                       std::size_t out_width, std::uint64_t seed);

/// Deterministic per-name stream for parameter initialisation.
Rng param_stream(std::uint64_t seed, const std::string& name);

/// Per-segment feature volumes; 3D mode has exactly one entry per list.
struct StageFeatures {
  std::vector<Var> stage1;
  std::vector<Var> stage4;
  std::vector<Var> stage5_global;
};

enum class SampleMode { kTrainRandom, kEvalCenter };

/// TSN frame selection: segment i covers [floor(i n / S), floor((i+1) n / S)).
std::vector<std::size_t> segment_sample(std::size_t num_frames, std::size_t segments, SampleMode mode, Rng* rng);

/// Runs a two-convolution stage whose parameters live under `prefix`.
template <typename T>
Var run_stage(Tape<T>& tape, Var x, const ParamSet<T>& params, const std::string& prefix, const ConvSpec& first,
              const ConvSpec& second, bool residual, ConvAlgo algo);

/// Clip is [channels, frames, height, width]. In 2D mode `frame_indices`
/// selects the S frames to process (eval-centre sampling when empty).
template <typename T>
StageFeatures backbone_forward(Tape<T>& tape, const Tensor<T>& clip, const BackboneConfig& cfg,
                               const ParamSet<T>& params, ConvAlgo algo = ConvAlgo::kGemm,
                               std::vector<std::size_t> frame_indices = {});

/// Arithmetic mean of per-segment vectors.
template <typename T>
Tensor<T> consensus_average(std::span<const Tensor<T>> per_segment);

}  // namespace dfb
