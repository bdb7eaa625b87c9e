#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dfb/autodiff.hpp"
#include "dfb/backbone.hpp"
#include "dfb/nn_ops.hpp"

namespace dfb {

/// Which parts of the three-branch head are active.
enum class Variant {
  kGB,      ///< Global average branch only.
  kGBDF,    ///< Plus the filter bank on the shared stage-5 volume.
  kGBDFLB,  ///< Plus the local detail branch feeding the filter bank.
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct HeadConfig {
  std::size_t classes = 0;
  std::size_t filters_per_class = 5;
  /// Width of the local stage 5; 0 means "same as the global stage 5".
  std::size_t local_width = 0;
  bool skip_projection = true;
  double dropout = 0.5;

  std::size_t filters() const noexcept { return classes * filters_per_class; }
};

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
  Variant variant = Variant::kGBDFLB;

  std::size_t local_width() const;
  /// Channel count of the volume the filter bank reads.
  std::size_t filter_input_width() const;
  /// Extents of that volume (per segment).
  Extents3 filter_extents() const;
  void validate() const;
};

/// All learnable weights of every branch, initialised from `seed`. Branches a
/// variant does not use are still created so checkpoints share one layout.
template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Per-slot flag: does the variant's loss reach (and the optimizer update) this slot?
template <typename T>
std::vector<bool> active_params(const ModelConfig& cfg, const ParamSet<T>& params);

/// The four logit vectors of one clip plus the filter-bank maxima.
struct BranchLogits {
  Var z_avg;
  Var z_xchannel;
  Var z_max;
  Var z_comb;
  /// One entry per segment (a single entry in 3D mode); empty for GB.
  std::vector<PoolResult> filter_max;
};

template <typename T>
struct LossBreakdown {
  T comb = 0;
  T avg = 0;
  T max = 0;
  T xchannel = 0;
  /// ((comb + avg) + max) + xchannel, as recorded on the tape.
  T total = 0;
  Var total_var;
};

template <typename T>
struct DropoutControl {
  DropoutMode mode = DropoutMode::kEval;
  Rng* rng = nullptr;
  /// Keep-masks for kFixedMask mode: inputs of the z_avg and z_max classifiers.
  const Tensor<T>* avg_mask = nullptr;
  const Tensor<T>* max_mask = nullptr;
};

template <typename T>
struct ForwardOptions {
  DropoutControl<T> dropout;
  ConvAlgo algo = ConvAlgo::kGemm;
  /// 2D mode frame indices; eval-centre sampling when empty.
  std::vector<std::size_t> frames;
};

/// relu(upsample2x(local_stage5(stage4)) + skip(stage4)), at stage-4 resolution.
template <typename T>
Var local_branch(Tape<T>& tape, Var stage4, const ParamSet<T>& params, const ModelConfig& cfg,
                 ConvAlgo algo = ConvAlgo::kGemm);

/// N*C pointwise filters followed by a global max over the volume.
template <typename T>
PoolResult filter_bank(Tape<T>& tape, Var features, Var weights, Var bias);

/// Head over the features of one clip (3D) or one segment (2D).
template <typename T>
BranchLogits head_forward(Tape<T>& tape, Var stage4, Var stage5_global, const ParamSet<T>& params,
                          const ModelConfig& cfg, const DropoutControl<T>& dropout, ConvAlgo algo = ConvAlgo::kGemm);

/// Backbone plus head; 2D segments are consensus-averaged per branch and
/// z_comb is formed from the averaged branches.
template <typename T>
BranchLogits model_forward(Tape<T>& tape, const Tensor<T>& clip, const ParamSet<T>& params, const ModelConfig& cfg,
                           const ForwardOptions<T>& opts = {});

/// L_comb + L_avg + L_max + L_xchannel (GB: L_avg only, other terms zero).
template <typename T>
LossBreakdown<T> total_loss(Tape<T>& tape, const BranchLogits& logits, std::size_t label, Variant variant);

/// Argmax with ties to the lowest index.
template <typename T>
std::size_t predict(const Tensor<T>& z_comb);

}  // namespace dfb
