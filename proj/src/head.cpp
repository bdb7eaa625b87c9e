#include "dfb/head.hpp"

#include <cmath>

namespace dfb {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kGB: return "GB";
    case Variant::kGBDF: return "GB+DF";
    case Variant::kGBDFLB: return "GB+DF+LB";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "GB") return Variant::kGB;
  if (s == "GB+DF") return Variant::kGBDF;
  if (s == "GB+DF+LB") return Variant::kGBDFLB;
  throw Error("unknown model variant '" + s + "' (expected GB, GB+DF or GB+DF+LB)");
}

std::size_t ModelConfig::local_width() const {
  return head.local_width == 0 ? backbone.stage5_width : head.local_width;
}

std::size_t ModelConfig::filter_input_width() const {
  return variant == Variant::kGBDFLB ? local_width() : backbone.stage5_width;
}

Extents3 ModelConfig::filter_extents() const {
  const auto e = backbone.extents();
  return variant == Variant::kGBDFLB ? e[4] : e[5];
}

void ModelConfig::validate() const {
  backbone.validate();
  if (head.classes < 2) throw Error("head needs at least 2 classes, got " + std::to_string(head.classes));
  if (head.filters_per_class < 1) throw Error("head needs at least 1 filter per class");
  if (!(head.dropout >= 0.0 && head.dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
  if (!head.skip_projection && local_width() != backbone.stage_width(4)) {
    throw Error("identity skip needs local width (" + std::to_string(local_width()) + ") equal to stage-4 width (" +
                std::to_string(backbone.stage_width(4)) + ")");
  }
}

template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<T> p;
  add_backbone_params(p, cfg.backbone, seed);
  add_stage5_params(p, cfg.backbone, "local5", cfg.local_width(), seed);
  const std::size_t c4 = cfg.backbone.stage_width(4);
  const std::size_t lw = cfg.local_width();
  const std::size_t nc = cfg.head.filters();
  const std::size_t classes = cfg.head.classes;
  if (cfg.head.skip_projection) {
    Rng r = param_stream(seed, "skip.w");
    p.add("skip.w", rng_normal<T>(r, {lw, c4}, 0.0, std::sqrt(2.0 / static_cast<double>(c4))), true);
    p.add("skip.b", Tensor<T>::zeros({lw}), false);
  }
  Rng rf = param_stream(seed, "filters.w");
  p.add("filters.w", rng_normal<T>(rf, {nc, cfg.filter_input_width()}, 0.0, 0.01), true);
  p.add("filters.b", Tensor<T>::zeros({nc}), false);
  Rng ra = param_stream(seed, "cls_avg.w");
  p.add("cls_avg.w", rng_normal<T>(ra, {cfg.backbone.stage5_width, classes}, 0.0, 1.0 / std::sqrt(static_cast<double>(cfg.backbone.stage5_width))), true);
  p.add("cls_avg.b", Tensor<T>::zeros({classes}), false);
  Rng rm = param_stream(seed, "cls_max.w");
  p.add("cls_max.w", rng_normal<T>(rm, {nc, classes}, 0.0, 1.0 / std::sqrt(static_cast<double>(nc))), true);
  p.add("cls_max.b", Tensor<T>::zeros({classes}), false);
  return p;
}

template <typename T>
std::vector<bool> active_params(const ModelConfig& cfg, const ParamSet<T>& params) {
  std::vector<bool> active(params.size());
  for (std::size_t s = 0; s < params.size(); ++s) {
    const std::string& n = params.name(s);
    const bool local = n.starts_with("local5.") || n.starts_with("skip.");
    const bool df = n.starts_with("filters.") || n.starts_with("cls_max.");
    switch (cfg.variant) {
      case Variant::kGB: active[s] = !local && !df; break;
      case Variant::kGBDF: active[s] = !local; break;
      case Variant::kGBDFLB: active[s] = true; break;
    }
  }
  return active;
}

template <typename T>
Var local_branch(Tape<T>& tape, Var stage4, const ParamSet<T>& params, const ModelConfig& cfg, ConvAlgo algo) {
  const BackboneConfig& bb = cfg.backbone;
  BackboneConfig local = bb;
  local.stage5_width = cfg.local_width();
  const std::size_t c4 = bb.stage_width(4);
  Var deep = run_stage(tape, stage4, params, "local5", local.stage_spec(5, 0, c4), local.stage_spec(5, 1, c4),
                       bb.residual, algo);
  Var up = upsample_bilinear2x(tape, deep);
  Var skip = cfg.head.skip_projection
                 ? pointwise_conv(tape, stage4, tape.param(params, "skip.w"), tape.param(params, "skip.b"))
                 : stage4;
  if (tape.value(up).shape() != tape.value(skip).shape()) {
    throw Error("local branch: upsampled volume " + shape_str(tape.value(up).shape()) +
                " does not match the stage-4 skip " + shape_str(tape.value(skip).shape()));
  }
  return relu(tape, add(tape, up, skip));
}

template <typename T>
PoolResult filter_bank(Tape<T>& tape, Var features, Var weights, Var bias) {
  return global_max_pool(tape, pointwise_conv(tape, features, weights, bias));
}

template <typename T>
BranchLogits head_forward(Tape<T>& tape, Var stage4, Var stage5_global, const ParamSet<T>& params,
                          const ModelConfig& cfg, const DropoutControl<T>& drop, ConvAlgo algo) {
  const std::size_t classes = cfg.head.classes;
  const double p = cfg.head.dropout;
  BranchLogits out;
  Var pooled = global_avg_pool(tape, stage5_global);
  Var pooled_d = dropout(tape, pooled, p, drop.mode, drop.rng, drop.avg_mask);
  out.z_avg = dense(tape, pooled_d, tape.param(params, "cls_avg.w"), tape.param(params, "cls_avg.b"));
  if (cfg.variant == Variant::kGB) {
    out.z_xchannel = tape.constant(Tensor<T>::zeros({classes}));
    out.z_max = tape.constant(Tensor<T>::zeros({classes}));
  } else {
    Var feat = cfg.variant == Variant::kGBDFLB ? local_branch(tape, stage4, params, cfg, algo) : stage5_global;
    PoolResult maxes = filter_bank(tape, feat, tape.param(params, "filters.w"), tape.param(params, "filters.b"));
    out.z_xchannel = cross_channel_pool(tape, maxes.values, cfg.head.filters_per_class, classes);
    Var maxes_d = dropout(tape, maxes.values, p, drop.mode, drop.rng, drop.max_mask);
    out.z_max = dense(tape, maxes_d, tape.param(params, "cls_max.w"), tape.param(params, "cls_max.b"));
    out.filter_max.push_back(std::move(maxes));
  }
  out.z_comb = add(tape, add(tape, out.z_avg, out.z_xchannel), out.z_max);
  return out;
}

template <typename T>
BranchLogits model_forward(Tape<T>& tape, const Tensor<T>& clip, const ParamSet<T>& params, const ModelConfig& cfg,
                           const ForwardOptions<T>& opts) {
  StageFeatures feats = backbone_forward(tape, clip, cfg.backbone, params, opts.algo, opts.frames);
  if (feats.stage4.size() == 1) {
    return head_forward(tape, feats.stage4[0], feats.stage5_global[0], params, cfg, opts.dropout, opts.algo);
  }
  std::vector<Var> za, zx, zm;
  BranchLogits out;
  for (std::size_t s = 0; s < feats.stage4.size(); ++s) {
    BranchLogits seg = head_forward(tape, feats.stage4[s], feats.stage5_global[s], params, cfg, opts.dropout, opts.algo);
    za.push_back(seg.z_avg);
    zx.push_back(seg.z_xchannel);
    zm.push_back(seg.z_max);
    for (auto& f : seg.filter_max) out.filter_max.push_back(std::move(f));
  }
  out.z_avg = mean_of<T>(tape, za);
  out.z_xchannel = mean_of<T>(tape, zx);
  out.z_max = mean_of<T>(tape, zm);
  out.z_comb = add(tape, add(tape, out.z_avg, out.z_xchannel), out.z_max);
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(Tape<T>& tape, const BranchLogits& logits, std::size_t label, Variant variant) {
  LossBreakdown<T> lb;
  Var avg = softmax_xent(tape, logits.z_avg, label);
  lb.avg = tape.value(avg).item();
  if (variant == Variant::kGB) {
    lb.total_var = avg;
    lb.total = ((lb.comb + lb.avg) + lb.max) + lb.xchannel;
    return lb;
  }
  Var comb = softmax_xent(tape, logits.z_comb, label);
  Var mx = softmax_xent(tape, logits.z_max, label);
  Var xc = softmax_xent(tape, logits.z_xchannel, label);
  lb.comb = tape.value(comb).item();
  lb.max = tape.value(mx).item();
  lb.xchannel = tape.value(xc).item();
  lb.total_var = add(tape, add(tape, add(tape, comb, avg), mx), xc);
  lb.total = tape.value(lb.total_var).item();
  return lb;
}

template <typename T>
std::size_t predict(const Tensor<T>& z_comb) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < z_comb.size(); ++j)
    if (z_comb[j] > z_comb[best]) best = j;
  return best;
}

#define DFB_INSTANTIATE_HEAD(T)                                                                                 \
  template ParamSet<T> init_params<T>(const ModelConfig&, std::uint64_t);                                       \
  template std::vector<bool> active_params<T>(const ModelConfig&, const ParamSet<T>&);                          \
  template Var local_branch<T>(Tape<T>&, Var, const ParamSet<T>&, const ModelConfig&, ConvAlgo);                \
  template PoolResult filter_bank<T>(Tape<T>&, Var, Var, Var);                                                  \
  template BranchLogits head_forward<T>(Tape<T>&, Var, Var, const ParamSet<T>&, const ModelConfig&,             \
                                        const DropoutControl<T>&, ConvAlgo);                                    \
  template BranchLogits model_forward<T>(Tape<T>&, const Tensor<T>&, const ParamSet<T>&, const ModelConfig&,    \
                                         const ForwardOptions<T>&);                                             \
  template LossBreakdown<T> total_loss<T>(Tape<T>&, const BranchLogits&, std::size_t, Variant);                 \
  template std::size_t predict<T>(const Tensor<T>&);

DFB_INSTANTIATE_HEAD(float)
DFB_INSTANTIATE_HEAD(double)

}  // namespace dfb
