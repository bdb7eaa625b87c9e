#include "dfb/backbone.hpp"

#include <cmath>

namespace dfb {

std::size_t BackboneConfig::stage_width(std::size_t stage) const {
  if (stage < 1 || stage > 5) throw Error("stage index must be 1..5");
  return stage == 5 ? stage5_width : stage_widths[stage - 1];
}

ConvSpec BackboneConfig::stem_spec() const {
  return ConvSpec::square(channels, stem_width, 3, is3d(), temporal_stride, 1);
}

ConvSpec BackboneConfig::stage_spec(std::size_t stage, std::size_t j, std::size_t in_width) const {
  const std::size_t w = stage_width(stage);
  if (j == 0) return ConvSpec::square(in_width, w, 3, is3d(), 1, stage_strides[stage - 1]);
  return ConvSpec::square(w, w, 3, is3d(), 1, 1);
}

std::array<Extents3, 6> BackboneConfig::extents() const {
  if (channels == 0 || stem_width == 0 || stage5_width == 0) throw Error("backbone widths must be positive");
  for (std::size_t w : stage_widths)
    if (w == 0) throw Error("backbone widths must be positive");
  for (std::size_t s : stage_strides)
    if (s == 0) throw Error("stage strides must be positive");
  if (frames == 0 || height == 0 || width == 0) throw Error("clip extents must be positive");
  if (!is3d() && (segments == 0 || segments > frames)) {
    throw Error("2D mode needs 1 <= segments <= frames (segments=" + std::to_string(segments) +
                ", frames=" + std::to_string(frames) + ")");
  }
  std::array<Extents3, 6> e{};
  const ConvSpec stem = stem_spec();
  e[0].t = is3d() ? stem.out_extent(0, frames) : 1;
  e[0].h = stem.out_extent(1, height);
  e[0].w = stem.out_extent(2, width);
  std::size_t in_w = stem_width;
  for (std::size_t s = 1; s <= 5; ++s) {
    const ConvSpec c0 = stage_spec(s, 0, in_w);
    e[s].t = e[s - 1].t;
    e[s].h = c0.out_extent(1, e[s - 1].h);
    e[s].w = c0.out_extent(2, e[s - 1].w);
    in_w = stage_width(s);
  }
  if (2 * e[5].h != e[4].h || 2 * e[5].w != e[4].w) {
    throw Error("stage-5 spatial extent (" + std::to_string(e[5].h) + "x" + std::to_string(e[5].w) +
                ") must be exactly half of stage 4 (" + std::to_string(e[4].h) + "x" + std::to_string(e[4].w) + ")");
  }
  return e;
}

Rng param_stream(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return Rng(seed, h);
}

namespace {

template <typename T>
void add_conv(ParamSet<T>& params, const std::string& prefix, const ConvSpec& spec, std::uint64_t seed) {
  const Shape ws = spec.weight_shape();
  const double fan_in = static_cast<double>(ws[1] * ws[2] * ws[3] * ws[4]);
  Rng rng = param_stream(seed, prefix + ".w");
  params.add(prefix + ".w", rng_normal<T>(rng, ws, 0.0, std::sqrt(2.0 / fan_in)), true);
  params.add(prefix + ".b", Tensor<T>::zeros({spec.out_channels}), false);
}

}  // namespace

template <typename T>
void add_backbone_params(ParamSet<T>& params, const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  add_conv(params, "stem", cfg.stem_spec(), seed);
  std::size_t in_w = cfg.stem_width;
  for (std::size_t s = 1; s <= 5; ++s) {
    const std::string p = "stage" + std::to_string(s);
    add_conv(params, p + ".conv0", cfg.stage_spec(s, 0, in_w), seed);
    add_conv(params, p + ".conv1", cfg.stage_spec(s, 1, in_w), seed);
    in_w = cfg.stage_width(s);
  }
}

template <typename T>
void add_stage5_params(ParamSet<T>& params, const BackboneConfig& cfg, const std::string& prefix,
                       std::size_t out_width, std::uint64_t seed) {
  BackboneConfig c = cfg;
  c.stage5_width = out_width;
  const std::size_t in_w = cfg.stage_width(4);
  add_conv(params, prefix + ".conv0", c.stage_spec(5, 0, in_w), seed);
  add_conv(params, prefix + ".conv1", c.stage_spec(5, 1, in_w), seed);
}

std::vector<std::size_t> segment_sample(std::size_t num_frames, std::size_t segments, SampleMode mode, Rng* rng) {
  if (segments == 0) throw Error("segment_sample: need at least one segment");
  if (num_frames < segments) {
    throw Error("segment_sample: " + std::to_string(num_frames) + " frames cannot fill " + std::to_string(segments) +
                " segments");
  }
  std::vector<std::size_t> out(segments);
  for (std::size_t i = 0; i < segments; ++i) {
    const std::size_t lo = i * num_frames / segments;
    const std::size_t hi = (i + 1) * num_frames / segments;
    if (mode == SampleMode::kEvalCenter) {
      out[i] = (lo + hi) / 2;
    } else {
      if (!rng) throw Error("segment_sample: train mode needs a random stream");
      out[i] = lo + rng->uniform_int(hi - lo);
    }
  }
  return out;
}

template <typename T>
Var run_stage(Tape<T>& tape, Var x, const ParamSet<T>& params, const std::string& prefix, const ConvSpec& first,
              const ConvSpec& second, bool residual, ConvAlgo algo) {
  Var h = relu(tape, conv(tape, x, tape.param(params, prefix + ".conv0.w"), tape.param(params, prefix + ".conv0.b"),
                          first, algo));
  Var y = relu(tape, conv(tape, h, tape.param(params, prefix + ".conv1.w"), tape.param(params, prefix + ".conv1.b"),
                          second, algo));
  return residual ? add(tape, h, y) : y;
}

namespace {

template <typename T>
Tensor<T> extract_frame(const Tensor<T>& clip, std::size_t f) {
  const std::size_t c = clip.extent(0), t = clip.extent(1), h = clip.extent(2), w = clip.extent(3);
  Tensor<T> out(Shape{c, h, w}, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    const T* src = clip.data() + (k * t + f) * h * w;
    std::copy(src, src + h * w, out.data() + k * h * w);
  }
  return out;
}

template <typename T>
void forward_volume(Tape<T>& tape, Var x, const BackboneConfig& cfg, const ParamSet<T>& params, ConvAlgo algo,
                    StageFeatures& out) {
  Var h = relu(tape, conv(tape, x, tape.param(params, "stem.w"), tape.param(params, "stem.b"), cfg.stem_spec(), algo));
  std::size_t in_w = cfg.stem_width;
  for (std::size_t s = 1; s <= 5; ++s) {
    h = run_stage(tape, h, params, "stage" + std::to_string(s), cfg.stage_spec(s, 0, in_w), cfg.stage_spec(s, 1, in_w),
                  cfg.residual, algo);
    in_w = cfg.stage_width(s);
    if (s == 1) out.stage1.push_back(h);
    if (s == 4) out.stage4.push_back(h);
    if (s == 5) out.stage5_global.push_back(h);
  }
}

}  // namespace

template <typename T>
StageFeatures backbone_forward(Tape<T>& tape, const Tensor<T>& clip, const BackboneConfig& cfg,
                               const ParamSet<T>& params, ConvAlgo algo, std::vector<std::size_t> frame_indices) {
  const Shape expected{cfg.channels, cfg.frames, cfg.height, cfg.width};
  if (clip.shape() != expected) {
    throw Error("backbone_forward: clip shape " + shape_str(clip.shape()) + " does not match configured " +
                shape_str(expected));
  }
  cfg.validate();
  StageFeatures out;
  if (cfg.is3d()) {
    forward_volume(tape, tape.constant(clip), cfg, params, algo, out);
    return out;
  }
  if (frame_indices.empty()) frame_indices = segment_sample(cfg.frames, cfg.segments, SampleMode::kEvalCenter, nullptr);
  if (frame_indices.size() != cfg.segments) throw Error("backbone_forward: expected one frame index per segment");
  for (std::size_t f : frame_indices) {
    if (f >= cfg.frames) throw Error("backbone_forward: frame index out of range");
    forward_volume(tape, tape.constant(extract_frame(clip, f)), cfg, params, algo, out);
  }
  return out;
}

template <typename T>
Tensor<T> consensus_average(std::span<const Tensor<T>> per_segment) {
  if (per_segment.empty()) throw Error("consensus_average: empty segment list");
  Tensor<T> acc = per_segment[0];
  for (std::size_t i = 1; i < per_segment.size(); ++i) {
    if (per_segment[i].shape() != acc.shape()) throw Error("consensus_average: segment vectors differ in shape");
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += per_segment[i][j];
  }
  const T n = static_cast<T>(per_segment.size());
  for (auto& v : acc.values()) v /= n;
  return acc;
}

#define DFB_INSTANTIATE_BACKBONE(T)                                                                            \
  template void add_backbone_params<T>(ParamSet<T>&, const BackboneConfig&, std::uint64_t);                    \
  template void add_stage5_params<T>(ParamSet<T>&, const BackboneConfig&, const std::string&, std::size_t,     \
                                     std::uint64_t);                                                           \
  template Var run_stage<T>(Tape<T>&, Var, const ParamSet<T>&, const std::string&, const ConvSpec&,            \
                            const ConvSpec&, bool, ConvAlgo);                                                  \
  template StageFeatures backbone_forward<T>(Tape<T>&, const Tensor<T>&, const BackboneConfig&,                \
                                             const ParamSet<T>&, ConvAlgo, std::vector<std::size_t>);          \
  template Tensor<T> consensus_average<T>(std::span<const Tensor<T>>);

DFB_INSTANTIATE_BACKBONE(float)
DFB_INSTANTIATE_BACKBONE(double)

}  // namespace dfb
