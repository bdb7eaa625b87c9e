#include "dfb/train.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dfb/kvfile.hpp"
#include "dfb/parallel.hpp"
#include "dfb/vten.hpp"

namespace dfb {

// ---------------------------------------------------------------------------
// Run configuration

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("run config: lr must be positive");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    const double m = lr_milestones[i];
    if (!(m >= 0.0 && m <= 1.0)) throw Error("run config: lr_milestones must be fractions in [0, 1]");
    if (i > 0 && !(m > lr_milestones[i - 1])) throw Error("run config: lr_milestones must be strictly increasing");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw Error("run config: lr_decay must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("run config: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw Error("run config: weight_decay must be >= 0");
  if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) throw Error("run config: grad_clip must be >= 0");
  if (batch_size == 0) throw Error("run config: batch_size must be at least 1");
  if (precision != 32 && precision != 64) throw Error("run config: precision must be 32 or 64");
  if (threads == 0) throw Error("run config: threads must be at least 1");
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return format_run_config(a) == format_run_config(b); }

namespace {

std::string bool_str(bool b) { return b ? "true" : "false"; }

template <std::size_t N>
std::array<std::size_t, N> fixed_list(KeyValues& kv, const std::string& key, const std::array<std::size_t, N>& def) {
  std::vector<std::size_t> v = kv.get_sizes(key, std::vector<std::size_t>(def.begin(), def.end()));
  if (v.size() != N) {
    throw Error("run config: key '" + key + "' needs " + std::to_string(N) + " comma-separated values, got " +
                std::to_string(v.size()));
  }
  std::array<std::size_t, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

template <std::size_t N>
std::string fixed_join(const std::array<std::size_t, N>& a) {
  return join_list(std::vector<std::size_t>(a.begin(), a.end()));
}

}  // namespace

TrainConfig parse_run_config(const std::string& text, const std::string& source) {
  KeyValues kv = KeyValues::parse(text, source);
  TrainConfig c;
  ModelConfig& m = c.model;
  BackboneConfig& b = m.backbone;
  m.head.classes = kv.require_size("classes");
  const std::string variant = kv.get_string("variant", to_string(m.variant));
  try {
    m.variant = parse_variant(variant);
  } catch (const Error&) {
    throw Error(source + ": key 'variant': cannot parse '" + variant + "' (expected GB, GB+DF or GB+DF+LB)");
  }
  m.head.filters_per_class = kv.get_size("filters_per_class", m.head.filters_per_class);
  m.head.local_width = kv.get_size("local_width", m.head.local_width);
  m.head.skip_projection = kv.get_bool("skip_projection", m.head.skip_projection);
  m.head.dropout = kv.get_double("dropout", m.head.dropout);

  const std::string mode = kv.get_string("mode", b.is3d() ? "3d" : "2d");
  if (mode == "3d") b.mode = BackboneMode::k3D;
  else if (mode == "2d") b.mode = BackboneMode::k2D;
  else throw Error(source + ": key 'mode': cannot parse '" + mode + "' (expected 2d or 3d)");
  b.segments = kv.get_size("segments", b.segments);
  b.frames = kv.get_size("frames", b.frames);
  b.height = kv.get_size("height", b.height);
  b.width = kv.get_size("width", b.width);
  b.channels = kv.get_size("channels", b.channels);
  b.stem_width = kv.get_size("stem_width", b.stem_width);
  b.stage_widths = fixed_list(kv, "stage_widths", b.stage_widths);
  b.stage5_width = kv.get_size("stage5_width", b.stage5_width);
  b.temporal_stride = kv.get_size("temporal_stride", b.temporal_stride);
  b.stage_strides = fixed_list(kv, "stage_strides", b.stage_strides);
  b.residual = kv.get_bool("residual", b.residual);

  c.lr = kv.get_double("lr", c.lr);
  c.lr_milestones = kv.get_doubles("lr_milestones", c.lr_milestones);
  c.lr_decay = kv.get_double("lr_decay", c.lr_decay);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.epochs = kv.get_size("epochs", c.epochs);
  c.seed = kv.get_u64("seed", c.seed);
  c.precision = kv.get_size("precision", c.precision);
  c.flip = kv.get_bool("flip", c.flip);
  c.eval_train = kv.get_bool("eval_train", c.eval_train);
  c.threads = kv.get_size("threads", c.threads);
  const std::string algo = kv.get_string("conv_algo", "gemm");
  if (algo == "gemm") c.algo = ConvAlgo::kGemm;
  else if (algo == "direct") c.algo = ConvAlgo::kDirect;
  else throw Error(source + ": key 'conv_algo': cannot parse '" + algo + "' (expected gemm or direct)");
  kv.reject_unknown();
  c.validate();
  return c;
}

std::string format_run_config(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  const BackboneConfig& b = m.backbone;
  std::ostringstream os;
  os << "classes=" << m.head.classes << '\n'
     << "variant=" << to_string(m.variant) << '\n'
     << "filters_per_class=" << m.head.filters_per_class << '\n'
     << "local_width=" << m.head.local_width << '\n'
     << "skip_projection=" << bool_str(m.head.skip_projection) << '\n'
     << "dropout=" << format_double(m.head.dropout) << '\n'
     << "mode=" << (b.is3d() ? "3d" : "2d") << '\n'
     << "segments=" << b.segments << '\n'
     << "frames=" << b.frames << '\n'
     << "height=" << b.height << '\n'
     << "width=" << b.width << '\n'
     << "channels=" << b.channels << '\n'
     << "stem_width=" << b.stem_width << '\n'
     << "stage_widths=" << fixed_join(b.stage_widths) << '\n'
     << "stage5_width=" << b.stage5_width << '\n'
     << "temporal_stride=" << b.temporal_stride << '\n'
     << "stage_strides=" << fixed_join(b.stage_strides) << '\n'
     << "residual=" << bool_str(b.residual) << '\n'
     << "lr=" << format_double(c.lr) << '\n'
     << "lr_milestones=" << join_list(c.lr_milestones) << '\n'
     << "lr_decay=" << format_double(c.lr_decay) << '\n'
     << "momentum=" << format_double(c.momentum) << '\n'
     << "weight_decay=" << format_double(c.weight_decay) << '\n'
     << "grad_clip=" << format_double(c.grad_clip) << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "epochs=" << c.epochs << '\n'
     << "seed=" << c.seed << '\n'
     << "precision=" << c.precision << '\n'
     << "flip=" << bool_str(c.flip) << '\n'
     << "eval_train=" << bool_str(c.eval_train) << '\n'
     << "threads=" << c.threads << '\n'
     << "conv_algo=" << (c.algo == ConvAlgo::kGemm ? "gemm" : "direct") << '\n';
  return os.str();
}

TrainConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open run config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

void write_run_config(const TrainConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << format_run_config(cfg);
  if (!f) throw Error("failed writing " + path.string());
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  double lr = cfg.lr;
  for (double m : cfg.lr_milestones) {
    const auto at = static_cast<std::size_t>(std::floor(m * static_cast<double>(total_steps)));
    if (step >= at) lr *= cfg.lr_decay;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// SGD

template <typename T>
SgdState<T> make_sgd_state(const ParamSet<T>& params) {
  SgdState<T> s;
  for (std::size_t i = 0; i < params.size(); ++i) s.velocity.push_back(Tensor<T>::zeros(params.value(i).shape()));
  return s;
}

template <typename T>
double gradient_norm(const Gradients<T>& grads, const std::vector<bool>* active) {
  if (active && active->size() != grads.grads.size()) throw Error("gradient_norm: active mask has the wrong slot count");
  double sq = 0;
  for (std::size_t s = 0; s < grads.grads.size(); ++s) {
    if (active && !(*active)[s]) continue;
    for (const T g : grads.grads[s].values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
void sgd_step(ParamSet<T>& params, const Gradients<T>& grads, T lr, T momentum, T weight_decay, SgdState<T>& state,
              const std::vector<bool>* active) {
  if (grads.grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw Error("sgd_step: expected " + std::to_string(params.size()) + " slots, got " +
                std::to_string(grads.grads.size()) + " gradients and " + std::to_string(state.velocity.size()) +
                " velocities");
  }
  if (active && active->size() != params.size()) throw Error("sgd_step: active mask has the wrong slot count");
  for (std::size_t s = 0; s < params.size(); ++s) {
    const Tensor<T>& g = grads.grads[s];
    Tensor<T>& p = params.value(s);
    Tensor<T>& v = state.velocity[s];
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw Error("sgd_step: shape mismatch for '" + params.name(s) + "': param " + shape_str(p.shape()) +
                  ", grad " + shape_str(g.shape()) + ", velocity " + shape_str(v.shape()));
    }
    if (active && !(*active)[s]) continue;
    const T wd = params.decay(s) ? weight_decay : T(0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + wd * p[i];
      p[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Data

template <typename T>
Dataset<T> load_dataset(const ClipManifest& manifest, const BackboneConfig& backbone) {
  Dataset<T> d;
  d.classes = manifest.classes;
  const Shape expected{backbone.channels, backbone.frames, backbone.height, backbone.width};
  for (const auto& e : manifest.entries) {
    d.clips.push_back(load_clip<T>(manifest, e, expected));
    d.labels.push_back(e.label);
    d.boxes.push_back(e.box);
    d.ids.push_back(e.path);
  }
  return d;
}

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.epoch);
  for (double v : {r.total, r.comb, r.avg, r.max, r.xchannel, r.train_top1, r.val_top1}) s += '\t' + format_double(v);
  return s;
}

MetricsRow parse_metrics_row(const std::string& line) {
  std::vector<std::string> cols;
  std::istringstream is(line);
  std::string c;
  while (std::getline(is, c, '\t')) cols.push_back(c);
  if (cols.size() != 8) throw Error("metrics line needs 8 tab-separated fields, got " + std::to_string(cols.size()));
  static const char* names[] = {"epoch", "L_total", "L_comb", "L_avg", "L_max", "L_xchannel", "train_top1", "val_top1"};
  MetricsRow r;
  auto [p, ec] = std::from_chars(cols[0].data(), cols[0].data() + cols[0].size(), r.epoch);
  if (ec != std::errc() || p != cols[0].data() + cols[0].size() || cols[0].empty()) {
    throw Error("metrics field 'epoch': cannot parse '" + cols[0] + "'");
  }
  double* dst[] = {&r.total, &r.comb, &r.avg, &r.max, &r.xchannel, &r.train_top1, &r.val_top1};
  for (int i = 0; i < 7; ++i) {
    const std::string& f = cols[i + 1];
    auto [q, e] = std::from_chars(f.data(), f.data() + f.size(), *dst[i]);
    if (e != std::errc() || q != f.data() + f.size() || f.empty()) {
      throw Error(std::string("metrics field '") + names[i + 1] + "': cannot parse '" + f + "'");
    }
  }
  return r;
}

std::vector<MetricsRow> read_metrics_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open metrics log " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  return rows;
}

// ---------------------------------------------------------------------------
// Training

namespace {

constexpr std::uint64_t kShuffleStream = 0x5401;
constexpr std::uint64_t kClipStream = 0x5402;

template <typename T>
Tensor<T> flip_width(const Tensor<T>& clip) {
  Tensor<T> out = clip;
  const std::size_t w = clip.extent(clip.rank() - 1);
  const std::size_t rows = clip.size() / w;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < w; ++x) out[r * w + x] = clip[r * w + (w - 1 - x)];
  return out;
}

template <typename T>
struct ClipStep {
  Gradients<T> grads;
  LossBreakdown<T> loss;
  std::size_t prediction = 0;
};

std::string loss_text(double total, double comb, double avg, double max, double xch) {
  std::ostringstream os;
  os << "L_total=" << total << " L_comb=" << comb << " L_avg=" << avg << " L_max=" << max << " L_xchannel=" << xch;
  return os.str();
}

template <typename T>
ClipStep<T> clip_step(const TrainConfig& cfg, const ParamSet<T>& params, const Tensor<T>& clip, std::size_t label,
                      Rng rng, const std::string& where) {
  const ModelConfig& m = cfg.model;
  Rng drop = rng.split(0), aug = rng.split(1), frames = rng.split(2);
  const bool flip = cfg.flip && aug.uniform() < 0.5;
  const Tensor<T> flipped = flip ? flip_width(clip) : Tensor<T>();
  ForwardOptions<T> o;
  o.algo = cfg.algo;
  o.dropout.mode = DropoutMode::kTrain;
  o.dropout.rng = &drop;
  if (!m.backbone.is3d()) {
    o.frames = segment_sample(m.backbone.frames, m.backbone.segments, SampleMode::kTrainRandom, &frames);
  }
  Tape<T> tape;
  BranchLogits z = model_forward(tape, flip ? flipped : clip, params, m, o);
  ClipStep<T> out;
  out.loss = total_loss(tape, z, label, m.variant);
  const LossBreakdown<T>& l = out.loss;
  if (!std::isfinite(l.total) || !std::isfinite(l.comb) || !std::isfinite(l.avg) || !std::isfinite(l.max) ||
      !std::isfinite(l.xchannel)) {
    throw TrainingError("training diverged at " + where + ": non-finite loss (" +
                        loss_text(l.total, l.comb, l.avg, l.max, l.xchannel) + ")");
  }
  const T sum = ((l.comb + l.avg) + l.max) + l.xchannel;
  if (std::memcmp(&sum, &l.total, sizeof(T)) != 0) {
    throw TrainingError("loss identity broken at " + where + ": L_total differs from the sum of its terms (" +
                        loss_text(l.total, l.comb, l.avg, l.max, l.xchannel) + ")");
  }
  out.grads = tape.backward(l.total_var, params);
  out.prediction = predict(tape.value(z.z_comb));
  return out;
}

}  // namespace

template <typename T>
double top1_accuracy(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data, ConvAlgo algo,
                     std::size_t threads) {
  if (data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> preds(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Tape<T> tape;
    ForwardOptions<T> o;
    o.algo = algo;
    preds[i] = predict(tape.value(model_forward(tape, data.clips[i], params, cfg, o).z_comb));
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += preds[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const Dataset<T>& train_set, const Dataset<T>* val_set,
                     const TrainHooks& hooks) {
  cfg.validate();
  const std::size_t classes = cfg.model.head.classes;
  if (train_set.classes != classes) {
    throw Error("training manifest has " + std::to_string(train_set.classes) + " classes but the config has " +
                std::to_string(classes));
  }
  if (val_set && val_set->classes != classes) {
    throw Error("validation manifest has " + std::to_string(val_set->classes) + " classes but the config has " +
                std::to_string(classes));
  }
  if (train_set.size() == 0 && cfg.epochs > 0) throw Error("training manifest has no clips");

  TrainResult<T> result;
  result.params = init_params<T>(cfg.model, cfg.seed);
  ParamSet<T>& params = result.params;
  const std::vector<bool> active = active_params(cfg.model, params);
  SgdState<T> state = make_sgd_state(params);

  const std::size_t n = train_set.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const Rng shuffle_root(cfg.seed, kShuffleStream);
  const Rng clip_root(cfg.seed, kClipStream);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = shuffle_root.split(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);

    double sum_comb = 0, sum_avg = 0, sum_max = 0, sum_xch = 0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t step = epoch * per_epoch + b;
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t count = std::min(cfg.batch_size, n - lo);
      std::vector<ClipStep<T>> outs(count);
      parallel_for(count, cfg.threads, [&](std::size_t j) {
        const std::size_t idx = order[lo + j];
        const std::string where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ", clip '" +
                                  (idx < train_set.ids.size() ? train_set.ids[idx] : std::to_string(idx)) + "'";
        outs[j] = clip_step(cfg, params, train_set.clips[idx], train_set.labels[idx],
                            clip_root.split(step * cfg.batch_size + j), where);
      });
      Gradients<T> grads = std::move(outs[0].grads);
      StepRecord rec;
      rec.step = step;
      for (std::size_t j = 0; j < count; ++j) {
        if (j > 0) grads.accumulate(outs[j].grads);
        const LossBreakdown<T>& l = outs[j].loss;
        rec.total += static_cast<double>(l.total);
        rec.comb += static_cast<double>(l.comb);
        rec.avg += static_cast<double>(l.avg);
        rec.max += static_cast<double>(l.max);
        rec.xchannel += static_cast<double>(l.xchannel);
        correct += outs[j].prediction == train_set.labels[order[lo + j]] ? 1 : 0;
        ++result.identity_checks;
      }
      sum_comb += rec.comb;
      sum_avg += rec.avg;
      sum_max += rec.max;
      sum_xch += rec.xchannel;
      const double inv = 1.0 / static_cast<double>(count);
      rec.total *= inv;
      rec.comb *= inv;
      rec.avg *= inv;
      rec.max *= inv;
      rec.xchannel *= inv;
      grads.scale(static_cast<T>(inv));
      rec.grad_norm = gradient_norm(grads, &active);
      if (cfg.grad_clip > 0 && rec.grad_norm > cfg.grad_clip) grads.scale(static_cast<T>(cfg.grad_clip / rec.grad_norm));
      rec.lr = learning_rate(cfg, step, total_steps);
      sgd_step(params, grads, static_cast<T>(rec.lr), static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay),
               state, &active);
      result.steps.push_back(rec);
    }
    for (std::size_t s = 0; s < params.size(); ++s) {
      if (!params.value(s).all_finite()) {
        throw TrainingError("training diverged in epoch " + std::to_string(epoch) + ": parameter '" + params.name(s) +
                            "' became non-finite");
      }
    }

    MetricsRow row;
    row.epoch = epoch + 1;
    const double inv_n = 1.0 / static_cast<double>(n);
    row.comb = sum_comb * inv_n;
    row.avg = sum_avg * inv_n;
    row.max = sum_max * inv_n;
    row.xchannel = sum_xch * inv_n;
    row.total = ((row.comb + row.avg) + row.max) + row.xchannel;
    row.train_top1 = cfg.eval_train ? top1_accuracy(cfg.model, params, train_set, cfg.algo, cfg.threads)
                                    : static_cast<double>(correct) * inv_n;
    row.val_top1 = val_set ? top1_accuracy(cfg.model, params, *val_set, cfg.algo, cfg.threads)
                           : std::numeric_limits<double>::quiet_NaN();
    result.metrics.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, const ParamSet<T>& params) {
  std::filesystem::create_directories(dir / "params");
  write_run_config(cfg, dir / "config.txt");
  std::ostringstream index;
  index << "DFBCKPT 1 PARAMS=" << params.size() << '\n';
  for (std::size_t s = 0; s < params.size(); ++s) {
    const std::string file = "params/" + params.name(s) + ".vten";
    vten::save(dir / file, params.value(s));
    index << params.name(s) << '\t' << join_list(params.value(s).shape()) << '\t' << file << '\n';
  }
  std::ofstream f(dir / "index.txt", std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint index in " + dir.string());
  f << index.str();
  if (!f) throw Error("failed writing checkpoint index in " + dir.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.config = read_run_config(dir / "config.txt");
  const ParamSet<double> layout = init_params<double>(ck.config.model, ck.config.seed);
  const std::string src = (dir / "index.txt").string();
  std::ifstream f(dir / "index.txt");
  if (!f) throw Error("cannot open checkpoint index " + src);
  std::string line;
  if (!std::getline(f, line)) throw Error(src + ":1: empty checkpoint index");
  const std::string expect_header = "DFBCKPT 1 PARAMS=" + std::to_string(layout.size());
  if (!line.starts_with("DFBCKPT 1")) throw Error(src + ":1: header must start with 'DFBCKPT 1'");
  if (line != expect_header) {
    throw Error(src + ":1: header '" + line + "' does not match the config's layout ('" + expect_header + "')");
  }
  for (std::size_t s = 0; s < layout.size(); ++s) {
    const std::string where = src + ":" + std::to_string(s + 2);
    if (!std::getline(f, line)) throw Error(where + ": missing entry for parameter '" + layout.name(s) + "'");
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, '\t')) cols.push_back(c);
    if (cols.size() != 3) throw Error(where + ": expected 3 tab-separated fields (name, shape, file)");
    if (cols[0] != layout.name(s)) {
      throw Error(where + ": field 'name' is '" + cols[0] + "', expected '" + layout.name(s) + "'");
    }
    const std::string shape = join_list(layout.value(s).shape());
    if (cols[1] != shape) {
      throw Error(where + ": field 'shape' of '" + cols[0] + "' is " + cols[1] + ", expected " + shape);
    }
    if (cols[2].empty() || cols[2].find("..") != std::string::npos) throw Error(where + ": field 'file' is invalid");
    Tensor<double> v = vten::load<double>(dir / cols[2], layout.value(s).shape());
    if (!v.all_finite()) throw Error(where + ": parameter '" + cols[0] + "' holds non-finite values");
    ck.params.add(cols[0], std::move(v), layout.decay(s));
  }
  while (std::getline(f, line)) {
    if (!line.empty()) throw Error(src + ": unexpected trailing entry '" + line + "'");
  }
  return ck;
}

namespace {

template <typename T>
std::vector<MetricsRow> train_dir_impl(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                                       const std::filesystem::path* val_manifest, const std::filesystem::path& out,
                                       const TrainHooks& hooks) {
  const ClipManifest tm = read_manifest(train_manifest);
  const Dataset<T> train_set = load_dataset<T>(tm, cfg.model.backbone);
  std::optional<Dataset<T>> val_set;
  if (val_manifest) val_set = load_dataset<T>(read_manifest(*val_manifest), cfg.model.backbone);
  std::filesystem::create_directories(out);
  const auto log_path = out / "metrics.log";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot open " + log_path.string() + " for writing");
  TrainHooks h;
  h.on_epoch = [&](const MetricsRow& row) {
    log << format_metrics_row(row) << '\n';
    log.flush();
    if (hooks.on_epoch) hooks.on_epoch(row);
  };
  TrainResult<T> r = train<T>(cfg, train_set, val_set ? &*val_set : nullptr, h);
  if (!log) throw Error("failed writing " + log_path.string());
  save_checkpoint(out, cfg, r.params);
  return r.metrics;
}

}  // namespace

std::vector<MetricsRow> train_to_directory(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                                           const std::filesystem::path* val_manifest,
                                           const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.precision == 32) return train_dir_impl<float>(cfg, train_manifest, val_manifest, out_dir, hooks);
  return train_dir_impl<double>(cfg, train_manifest, val_manifest, out_dir, hooks);
}

#define DFB_INSTANTIATE_TRAIN(T)                                                                                      \
  template SgdState<T> make_sgd_state<T>(const ParamSet<T>&);                                                         \
  template double gradient_norm<T>(const Gradients<T>&, const std::vector<bool>*);                                   \
  template void sgd_step<T>(ParamSet<T>&, const Gradients<T>&, T, T, T, SgdState<T>&, const std::vector<bool>*);      \
  template Dataset<T> load_dataset<T>(const ClipManifest&, const BackboneConfig&);                                    \
  template double top1_accuracy<T>(const ModelConfig&, const ParamSet<T>&, const Dataset<T>&, ConvAlgo, std::size_t); \
  template TrainResult<T> train<T>(const TrainConfig&, const Dataset<T>&, const Dataset<T>*, const TrainHooks&);      \
  template void save_checkpoint<T>(const std::filesystem::path&, const TrainConfig&, const ParamSet<T>&);

DFB_INSTANTIATE_TRAIN(float)
DFB_INSTANTIATE_TRAIN(double)

}  // namespace dfb
