// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfb/eval.hpp"
#include "dfb/gradcheck.hpp"
#include "dfb/synth.hpp"
#include "dfb/train.hpp"
#include "dfb/vten.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace dfb;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<double> to_vec(const Tensor<double>& t) { return std::vector<double>(t.data(), t.data() + t.size()); }

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

// ---------------------------------------------------------------------------
// Shared experiment setup

// Ablation dataset: the clip geometry is fixed by the criterion; patch size,
// amplitude and decoys set the difficulty.
SynthConfig ablation_data(std::uint64_t seed) {
  SynthConfig s;
  s.classes = 8;
  s.train_per_class = 100;
  s.val_per_class = 30;
  s.frames = 8;
  s.height = s.width = 32;
  s.patch_frames = 3;
  s.patch_height = s.patch_width = 8;
  s.signal_amplitude = 3.0;
  s.seed = seed;
  return s;
}

TrainConfig ablation_run(Variant v, std::uint64_t seed) {
  TrainConfig c;
  c.model.variant = v;
  c.model.head.classes = 8;
  c.model.backbone.residual = true;
  c.precision = 32;
  c.batch_size = 4;
  c.lr = 0.005;
  c.grad_clip = 5;
  c.epochs = 8;
  c.seed = seed;
  return c;
}

template <typename T>
Dataset<T> in_memory(const SynthConfig& s, const std::string& split) {
  Dataset<T> d;
  d.classes = s.classes;
  const std::size_t n = (split == "train" ? s.train_per_class : s.val_per_class) * s.classes;
  for (std::size_t i = 0; i < n; ++i) {
    SynthClip c = synth_clip(s, split, i);
    d.clips.push_back(c.clip.cast<T>());
    d.labels.push_back(c.label);
    d.boxes.push_back(c.box);
    d.ids.push_back(split + "/" + std::to_string(i));
  }
  return d;
}

// Loss-identity and branch-isolation evidence gathered from every training run.
struct RunLedger {
  std::size_t runs = 0;
  std::size_t identity_checks = 0;
  std::size_t identity_failures = 0;
  std::size_t evaluated_clips = 0;
  std::size_t comb_violations = 0;
  std::size_t gb_runs = 0;
  std::size_t gb_frozen_slots = 0;
  std::size_t gb_moved_slots = 0;
  std::vector<std::string> notes;
};

template <typename T>
TrainResult<T> tracked_train(RunLedger& ledger, const TrainConfig& cfg, const Dataset<T>& data) {
  ++ledger.runs;
  try {
    TrainResult<T> r = train<T>(cfg, data);
    ledger.identity_checks += r.identity_checks;
    if (cfg.model.variant == Variant::kGB) {
      ++ledger.gb_runs;
      const ParamSet<T> init = init_params<T>(cfg.model, cfg.seed);
      const auto active = active_params(cfg.model, init);
      for (std::size_t s = 0; s < init.size(); ++s) {
        if (active[s]) continue;
        ++ledger.gb_frozen_slots;
        if (!bit_equal(init.value(s), r.params.value(s))) {
          ++ledger.gb_moved_slots;
          ledger.notes.push_back("GB run moved " + init.name(s));
        }
      }
    }
    return r;
  } catch (const TrainingError& e) {
    if (std::string(e.what()).find("identity") != std::string::npos) ++ledger.identity_failures;
    throw;
  }
}

template <typename T>
EvalReport tracked_eval(RunLedger& ledger, const ModelConfig& cfg, const ParamSet<T>& p, const Dataset<T>& data) {
  EvalReport r = evaluate(cfg, p, data);
  ledger.evaluated_clips += r.clips;
  ledger.comb_violations += r.comb_identity_violations;
  return r;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  Outcome o;
  const GradReport full = full_head_gradcheck(1);
  double worst_op = 0;
  std::string worst_name;
  for (const auto& op : gradcheck_ops())
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const GradReport r = op_gradcheck(op, seed, 1e-6);
      if (!r.pass()) o.pass = false;
      if (r.max_rel_err() >= worst_op) {
        worst_op = r.max_rel_err();
        worst_name = op;
      }
    }
  const double secs = seconds_since(t0);
  o.pass = o.pass && full.pass() && full.max_rel_err() < 1e-5 && worst_op < 1e-6 && secs < 60;
  o.detail = fmt("full-head max rel err %.2e (< 1e-5); worst per-op %.2e in %s (< 1e-6); %zu ops x 3 seeds; %.1f s (< 60)",
                 full.max_rel_err(), worst_op, worst_name.c_str(), gradcheck_ops().size(), secs);
  return o;
}

Outcome oracle_equivalence() {
  Rng rng(20240601);
  const std::size_t trials = 100;
  double conv_err = 0, avg_err = 0, max_err = 0, up_err = 0, xc_err = 0;
  std::size_t argmax_mismatch = 0;
  auto ext = [&] { return 1 + rng.uniform_int(4); };
  std::size_t conv_done = 0;
  while (conv_done < trials) {
    const bool planar = conv_done % 2 == 1;
    ConvSpec s;
    s.in_channels = ext();
    s.out_channels = ext();
    for (std::size_t a = 0; a < 3; ++a) {
      s.kernel[a] = 1 + rng.uniform_int(3);
      s.stride[a] = 1 + rng.uniform_int(2);
      s.pad[a] = rng.uniform_int(s.kernel[a]);
    }
    if (planar) {
      s.kernel[0] = 1;
      s.pad[0] = 0;
    }
    const Shape xs = planar ? Shape{s.in_channels, ext(), ext()} : Shape{s.in_channels, ext(), ext(), ext()};
    try {
      (void)s.output_shape(xs);
    } catch (const Error&) {
      continue;
    }
    const auto x = oracle::random(rng, xs);
    const auto w = oracle::random(rng, s.weight_shape());
    const auto b = oracle::random(rng, {s.out_channels});
    const auto ref = oracle::conv(x, w, b, s);
    conv_err = std::max({conv_err, oracle::max_abs_diff(conv_forward(x, w, b, s, ConvAlgo::kDirect), ref),
                         oracle::max_abs_diff(conv_forward(x, w, b, s, ConvAlgo::kGemm), ref)});
    ++conv_done;
  }
  for (std::size_t t = 0; t < trials; ++t) {
    const auto x = oracle::random(rng, {ext(), ext(), ext(), ext()});
    Tape<double> tape;
    const Var xv = tape.constant(x);
    avg_err = std::max(avg_err, oracle::max_abs_diff(to_vec(tape.value(global_avg_pool(tape, xv))), oracle::avg_pool(x)));
    PoolResult mp = global_max_pool(tape, xv);
    const auto mref = oracle::max_pool(x);
    const auto& mv = tape.value(mp.values);
    max_err = std::max(max_err, oracle::max_abs_diff(to_vec(mv), mref.values));
    if (mp.argmax != mref.argmax) ++argmax_mismatch;
    up_err = std::max(up_err, oracle::max_abs_diff(tape.value(upsample_bilinear2x(tape, xv)), oracle::upsample2x(x)));
    const std::size_t n = ext(), c = 1 + ext();
    const auto m = oracle::random(rng, {n * c});
    const auto& z = tape.value(cross_channel_pool(tape, tape.constant(m), n, c));
    xc_err = std::max(xc_err, oracle::max_abs_diff(to_vec(z), oracle::block_mean(to_vec(m), n, c)));
  }
  Outcome o;
  const double worst = std::max({conv_err, avg_err, max_err, up_err, xc_err});
  o.pass = worst <= 1e-12 && argmax_mismatch == 0;
  o.detail = fmt("%zu trials each, shapes <= 4x4x4x4; max abs diff conv %.1e (direct+gemm, 2D+3D), avg %.1e, max %.1e "
                 "(argmax mismatches %zu), upsample %.1e, cross-channel %.1e (<= 1e-12)",
                 trials, conv_err, avg_err, max_err, argmax_mismatch, up_err, xc_err);
  return o;
}

Outcome uniform_logit_loss() {
  double worst = 0;
  for (std::size_t c = 2; c <= 16; ++c) {
    Tape<double> tape;
    BranchLogits z;
    z.z_avg = z.z_xchannel = z.z_max = z.z_comb = tape.constant(Tensor<double>({c}, 0.0));
    for (std::size_t label = 0; label < c; ++label) {
      const auto lb = total_loss(tape, z, label, Variant::kGBDFLB);
      for (double v : {lb.comb, lb.avg, lb.max, lb.xchannel}) worst = std::max(worst, std::fabs(v - std::log(double(c))));
    }
  }
  Outcome o;
  o.pass = worst <= 1e-12;
  o.detail = fmt("max |L - ln C| over C = 2..16, every label, every term: %.1e (<= 1e-12)", worst);
  return o;
}

Outcome loss_identity(const RunLedger& l, const Outcome& uniform) {
  Outcome o;
  o.pass = uniform.pass && l.identity_failures == 0 && l.identity_checks > 0;
  o.detail = fmt("%zu training runs, %zu per-clip bit-exact checks of L_total = L_comb + L_avg + L_max + L_xchannel, "
                 "%zu failures; %s",
                 l.runs, l.identity_checks, l.identity_failures, uniform.detail.c_str());
  return o;
}

Outcome branch_isolation(const RunLedger& l) {
  Outcome o;
  o.pass = l.gb_runs > 0 && l.gb_moved_slots == 0 && l.comb_violations == 0 && l.evaluated_clips > 0;
  o.detail = fmt("%zu GB runs: %zu of %zu filter-bank/local-branch slots changed; z_comb != z_avg + z_xchannel + z_max "
                 "on %zu of %zu evaluated clips",
                 l.gb_runs, l.gb_moved_slots, l.gb_frozen_slots, l.comb_violations, l.evaluated_clips);
  for (const auto& n : l.notes) o.detail += "; " + n;
  return o;
}

struct AblationResult {
  Outcome ablation;
  Outcome localization;
};

AblationResult ablation_and_localization(RunLedger& ledger, std::size_t seeds) {
  const auto t0 = Clock::now();
  const Variant variants[] = {Variant::kGB, Variant::kGBDF, Variant::kGBDFLB};
  double sum[3] = {0, 0, 0};
  std::string per_seed;
  std::size_t hits = 0, clips = 0;
  double class_rate_sum = 0, best_class = 0;
  std::size_t class_count = 0;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const SynthConfig s = ablation_data(seed);
    const Dataset<float> tr = in_memory<float>(s, "train"), va = in_memory<float>(s, "val");
    per_seed += fmt("seed %llu:", static_cast<unsigned long long>(seed));
    for (int v = 0; v < 3; ++v) {
      const TrainConfig cfg = ablation_run(variants[v], seed);
      const TrainResult<float> r = tracked_train(ledger, cfg, tr);
      const EvalReport rep = tracked_eval(ledger, cfg.model, r.params, va);
      sum[v] += rep.top1;
      per_seed += fmt(" %s %.1f", to_string(variants[v]).c_str(), 100 * rep.top1);
      std::printf("  [ablation] seed %llu %-8s val top-1 %.2f%%  (%.0f s elapsed)\n",
                  static_cast<unsigned long long>(seed), to_string(variants[v]).c_str(), 100 * rep.top1,
                  seconds_since(t0));
      std::fflush(stdout);
      if (variants[v] == Variant::kGBDFLB && seed == 1) {
        for (const ClassHitRate& c : class_hit_rates(cfg.model, r.params, va, true)) {
          hits += c.hits;
          clips += c.clips;
          if (c.clips > 0) {
            class_rate_sum += c.rate;
            best_class = std::max(best_class, c.rate);
            ++class_count;
          }
        }
      }
    }
    per_seed += "; ";
  }
  const double secs = seconds_since(t0);
  const double gb = 100 * sum[0] / seeds, df = 100 * sum[1] / seeds, lb = 100 * sum[2] / seeds;
  AblationResult out;
  out.ablation.pass = df >= gb + 3.0 && lb >= df - 1.0 && lb >= gb + 5.0 && secs < 1800;
  out.ablation.detail = fmt("mean val top-1 over %zu seeds: GB %.2f, GB+DF %.2f, GB+DF+LB %.2f; need GB+DF >= GB+3 (%+.2f), "
                            "GB+DF+LB >= GB+DF-1 (%+.2f), GB+DF+LB >= GB+5 (%+.2f); %.0f s (< 1800) in 32-bit; ",
                            seeds, gb, df, lb, df - gb, lb - df, lb - gb, secs) +
                        per_seed;

  const SynthConfig s = ablation_data(1);
  const ModelConfig m = ablation_run(Variant::kGBDFLB, 1).model;
  const double area = random_hit_rate_ratio(1, s.height, s.width, 1, s.patch_height, s.patch_width);
  const double volume =
      random_hit_rate_ratio(s.frames, s.height, s.width, s.patch_frames, s.patch_height, s.patch_width);
  const double cell = random_cell_hit_rate(m, s.patch_frames, s.patch_height, s.patch_width);
  const double rate = clips ? static_cast<double>(hits) / static_cast<double>(clips) : 0.0;
  out.localization.pass = clips > 0 && rate >= 0.60 && area <= 0.25;
  out.localization.detail =
      fmt("best per-class filter hit-rate %.1f%% (%zu/%zu correctly classified val clips, mean over %zu classes "
          "%.1f%%, best class %.1f%%; >= 60%%); random baseline %.2f%% by patch/clip area ratio (<= 25%%), "
          "%.2f%% by volume ratio, %.2f%% for a uniformly random feature cell",
          100 * rate, hits, clips, class_count, class_count ? 100 * class_rate_sum / class_count : 0.0,
          100 * best_class, 100 * area, 100 * volume, 100 * cell);
  return out;
}

Outcome determinism(RunLedger& ledger, const fs::path& work) {
  SynthConfig s;
  s.classes = 3;
  s.train_per_class = 4;
  s.val_per_class = 2;
  s.patch_height = s.patch_width = 8;
  s.signal_amplitude = 3;
  const SynthOutput data = generate(s, work / "det_data");
  TrainConfig c;
  c.model.head.classes = 3;
  c.batch_size = 4;
  c.epochs = 3;
  c.lr = 0.005;
  c.precision = 32;
  c.seed = 11;
  std::string logs[2], params[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = work / ("det_run" + std::to_string(i));
    fs::remove_all(out);
    ++ledger.runs;
    train_to_directory(c, data.train_manifest, &data.val_manifest, out);
    logs[i] = slurp(out / "metrics.log");
    for (const auto& e : fs::directory_iterator(out / "params")) params[i] += slurp(e.path());
  }
  Outcome o;
  o.pass = !logs[0].empty() && logs[0] == logs[1] && params[0] == params[1];
  o.detail = fmt("two runs with seed %llu: metrics.log %s (%zu bytes), checkpoint parameters %s",
                 static_cast<unsigned long long>(c.seed), logs[0] == logs[1] ? "bit-identical" : "DIFFER",
                 logs[0].size(), params[0] == params[1] ? "bit-identical" : "DIFFER");
  return o;
}

Outcome micro_overfit(RunLedger& ledger) {
  SynthConfig s = ablation_data(7);
  s.classes = 2;
  s.train_per_class = 10;
  TrainConfig c = ablation_run(Variant::kGBDFLB, 7);
  c.model.head.classes = 2;
  c.epochs = 30;
  const Dataset<float> tr = in_memory<float>(s, "train");
  const TrainResult<float> r = tracked_train(ledger, c, tr);
  const EvalReport rep = tracked_eval(ledger, c.model, r.params, tr);
  Outcome o;
  o.pass = tr.size() == 20 && rep.top1 == 1.0;
  o.detail = fmt("C=2, %zu clips, %zu epochs: train top-1 %.1f%% (eval mode; must be 100%%), final L_total %.4f",
                 tr.size(), c.epochs, 100 * rep.top1, r.metrics.back().total);
  return o;
}

// Every malformed input must raise dfb::Error whose message names the field.
struct DiagCheck {
  std::size_t cases = 0;
  std::vector<std::string> failures;

  void expect(const std::string& what, const std::string& needle, const std::function<void()>& fn) {
    ++cases;
    try {
      fn();
      failures.push_back(what + ": accepted");
    } catch (const Error& e) {
      if (std::string(e.what()).find(needle) == std::string::npos)
        failures.push_back(what + ": message '" + e.what() + "' lacks '" + needle + "'");
    } catch (const std::exception& e) {
      failures.push_back(what + ": non-diagnostic exception " + e.what());
    }
  }
  // Fuzzed input: either parses or raises dfb::Error.
  void survive(const std::string& what, const std::function<void()>& fn) {
    ++cases;
    try {
      fn();
    } catch (const Error&) {
    } catch (const std::exception& e) {
      failures.push_back(what + ": non-diagnostic exception " + e.what());
    }
  }
};

Outcome file_formats(const fs::path& work) {
  const fs::path dir = work / "formats";
  fs::create_directories(dir);
  Rng rng(77);
  std::size_t roundtrips = 0, roundtrip_fail = 0;
  DiagCheck diag;

  // VTEN
  for (int i = 0; i < 40; ++i) {
    Shape shape(1 + rng.uniform_int(5));
    for (auto& e : shape) e = 1 + rng.uniform_int(4);
    const auto d = rng_normal<double>(rng, shape, 0, 1);
    const auto f = rng_normal<float>(rng, shape, 0, 1);
    vten::save(dir / "d.vten", d);
    vten::save(dir / "f.vten", f);
    const std::string bytes = slurp(dir / "d.vten");
    const auto d2 = vten::load<double>(dir / "d.vten");
    vten::save(dir / "d2.vten", d2);
    roundtrips += 2;
    if (!bit_equal(d, d2) || slurp(dir / "d2.vten") != bytes) ++roundtrip_fail;
    if (!bit_equal(f, vten::load<float>(dir / "f.vten"))) ++roundtrip_fail;
  }
  {
    std::ostringstream os;
    vten::write(os, Tensor<double>({2, 3}, 1.5));
    const std::string good = os.str();
    auto bad = [&](std::string bytes, const std::string& what, const std::string& needle) {
      diag.expect("VTEN " + what, needle, [bytes] {
        std::istringstream is(bytes);
        vten::read_any(is, "blob");
      });
    };
    bad("XTEN" + good.substr(4), "magic", "magic");
    bad(good.substr(0, 4) + char(9) + good.substr(5), "version", "version");
    bad(good.substr(0, 5) + char(5) + good.substr(6), "dtype", "dtype");
    bad(good.substr(0, 6) + char(0) + good.substr(7), "rank", "rank");
    bad(good.substr(0, 7) + char(0) + good.substr(8), "zero extent", "extent");
    bad(good.substr(0, 10), "short extents", "extents");
    bad(good.substr(0, good.size() - 1), "truncated payload", "truncated");
    vten::save(dir / "r2.vten", Tensor<double>({2, 3}, 0.0));
    diag.expect("VTEN expected shape", "[3,2]", [&] { vten::load<double>(dir / "r2.vten", Shape{3, 2}); });
    for (std::size_t cut = 0; cut < good.size(); ++cut)
      diag.expect("VTEN prefix " + std::to_string(cut), "blob", [&] {
        std::istringstream is(good.substr(0, cut));
        vten::read_any(is, "blob");
      });
    for (int i = 0; i < 200; ++i) {
      std::string b = good;
      b[rng.uniform_int(b.size())] = static_cast<char>(rng.uniform_int(256));
      diag.survive("VTEN byte flip", [b] {
        std::istringstream is(b);
        vten::read_any(is, "blob");
      });
    }
  }

  // Manifest
  for (int i = 0; i < 20; ++i) {
    ClipManifest m;
    m.classes = 2 + rng.uniform_int(10);
    m.split = i % 2 ? "train" : "val";
    for (std::size_t k = rng.uniform_int(30); k > 0; --k)
      m.entries.push_back({"c/" + std::to_string(rng.uniform_int(1000)) + ".vten", rng.uniform_int(m.classes),
                           PatchBox{rng.uniform_int(8), rng.uniform_int(30), rng.uniform_int(30), 1 + rng.uniform_int(3),
                                    1 + rng.uniform_int(8), 1 + rng.uniform_int(8)}});
    write_manifest(m, dir / "m.manifest");
    const std::string bytes = slurp(dir / "m.manifest");
    const ClipManifest back = read_manifest(dir / "m.manifest", false);
    write_manifest(back, dir / "m2.manifest");
    ++roundtrips;
    if (!(back == m) || slurp(dir / "m2.manifest") != bytes) ++roundtrip_fail;
  }
  {
    const std::string hdr = "DFBMANIFEST 1 C=4 SPLIT=train\n";
    auto bad = [&](const std::string& text, const std::string& what, const std::string& needle) {
      write_bytes(dir / "bad.manifest", text);
      diag.expect("manifest " + what, needle, [&] { read_manifest(dir / "bad.manifest", false); });
    };
    bad(hdr + "a\t4\t0,0,0,1,1,1\n", "label out of range", "'label'");
    bad(hdr + "a\tz\t0,0,0,1,1,1\n", "label not a number", "'label'");
    bad(hdr + "a\t1\t0,0,0,1,1\n", "short box", "'box'");
    bad(hdr + "a\t1\t0,0,x,1,1,1\n", "box field", "'box.x0'");
    bad(hdr + "\t1\t0,0,0,1,1,1\n", "empty path", "'path'");
    bad(hdr + "a\t1\n", "missing columns", "tab-separated");
    bad("DFBMANIFEST 1 SPLIT=train\n", "missing C", "'C'");
    bad("DFBMANIFEST 1 C=4\n", "missing split", "'SPLIT'");
    bad("DFBMANIFEST 2 C=4 SPLIT=x\n", "version", "version");
    bad(hdr + "a\t0\t0,0,0,1,1,1\nb\t9\t0,0,0,1,1,1\n", "line number", ":3");
    write_bytes(dir / "files.manifest", hdr + "missing.vten\t0\t0,0,0,1,1,1\n");
    diag.expect("manifest missing clip", "missing.vten", [&] { read_manifest(dir / "files.manifest"); });
    const std::string good = hdr + "a.vten\t3\t1,2,3,4,5,6\n";
    for (int i = 0; i < 200; ++i) {
      std::string b = good;
      b[rng.uniform_int(b.size())] = static_cast<char>(rng.uniform_int(256));
      write_bytes(dir / "fuzz.manifest", b);
      diag.survive("manifest byte flip", [&] { read_manifest(dir / "fuzz.manifest", false); });
    }
  }

  // Run configuration
  {
    TrainConfig c;
    c.model.head.classes = 8;
    write_run_config(c, dir / "run.cfg");
    ++roundtrips;
    if (!(read_run_config(dir / "run.cfg") == c)) ++roundtrip_fail;
    for (int i = 0; i < 20; ++i) {
      TrainConfig r;
      r.model.head.classes = 2 + rng.uniform_int(20);
      r.model.variant = static_cast<Variant>(rng.uniform_int(3));
      r.model.backbone.mode = rng.uniform_int(2) ? BackboneMode::k2D : BackboneMode::k3D;
      r.lr = rng.uniform() * 0.1 + 1e-6;
      r.momentum = rng.uniform() * 0.99;
      r.weight_decay = rng.uniform() * 1e-3;
      r.batch_size = 1 + rng.uniform_int(64);
      r.epochs = rng.uniform_int(100);
      r.seed = rng.next_u64();
      r.lr_milestones = {0.25 + 0.1 * rng.uniform(), 0.6 + 0.3 * rng.uniform()};
      r.flip = rng.uniform_int(2);
      const std::string text = format_run_config(r);
      const TrainConfig back = parse_run_config(text);
      ++roundtrips;
      if (!(back == r) || format_run_config(back) != text) ++roundtrip_fail;
    }
    auto bad = [&](const std::string& text, const std::string& what, const std::string& needle) {
      diag.expect("run config " + what, needle, [&] { parse_run_config(text); });
    };
    bad("classes=4\nlr=abc\n", "lr", "'lr'");
    bad("lr=0.1\n", "missing classes", "'classes'");
    bad("classes=4\nmomentun=0.9\n", "unknown key", "'momentun'");
    bad("classes=4\nbatch_size=-2\n", "negative size", "'batch_size'");
    bad("classes=4\nvariant=GB+LB\n", "variant", "'variant'");
    bad("classes=4\nstage_strides=1,2\n", "list length", "'stage_strides'");
    bad("classes=4\nclasses=5\n", "duplicate", "'classes'");
    bad("classes=4\nprecision=16\n", "precision", "precision");
    bad("classes=4\nlr\n", "no equals sign", "key=value");
  }

  // Checkpoint
  {
    TrainConfig c;
    c.model.head.classes = 4;
    c.precision = 32;
    const ParamSet<float> p32 = init_params<float>(c.model, 5);
    save_checkpoint(dir / "ck32", c, p32);
    const Checkpoint back32 = load_checkpoint(dir / "ck32");
    ++roundtrips;
    bool ok = back32.config == c && back32.params.names() == p32.names();
    for (std::size_t s = 0; ok && s < p32.size(); ++s) ok = bit_equal(back32.params.value(s).cast<float>(), p32.value(s));
    if (!ok) ++roundtrip_fail;
    c.precision = 64;
    ParamSet<double> p64 = init_params<double>(c.model, 6);
    p64.value(0)[0] = 0.1 + 0.2;
    save_checkpoint(dir / "ck64", c, p64);
    const Checkpoint back64 = load_checkpoint(dir / "ck64");
    ++roundtrips;
    ok = back64.config == c;
    for (std::size_t s = 0; ok && s < p64.size(); ++s) ok = bit_equal(back64.params.value(s), p64.value(s));
    if (!ok) ++roundtrip_fail;

    const std::string index = slurp(dir / "ck64" / "index.txt");
    auto corrupt = [&](const std::string& from, const std::string& to, const std::string& what,
                       const std::string& needle) {
      fs::remove_all(dir / "ckbad");
      fs::copy(dir / "ck64", dir / "ckbad", fs::copy_options::recursive);
      std::string text = index;
      text.replace(text.find(from), from.size(), to);
      write_bytes(dir / "ckbad" / "index.txt", text);
      diag.expect("checkpoint " + what, needle, [&] { load_checkpoint(dir / "ckbad"); });
    };
    corrupt("DFBCKPT 1", "DFBCKPT 7", "header", "header");
    corrupt("stem.w", "stem.v", "name", "'name'");
    corrupt("8,3,3,3,3", "8,3,3,3,2", "shape", "'shape'");
    corrupt("params/stem.w.vten", "../stem.w.vten", "file", "'file'");
    fs::remove_all(dir / "ckbad");
    fs::copy(dir / "ck64", dir / "ckbad", fs::copy_options::recursive);
    const std::string w = slurp(dir / "ckbad" / "params" / "stem.w.vten");
    write_bytes(dir / "ckbad" / "params" / "stem.w.vten", w.substr(0, w.size() - 4));
    diag.expect("checkpoint truncated tensor", "truncated", [&] { load_checkpoint(dir / "ckbad"); });
    fs::remove(dir / "ckbad" / "config.txt");
    diag.expect("checkpoint missing config", "config", [&] { load_checkpoint(dir / "ckbad"); });
  }

  Outcome o;
  o.pass = roundtrip_fail == 0 && diag.failures.empty();
  o.detail = fmt("%zu round-trips (VTEN, manifest, run config, checkpoint at 32/64-bit), %zu not bit-exact; "
                 "%zu malformed/fuzzed inputs, %zu without a named-field diagnostic",
                 roundtrips, roundtrip_fail, diag.cases, diag.failures.size());
  for (std::size_t i = 0; i < std::min<std::size_t>(diag.failures.size(), 5); ++i) o.detail += "; " + diag.failures[i];
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work = (fs::temp_directory_path() / "dfb_acceptance").string();
  std::size_t seeds = 3;
  std::vector<std::string> only;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--seeds", seeds, "Ablation seeds")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "Run only these criteria (gradient, oracle, loss, isolation, ablation, "
                                  "localization, determinism, overfit, formats)");
  CLI11_PARSE(app, argc, argv);
  auto want = [&](const std::string& name) { return only.empty() || std::find(only.begin(), only.end(), name) != only.end(); };

  fs::remove_all(work);
  fs::create_directories(work);
  const auto t0 = Clock::now();
  RunLedger ledger;
  std::vector<std::pair<std::string, Outcome>> results;
  auto run = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, o);
  };

  if (want("gradient")) run("gradient-correctness", gradient_correctness);
  if (want("oracle")) run("oracle-equivalence", oracle_equivalence);
  if (want("formats")) run("file-formats", [&] { return file_formats(work); });
  if (want("determinism")) run("determinism", [&] { return determinism(ledger, work); });
  if (want("overfit")) run("micro-overfit", [&] { return micro_overfit(ledger); });
  if (want("ablation") || want("localization") || want("isolation") || want("loss")) {
    AblationResult ab;
    bool ran = false;
    try {
      ab = ablation_and_localization(ledger, seeds);
      ran = true;
    } catch (const std::exception& e) {
      ab.ablation = {false, std::string("threw: ") + e.what()};
      ab.localization = ab.ablation;
    }
    if (want("ablation")) run("ablation-trend", [&] { return ab.ablation; });
    if (want("localization")) run("localization", [&] { return ab.localization; });
    if (want("loss")) run("loss-identity", [&] { return loss_identity(ledger, uniform_logit_loss()); });
    if (want("isolation"))
      run("branch-isolation", [&] { return ran ? branch_isolation(ledger) : Outcome{false, "ablation runs failed"}; });
  }
  std::size_t failed = 0;
  for (const auto& [name, o] : results) failed += o.pass ? 0 : 1;
  std::printf("%zu of %zu criteria passed in %.0f s\n", results.size() - failed, results.size(), seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
