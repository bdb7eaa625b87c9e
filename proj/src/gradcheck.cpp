#include "dfb/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>

#include "dfb/head.hpp"
#include "dfb/kvfile.hpp"
#include "dfb/nn_ops.hpp"
#include "dfb/rng.hpp"

namespace dfb {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double GradReport::max_rel_err() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

bool GradReport::pass() const {
  if (!deterministic || entries.empty()) return false;
  for (const auto& e : entries)
    if (!(e.max_rel_err < tolerance) || e.skipped != 0) return false;
  return true;
}

std::string GradReport::table() const {
  std::ostringstream os;
  char line[256];
  os << "gradcheck " << label << "  step=" << step << "  tol=" << tolerance << '\n';
  std::snprintf(line, sizeof(line), "%-24s %7s %7s %7s %12s %7s %14s %14s\n", "param", "count", "refined",
                "skipped", "max_rel_err", "worst", "analytic", "numeric");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line), "%-24s %7zu %7zu %7zu %12.3e %7zu %14.6e %14.6e\n", e.name.c_str(), e.count,
                  e.refined, e.skipped, e.max_rel_err, e.worst_index, e.analytic, e.numeric);
    os << line;
  }
  std::snprintf(line, sizeof(line), "max_rel_err=%.3e deterministic=%s time=%.2fs -> %s\n", max_rel_err(),
                deterministic ? "yes" : "NO", seconds, pass() ? "PASS" : "FAIL");
  os << line;
  return os.str();
}

std::string GradReport::key_values() const {
  std::ostringstream os;
  os << "label=" << label << '\n'
     << "step=" << format_double(step) << '\n'
     << "tolerance=" << format_double(tolerance) << '\n'
     << "deterministic=" << (deterministic ? 1 : 0) << '\n'
     << "seconds=" << format_double(seconds) << '\n'
     << "max_rel_err=" << format_double(max_rel_err()) << '\n'
     << "pass=" << (pass() ? 1 : 0) << '\n';
  for (const auto& e : entries) {
    os << "param." << e.name << ".count=" << e.count << '\n'
       << "param." << e.name << ".max_rel_err=" << format_double(e.max_rel_err) << '\n'
       << "param." << e.name << ".worst_index=" << e.worst_index << '\n'
       << "param." << e.name << ".refined=" << e.refined << '\n'
       << "param." << e.name << ".skipped=" << e.skipped << '\n';
  }
  return os.str();
}

std::vector<std::size_t> piece_signature(const Tape<double>& tape) {
  std::vector<std::size_t> sig;
  for (std::size_t n = 0; n < tape.size(); ++n) {
    const auto& node = tape.node(n);
    if (node.op == "relu") {
      for (double v : tape.value_at(n).values()) sig.push_back(v > 0.0 ? 1 : 0);
    } else if (node.op == "global_max_pool") {
      const Tensor<double>& x = tape.value_at(node.inputs[0]);
      const std::size_t c = x.extent(0), vol = x.size() / c;
      for (std::size_t k = 0; k < c; ++k) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < vol; ++i)
          if (x[k * vol + i] > x[k * vol + best]) best = i;
        sig.push_back(best);
      }
    }
  }
  return sig;
}

GradReport gradcheck(const LossBuilder& build, ParamSet<double> params, const GradCheckOptions& opts,
                     const std::string& label) {
  const auto start = std::chrono::steady_clock::now();
  GradReport report;
  report.label = label;
  report.tolerance = opts.tolerance;
  report.step = opts.step;

  struct Eval {
    double loss;
    std::vector<std::size_t> sig;
  };
  auto eval = [&](const ParamSet<double>& p) {
    Tape<double> tape;
    Var loss = build(tape, p);
    return Eval{tape.value(loss).item(), piece_signature(tape)};
  };

  Gradients<double> analytic;
  double base = 0;
  std::vector<std::size_t> base_sig;
  {
    Tape<double> tape;
    Var loss = build(tape, params);
    base = tape.value(loss).item();
    base_sig = piece_signature(tape);
    analytic = tape.backward(loss, params);
  }
  const double again = eval(params).loss;
  if (std::memcmp(&base, &again, sizeof(double)) != 0) report.deterministic = false;

  for (std::size_t s = 0; s < params.size(); ++s) {
    GradEntry e;
    e.name = params.name(s);
    Tensor<double>& v = params.value(s);
    e.count = v.size();
    bool first = true;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      double h = opts.step;
      std::optional<double> numeric;
      for (int attempt = 0; attempt <= opts.max_refinements; ++attempt, h /= 10.0) {
        v[i] = orig + h;
        const Eval up = eval(params);
        v[i] = orig - h;
        const Eval down = eval(params);
        v[i] = orig;
        if (!opts.kink_aware || (up.sig == base_sig && down.sig == base_sig)) {
          numeric = (up.loss - down.loss) / (2.0 * h);
          if (attempt > 0) ++e.refined;
          break;
        }
      }
      if (!numeric) {
        ++e.skipped;
        continue;
      }
      const double a = analytic.grads[s][i];
      const double err = relative_error(a, *numeric);
      if (first || err > e.max_rel_err) {
        first = false;
        e.max_rel_err = err;
        e.worst_index = i;
        e.analytic = a;
        e.numeric = *numeric;
      }
    }
    report.entries.push_back(e);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops = {"conv",     "pointwise_conv", "avg_pool",    "max_pool",
                                               "upsample", "dense",          "softmax_xent", "cross_channel_pool"};
  return ops;
}

namespace {

// Weighted sum against a fixed random tensor, so every output coordinate
// carries a distinct upstream gradient.
Var project(Tape<double>& tape, Var out, const Tensor<double>& weights) {
  return sum(tape, mul(tape, out, tape.constant(weights)));
}

Tensor<double> distinct_values(Rng& rng, const Shape& shape) {
  Tensor<double> t(shape, 0.0);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 * static_cast<double>(order[i]) + 0.01 * rng.uniform() - 1.0;
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.uniform_int(hi - lo + 1); }

}  // namespace

GradReport op_gradcheck(const std::string& op, std::uint64_t seed, double tolerance) {
  Rng rng(seed, 0x6c);
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  ParamSet<double> params;
  LossBuilder build;
  Tensor<double> proj = Tensor<double>::scalar(1.0);
  Shape out_shape;

  if (op == "conv") {
    const bool temporal = rng.uniform() < 0.5;
    ConvSpec spec;
    spec.in_channels = pick(rng, 1, 3);
    spec.out_channels = pick(rng, 1, 3);
    Shape in{spec.in_channels};
    for (std::size_t a = temporal ? 0 : 1; a < 3; ++a) {
      spec.kernel[a] = pick(rng, 1, 3);
      spec.stride[a] = pick(rng, 1, 2);
      spec.pad[a] = pick(rng, 0, spec.kernel[a] - 1);
      in.push_back(pick(rng, spec.kernel[a], 5));
    }
    params.add("x", rng_normal<double>(rng, in, 0.0, 1.0));
    params.add("w", rng_normal<double>(rng, spec.weight_shape(), 0.0, 0.5));
    params.add("b", rng_normal<double>(rng, {spec.out_channels}, 0.0, 0.5));
    out_shape = spec.output_shape(in);
    build = [spec, &proj](Tape<double>& t, const ParamSet<double>& p) {
      return project(t, conv(t, t.param(p, "x"), t.param(p, "w"), t.param(p, "b"), spec), proj);
    };
  } else if (op == "pointwise_conv") {
    const std::size_t ci = pick(rng, 1, 4), co = pick(rng, 1, 4);
    Shape in{ci, pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    params.add("x", rng_normal<double>(rng, in, 0.0, 1.0));
    params.add("w", rng_normal<double>(rng, {co, ci}, 0.0, 0.5));
    params.add("b", rng_normal<double>(rng, {co}, 0.0, 0.5));
    out_shape = in;
    out_shape[0] = co;
    build = [&proj](Tape<double>& t, const ParamSet<double>& p) {
      return project(t, pointwise_conv(t, t.param(p, "x"), t.param(p, "w"), t.param(p, "b")), proj);
    };
  } else if (op == "avg_pool" || op == "max_pool") {
    const std::size_t c = pick(rng, 1, 4);
    Shape in{c, pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    params.add("x", op == "max_pool" ? distinct_values(rng, in) : rng_normal<double>(rng, in, 0.0, 1.0));
    out_shape = {c};
    const bool is_max = op == "max_pool";
    build = [is_max, &proj](Tape<double>& t, const ParamSet<double>& p) {
      Var x = t.param(p, "x");
      return project(t, is_max ? global_max_pool(t, x).values : global_avg_pool(t, x), proj);
    };
  } else if (op == "upsample") {
    Shape in{pick(rng, 1, 3)};
    if (rng.uniform() < 0.5) in.push_back(pick(rng, 1, 3));
    in.push_back(pick(rng, 1, 4));
    in.push_back(pick(rng, 1, 4));
    params.add("x", rng_normal<double>(rng, in, 0.0, 1.0));
    out_shape = in;
    out_shape[in.size() - 1] *= 2;
    out_shape[in.size() - 2] *= 2;
    build = [&proj](Tape<double>& t, const ParamSet<double>& p) {
      return project(t, upsample_bilinear2x(t, t.param(p, "x")), proj);
    };
  } else if (op == "dense") {
    const std::size_t f = pick(rng, 1, 5), o = pick(rng, 1, 5), b = pick(rng, 1, 3);
    params.add("x", rng_normal<double>(rng, {b, f}, 0.0, 1.0));
    params.add("w", rng_normal<double>(rng, {f, o}, 0.0, 0.5));
    params.add("b", rng_normal<double>(rng, {o}, 0.0, 0.5));
    out_shape = {b, o};
    build = [&proj](Tape<double>& t, const ParamSet<double>& p) {
      return project(t, dense(t, t.param(p, "x"), t.param(p, "w"), t.param(p, "b")), proj);
    };
  } else if (op == "softmax_xent") {
    const std::size_t c = pick(rng, 2, 6);
    const std::size_t label = rng.uniform_int(c);
    params.add("logits", rng_normal<double>(rng, {c}, 0.0, 2.0));
    build = [label](Tape<double>& t, const ParamSet<double>& p) {
      return softmax_xent(t, t.param(p, "logits"), label);
    };
  } else if (op == "cross_channel_pool") {
    const std::size_t n = pick(rng, 1, 4), c = pick(rng, 1, 4);
    params.add("x", rng_normal<double>(rng, {n * c}, 0.0, 1.0));
    out_shape = {c};
    build = [n, c, &proj](Tape<double>& t, const ParamSet<double>& p) {
      return project(t, cross_channel_pool(t, t.param(p, "x"), n, c), proj);
    };
  } else {
    throw Error("gradcheck: unknown op '" + op + "'");
  }
  if (!out_shape.empty()) proj = rng_normal<double>(rng, out_shape, 0.0, 1.0);
  return gradcheck(build, std::move(params), opts, op);
}

GradReport full_head_gradcheck(std::uint64_t seed, double tolerance, double step) {
  ModelConfig cfg;
  cfg.variant = Variant::kGBDFLB;
  cfg.head.classes = 3;
  cfg.head.filters_per_class = 2;
  cfg.head.dropout = 0.5;
  BackboneConfig& bb = cfg.backbone;
  bb.mode = BackboneMode::k3D;
  bb.frames = 4;
  bb.height = 8;
  bb.width = 8;
  bb.channels = 3;
  bb.stem_width = 2;
  bb.stage_widths = {2, 3, 3, 4};
  bb.stage5_width = 4;
  bb.temporal_stride = 2;
  bb.stage_strides = {1, 1, 1, 2, 2};

  ParamSet<double> params = init_params<double>(cfg, seed);
  Rng rng(seed, 0x4ead);
  const Tensor<double> clip = rng_normal<double>(rng, {3, 4, 8, 8}, 0.0, 1.0);
  const std::size_t label = rng.uniform_int(cfg.head.classes);
  // Off-kink starting point: no bias sits at zero, classifier weights are O(1).
  for (std::size_t slot = 0; slot < params.size(); ++slot) {
    const std::string& name = params.name(slot);
    Tensor<double>& v = params.value(slot);
    if (name.ends_with(".b")) v = rng_normal<double>(rng, v.shape(), 0.0, 0.1);
    if (name == "filters.w" || name.starts_with("cls_")) v = rng_normal<double>(rng, v.shape(), 0.0, 0.5);
  }
  auto keep_mask = [&rng](std::size_t n) {
    Tensor<double> m({n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) m[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    return m;
  };
  const Tensor<double> avg_mask = keep_mask(bb.stage5_width);
  const Tensor<double> max_mask = keep_mask(cfg.head.filters());

  LossBuilder build = [&](Tape<double>& tape, const ParamSet<double>& p) {
    ForwardOptions<double> o;
    o.dropout.mode = DropoutMode::kFixedMask;
    o.dropout.avg_mask = &avg_mask;
    o.dropout.max_mask = &max_mask;
    BranchLogits z = model_forward(tape, clip, p, cfg, o);
    return total_loss(tape, z, label, cfg.variant).total_var;
  };
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.step = step;
  return gradcheck(build, std::move(params), opts, "full-head");
}

}  // namespace dfb
