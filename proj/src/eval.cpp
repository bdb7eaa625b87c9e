#include "dfb/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "dfb/kvfile.hpp"
#include "dfb/parallel.hpp"

namespace dfb {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

MetaMap parse_meta_map(const std::string& text, std::size_t classes, const std::string& source) {
  MetaMap m;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(where + ": expected '<class-index>\\t<meta-name>'");
    const std::string idx = line.substr(0, tab);
    const std::string name = line.substr(tab + 1);
    std::size_t c = 0;
    auto [p, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), c);
    if (idx.empty() || ec != std::errc() || p != idx.data() + idx.size()) {
      throw Error(where + ": field 'class' is not a class index: '" + idx + "'");
    }
    if (c >= classes) {
      throw Error(where + ": unknown class " + std::to_string(c) + " (model has " + std::to_string(classes) +
                  " classes)");
    }
    if (name.empty()) throw Error(where + ": field 'meta' is empty");
    m.entries.emplace_back(c, name);
  }
  return m;
}

MetaMap read_meta_map(const std::filesystem::path& path, std::size_t classes) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open meta map " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_meta_map(ss.str(), classes, path.string());
}

std::vector<ConfusedPair> top_confused_pairs(const EvalReport& report, std::size_t k) {
  if (k == 0) throw Error("top_confused_pairs: k must be at least 1");
  std::vector<ConfusedPair> pairs;
  for (std::size_t r = 0; r < report.confusion.size(); ++r)
    for (std::size_t c = 0; c < report.confusion[r].size(); ++c)
      if (r != c && report.confusion[r][c] > 0) pairs.push_back({r, c, report.confusion[r][c]});
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const ConfusedPair& a, const ConfusedPair& b) { return a.count > b.count; });
  if (pairs.size() > k) pairs.resize(k);
  return pairs;
}

EvalReport summarize_scores(const std::vector<std::vector<double>>& scores, const std::vector<std::size_t>& labels,
                            std::size_t classes, const MetaMap* meta, std::size_t confused_k) {
  if (scores.size() != labels.size()) throw Error("summarize_scores: scores and labels differ in length");
  EvalReport r;
  r.classes = classes;
  r.clips = labels.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::size_t> per_class(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& s = scores[i];
    const std::size_t y = labels[i];
    if (s.size() != classes) throw Error("summarize_scores: clip " + std::to_string(i) + " has the wrong score count");
    if (y >= classes) throw Error("summarize_scores: label " + std::to_string(y) + " out of range");
    std::size_t pred = 0;
    for (std::size_t j = 1; j < classes; ++j)
      if (s[j] > s[pred]) pred = j;
    std::size_t rank = 0;
    for (std::size_t j = 0; j < classes; ++j)
      if (s[j] > s[y] || (s[j] == s[y] && j < y)) ++rank;
    ++r.confusion[y][pred];
    ++per_class[y];
    hit1 += pred == y ? 1 : 0;
    hit5 += rank < 5 ? 1 : 0;
  }
  const double n = static_cast<double>(labels.size());
  r.top1 = labels.empty() ? kNaN : static_cast<double>(hit1) / n;
  r.top5 = labels.empty() ? kNaN : static_cast<double>(hit5) / n;
  r.class_top1.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    r.class_top1[c] =
        per_class[c] ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(per_class[c]) : kNaN;
  }
  if (meta) {
    for (const auto& [c, name] : meta->entries) {
      if (c >= classes) throw Error("meta map: unknown class " + std::to_string(c));
      auto it = std::find_if(r.meta.begin(), r.meta.end(), [&](const MetaAccuracy& m) { return m.name == name; });
      if (it == r.meta.end()) {
        r.meta.push_back({name, {}, 0});
        it = r.meta.end() - 1;
      }
      it->classes.push_back(c);
    }
    for (auto& m : r.meta) {
      double sum = 0;
      std::size_t used = 0;
      for (std::size_t c : m.classes) {
        if (std::isnan(r.class_top1[c])) continue;
        sum += r.class_top1[c];
        ++used;
      }
      m.top1 = used ? sum / static_cast<double>(used) : kNaN;
    }
  }
  r.confused = top_confused_pairs(r, std::max<std::size_t>(confused_k, 1));
  return r;
}

template <typename T>
EvalReport evaluate(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data, const MetaMap* meta,
                    ConvAlgo algo, std::size_t threads) {
  if (data.classes != cfg.head.classes) {
    throw Error("class-count mismatch: manifest has " + std::to_string(data.classes) + " classes, model has " +
                std::to_string(cfg.head.classes));
  }
  std::vector<std::vector<double>> scores(data.size());
  std::vector<char> identity_ok(data.size(), 1);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Tape<T> tape;
    ForwardOptions<T> o;
    o.algo = algo;
    const BranchLogits z = model_forward(tape, data.clips[i], params, cfg, o);
    const Tensor<T>& comb = tape.value(z.z_comb);
    const Tensor<T>& a = tape.value(z.z_avg);
    const Tensor<T>& x = tape.value(z.z_xchannel);
    const Tensor<T>& m = tape.value(z.z_max);
    for (std::size_t j = 0; j < comb.size(); ++j) {
      const T sum = (a[j] + x[j]) + m[j];
      const T c = comb[j];
      if (std::memcmp(&sum, &c, sizeof(T)) != 0) identity_ok[i] = 0;
    }
    scores[i].assign(comb.values().begin(), comb.values().end());
  });
  EvalReport r = summarize_scores(scores, data.labels, cfg.head.classes, meta);
  for (char ok : identity_ok) r.comb_identity_violations += ok ? 0 : 1;
  return r;
}

EvalReport evaluate_checkpoint(const std::filesystem::path& ckpt_dir, const std::filesystem::path& manifest_path,
                               const std::filesystem::path* meta_path) {
  const Checkpoint ck = load_checkpoint(ckpt_dir);
  const ModelConfig& cfg = ck.config.model;
  const ClipManifest manifest = read_manifest(manifest_path);
  if (manifest.classes != cfg.head.classes) {
    throw Error("class-count mismatch: manifest " + manifest_path.string() + " has " +
                std::to_string(manifest.classes) + " classes, checkpoint has " + std::to_string(cfg.head.classes));
  }
  std::optional<MetaMap> meta;
  if (meta_path) meta = read_meta_map(*meta_path, cfg.head.classes);
  const MetaMap* mp = meta ? &*meta : nullptr;
  if (ck.config.precision == 32) {
    const ParamSet<float> p = ck.params.cast<float>();
    return evaluate(cfg, p, load_dataset<float>(manifest, cfg.backbone), mp, ck.config.algo, ck.config.threads);
  }
  return evaluate(cfg, ck.params, load_dataset<double>(manifest, cfg.backbone), mp, ck.config.algo,
                  ck.config.threads);
}

namespace {

nlohmann::json number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

std::string report_json(const EvalReport& r) {
  nlohmann::json j;
  j["classes"] = r.classes;
  j["clips"] = r.clips;
  j["top1"] = number(r.top1);
  j["top5"] = number(r.top5);
  j["confusion"] = r.confusion;
  nlohmann::json per = nlohmann::json::array();
  for (double v : r.class_top1) per.push_back(number(v));
  j["class_top1"] = per;
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& m : r.meta) meta.push_back({{"name", m.name}, {"classes", m.classes}, {"top1", number(m.top1)}});
  j["meta"] = meta;
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.confused) pairs.push_back({{"truth", p.truth}, {"predicted", p.predicted}, {"count", p.count}});
  j["most_confused"] = pairs;
  j["comb_identity_violations"] = r.comb_identity_violations;
  return j.dump(2) + "\n";
}

std::string confusion_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "truth\\pred";
  for (std::size_t c = 0; c < r.classes; ++c) os << ',' << c;
  os << '\n';
  for (std::size_t t = 0; t < r.classes; ++t) {
    os << t;
    for (std::size_t c = 0; c < r.classes; ++c) os << ',' << r.confusion[t][c];
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Localization

std::array<std::size_t, 3> filter_strides(const ModelConfig& cfg) {
  if (cfg.variant == Variant::kGB) throw Error("localization needs a filter bank (variant GB has none)");
  const BackboneConfig& b = cfg.backbone;
  const std::size_t last = cfg.variant == Variant::kGBDFLB ? 4 : 5;
  std::size_t s = 1;
  for (std::size_t i = 0; i < last; ++i) s *= b.stage_strides[i];
  return {b.is3d() ? b.temporal_stride : 1, s, s};
}

namespace {

// Footprint [f*s, f*s + s) clipped to [0, extent); full axis when fext == 1.
void map_axis(std::size_t f, std::size_t s, std::size_t fext, std::size_t extent, double& centre, std::size_t& lo,
              std::size_t& len) {
  if (fext == 1) {
    lo = 0;
    len = extent;
    centre = static_cast<double>(extent) / 2.0;
    return;
  }
  centre = static_cast<double>(f * s) + static_cast<double>(s) / 2.0;
  lo = std::min(f * s, extent - 1);
  len = std::min(f * s + s, extent) - lo;
}

}  // namespace

InputBox feature_to_input(const ModelConfig& cfg, std::size_t ft, std::size_t fy, std::size_t fx) {
  const auto s = filter_strides(cfg);
  const Extents3 e = cfg.filter_extents();
  const BackboneConfig& b = cfg.backbone;
  if (fy >= e.h || fx >= e.w || (b.is3d() && ft >= e.t) || (!b.is3d() && ft >= b.frames)) {
    throw Error("feature cell (" + std::to_string(ft) + "," + std::to_string(fy) + "," + std::to_string(fx) +
                ") lies outside the filter volume");
  }
  InputBox box;
  if (b.is3d()) {
    map_axis(ft, s[0], e.t, b.frames, box.ct, box.t0, box.t);
  } else {
    box.t0 = ft;
    box.t = 1;
    box.ct = static_cast<double>(ft) + 0.5;
  }
  map_axis(fy, s[1], e.h, b.height, box.cy, box.y0, box.h);
  map_axis(fx, s[2], e.w, b.width, box.cx, box.x0, box.w);
  return box;
}

bool localization_hit(const InputBox& box, const PatchBox& patch) {
  if (patch.t == 0 || patch.h == 0 || patch.w == 0) return false;
  if (patch.contains(box.ct, box.cy, box.cx)) return true;
  return box.t0 <= patch.t0 && patch.t0 + patch.t <= box.t0 + box.t && box.y0 <= patch.y0 &&
         patch.y0 + patch.h <= box.y0 + box.h && box.x0 <= patch.x0 && patch.x0 + patch.w <= box.x0 + box.w;
}

template <typename T>
std::vector<LocalizationResult> localize_all(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& clip,
                                             const PatchBox& patch, std::size_t label, const std::string& clip_id,
                                             ConvAlgo algo) {
  (void)filter_strides(cfg);
  Tape<T> tape;
  ForwardOptions<T> o;
  o.algo = algo;
  const BranchLogits z = model_forward(tape, clip, params, cfg, o);
  const std::size_t predicted = predict(tape.value(z.z_comb));
  const BackboneConfig& b = cfg.backbone;
  const std::vector<std::size_t> frames =
      b.is3d() ? std::vector<std::size_t>{} : segment_sample(b.frames, b.segments, SampleMode::kEvalCenter, nullptr);
  const std::size_t n = cfg.head.filters_per_class;
  std::vector<LocalizationResult> out;
  for (std::size_t f = 0; f < cfg.head.filters(); ++f) {
    std::size_t seg = 0;
    for (std::size_t s = 1; s < z.filter_max.size(); ++s)
      if (tape.value(z.filter_max[s].values)[f] > tape.value(z.filter_max[seg].values)[f]) seg = s;
    const PoolResult& pr = z.filter_max[seg];
    const std::vector<std::size_t> c = pr.coords(f);
    LocalizationResult r;
    r.clip_id = clip_id;
    r.label = label;
    r.predicted = predicted;
    r.cls = f / n;
    r.filter = f % n;
    r.response = static_cast<double>(tape.value(pr.values)[f]);
    if (b.is3d()) {
      r.ft = c[0];
      r.fy = c[1];
      r.fx = c[2];
    } else {
      r.ft = frames[seg];
      r.fy = c[0];
      r.fx = c[1];
    }
    r.box = feature_to_input(cfg, r.ft, r.fy, r.fx);
    r.hit = localization_hit(r.box, patch);
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
LocalizationResult localize(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& clip,
                            const PatchBox& patch, std::size_t label, std::size_t cls, std::size_t filter,
                            const std::string& clip_id, ConvAlgo algo) {
  if (cls >= cfg.head.classes) {
    throw Error("localize: class " + std::to_string(cls) + " out of range [0, " + std::to_string(cfg.head.classes) +
                ")");
  }
  if (filter >= cfg.head.filters_per_class) {
    throw Error("localize: filter " + std::to_string(filter) + " out of range [0, " +
                std::to_string(cfg.head.filters_per_class) + ")");
  }
  return localize_all(cfg, params, clip, patch, label, clip_id, algo)[cls * cfg.head.filters_per_class + filter];
}

template <typename T>
std::vector<ClassHitRate> class_hit_rates(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data,
                                          bool correct_only, ConvAlgo algo, std::size_t threads) {
  const std::size_t classes = cfg.head.classes, n = cfg.head.filters_per_class;
  std::vector<std::vector<LocalizationResult>> all(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    all[i] = localize_all(cfg, params, data.clips[i], data.boxes[i], data.labels[i], data.ids[i], algo);
  });
  std::vector<std::vector<std::size_t>> hits(classes, std::vector<std::size_t>(n, 0));
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t y = data.labels[i];
    if (correct_only && all[i].front().predicted != y) continue;
    ++counts[y];
    for (std::size_t k = 0; k < n; ++k) hits[y][k] += all[i][y * n + k].hit ? 1 : 0;
  }
  std::vector<ClassHitRate> out;
  for (std::size_t c = 0; c < classes; ++c) {
    ClassHitRate h;
    h.cls = c;
    h.clips = counts[c];
    for (std::size_t k = 1; k < n; ++k)
      if (hits[c][k] > hits[c][h.best_filter]) h.best_filter = k;
    h.hits = hits[c][h.best_filter];
    h.rate = counts[c] ? static_cast<double>(h.hits) / static_cast<double>(counts[c]) : kNaN;
    out.push_back(h);
  }
  return out;
}

double random_hit_rate_ratio(std::size_t clip_t, std::size_t clip_h, std::size_t clip_w, std::size_t patch_t,
                             std::size_t patch_h, std::size_t patch_w) {
  return static_cast<double>(patch_t * patch_h * patch_w) / static_cast<double>(clip_t * clip_h * clip_w);
}

double random_cell_hit_rate(const ModelConfig& cfg, std::size_t pt, std::size_t ph, std::size_t pw) {
  const BackboneConfig& b = cfg.backbone;
  if (pt > b.frames || ph > b.height || pw > b.width) throw Error("patch does not fit in the clip");
  const Extents3 e = cfg.filter_extents();
  const std::size_t et = b.is3d() ? e.t : b.frames;
  std::vector<InputBox> cells;
  for (std::size_t t = 0; t < et; ++t)
    for (std::size_t y = 0; y < e.h; ++y)
      for (std::size_t x = 0; x < e.w; ++x) cells.push_back(feature_to_input(cfg, t, y, x));
  std::size_t hits = 0, total = 0;
  PatchBox p{0, 0, 0, pt, ph, pw};
  for (p.t0 = 0; p.t0 + pt <= b.frames; ++p.t0)
    for (p.y0 = 0; p.y0 + ph <= b.height; ++p.y0)
      for (p.x0 = 0; p.x0 + pw <= b.width; ++p.x0)
        for (const auto& c : cells) {
          hits += localization_hit(c, p) ? 1 : 0;
          ++total;
        }
  return static_cast<double>(hits) / static_cast<double>(total);
}

std::string localization_csv_header() {
  return "clip,label,predicted,class,filter,response,ft,fy,fx,ct,cy,cx,t0,y0,x0,t,h,w,hit";
}

std::string localization_csv_row(const LocalizationResult& r) {
  std::ostringstream os;
  const InputBox& b = r.box;
  os << r.clip_id << ',' << r.label << ',' << r.predicted << ',' << r.cls << ',' << r.filter << ','
     << format_double(r.response) << ',' << r.ft << ',' << r.fy << ',' << r.fx << ',' << format_double(b.ct) << ','
     << format_double(b.cy) << ',' << format_double(b.cx) << ',' << b.t0 << ',' << b.y0 << ',' << b.x0 << ',' << b.t
     << ',' << b.h << ',' << b.w << ',' << (r.hit ? 1 : 0);
  return os.str();
}

#define DFB_INSTANTIATE_EVAL(T)                                                                                       \
  template EvalReport evaluate<T>(const ModelConfig&, const ParamSet<T>&, const Dataset<T>&, const MetaMap*,         \
                                  ConvAlgo, std::size_t);                                                            \
  template std::vector<LocalizationResult> localize_all<T>(const ModelConfig&, const ParamSet<T>&, const Tensor<T>&, \
                                                           const PatchBox&, std::size_t, const std::string&,         \
                                                           ConvAlgo);                                                \
  template LocalizationResult localize<T>(const ModelConfig&, const ParamSet<T>&, const Tensor<T>&, const PatchBox&, \
                                          std::size_t, std::size_t, std::size_t, const std::string&, ConvAlgo);      \
  template std::vector<ClassHitRate> class_hit_rates<T>(const ModelConfig&, const ParamSet<T>&, const Dataset<T>&,   \
                                                        bool, ConvAlgo, std::size_t);

DFB_INSTANTIATE_EVAL(float)
DFB_INSTANTIATE_EVAL(double)

}  // namespace dfb
