#include "dfb/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dfb/kvfile.hpp"
#include "dfb/rng.hpp"
#include "dfb/vten.hpp"

namespace dfb {

bool PatchBox::contains(double ct, double cy, double cx) const {
  auto in = [](double c, std::size_t lo, std::size_t n) {
    return c >= static_cast<double>(lo) && c < static_cast<double>(lo + n);
  };
  return in(ct, t0, t) && in(cy, y0, h) && in(cx, x0, w);
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const ClipManifest& m, const std::filesystem::path& path) {
  if (m.split.empty() || m.split.find_first_of(" \t\n") != std::string::npos) {
    throw Error("manifest split tag must be a non-empty word");
  }
  std::ostringstream os;
  os << "DFBMANIFEST 1 C=" << m.classes << " SPLIT=" << m.split << '\n';
  for (const auto& e : m.entries) {
    if (e.path.find_first_of("\t\n") != std::string::npos) throw Error("manifest path contains a tab or newline");
    const auto& b = e.box;
    os << e.path << '\t' << e.label << '\t' << b.t0 << ',' << b.y0 << ',' << b.x0 << ',' << b.t << ',' << b.h << ','
       << b.w << '\n';
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << os.str();
  if (!f) throw Error("failed writing " + path.string());
}

namespace {

std::size_t parse_field(const std::string& s, const std::string& where, const char* field) {
  std::size_t v = 0;
  std::size_t pos = 0;
  try {
    if (s.empty() || s[0] == '-' || s[0] == '+') throw std::invalid_argument(s);
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size()) throw Error(where + ": field '" + field + "' is not a non-negative integer: '" + s + "'");
  return v;
}

}  // namespace

ClipManifest read_manifest(const std::filesystem::path& path, bool check_files) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open manifest " + path.string());
  const std::string src = path.string();
  ClipManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(f, line)) throw Error(src + ":1: empty manifest, missing header");
  {
    std::istringstream hs(line);
    std::string magic, version, cpart, spart, extra;
    hs >> magic >> version >> cpart >> spart;
    if (magic != "DFBMANIFEST") throw Error(src + ":1: header must start with DFBMANIFEST");
    if (version != "1") throw Error(src + ":1: unsupported manifest version '" + version + "'");
    if (!cpart.starts_with("C=")) throw Error(src + ":1: header field 'C' missing");
    if (!spart.starts_with("SPLIT=") || spart.size() == 6) throw Error(src + ":1: header field 'SPLIT' missing");
    if (hs >> extra) throw Error(src + ":1: unexpected trailing header field '" + extra + "'");
    m.classes = parse_field(cpart.substr(2), src + ":1", "C");
    if (m.classes < 2) throw Error(src + ":1: header field 'C' must be at least 2");
    m.split = spart.substr(6);
  }
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = src + ":" + std::to_string(lineno);
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string col;
    while (std::getline(ls, col, '\t')) cols.push_back(col);
    if (cols.size() != 3) {
      throw Error(where + ": expected 3 tab-separated fields (path, label, box), got " + std::to_string(cols.size()));
    }
    ManifestEntry e;
    e.path = cols[0];
    if (e.path.empty()) throw Error(where + ": field 'path' is empty");
    e.label = parse_field(cols[1], where, "label");
    if (e.label >= m.classes) {
      throw Error(where + ": field 'label' = " + std::to_string(e.label) + " out of range [0, " +
                  std::to_string(m.classes) + ")");
    }
    std::vector<std::string> b;
    std::istringstream bs(cols[2]);
    while (std::getline(bs, col, ',')) b.push_back(col);
    if (b.size() != 6) throw Error(where + ": field 'box' needs 6 comma-separated integers t0,y0,x0,t,h,w");
    static const char* names[] = {"box.t0", "box.y0", "box.x0", "box.t", "box.h", "box.w"};
    std::size_t v[6];
    for (int i = 0; i < 6; ++i) v[i] = parse_field(b[i], where, names[i]);
    e.box = {v[0], v[1], v[2], v[3], v[4], v[5]};
    if (check_files && !std::filesystem::exists(m.resolve(e))) {
      throw Error(where + ": clip file not found: " + m.resolve(e).string());
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

template <typename T>
Tensor<T> load_clip(const ClipManifest& manifest, const ManifestEntry& entry, const Shape& expected) {
  const auto p = manifest.resolve(entry);
  Tensor<T> t = expected.empty() ? vten::load<T>(p) : vten::load<T>(p, expected);
  if (t.rank() != 4) {
    throw Error(p.string() + ": wrong rank, expected 4 [C,T,H,W] but found " + std::to_string(t.rank()) + " " +
                shape_str(t.shape()));
  }
  return t;
}

template Tensor<float> load_clip<float>(const ClipManifest&, const ManifestEntry&, const Shape&);
template Tensor<double> load_clip<double>(const ClipManifest&, const ManifestEntry&, const Shape&);

// ---------------------------------------------------------------------------
// Config

void SynthConfig::validate() const {
  if (classes < 2) throw Error("synth: classes must be at least 2");
  if (frames == 0 || height == 0 || width == 0 || channels == 0) throw Error("synth: clip extents must be positive");
  if (patch_frames == 0 || patch_height == 0 || patch_width == 0) throw Error("synth: patch extents must be positive");
  if (patch_frames > frames || patch_height > height || patch_width > width) {
    throw Error("synth: patch " + std::to_string(patch_frames) + "x" + std::to_string(patch_height) + "x" +
                std::to_string(patch_width) + " does not fit in clip " + std::to_string(frames) + "x" +
                std::to_string(height) + "x" + std::to_string(width));
  }
  if (background_corr == 0) throw Error("synth: background_corr must be at least 1");
  if (!(background_temporal >= 0.0 && background_temporal < 1.0)) {
    throw Error("synth: background_temporal must lie in [0, 1)");
  }
  if (!(signal_amplitude >= 0.0) || !(motif_amplitude >= 0.0) || !(distractor_ratio >= 0.0)) {
    throw Error("synth: amplitudes must be non-negative");
  }
}

SynthConfig parse_synth_config(const std::string& text) {
  KeyValues kv = KeyValues::parse(text, "synth config");
  SynthConfig c;
  c.classes = kv.get_size("classes", c.classes);
  c.train_per_class = kv.get_size("train_per_class", c.train_per_class);
  c.val_per_class = kv.get_size("val_per_class", c.val_per_class);
  c.frames = kv.get_size("frames", c.frames);
  c.height = kv.get_size("height", c.height);
  c.width = kv.get_size("width", c.width);
  c.channels = kv.get_size("channels", c.channels);
  c.patch_frames = kv.get_size("patch_frames", c.patch_frames);
  c.patch_height = kv.get_size("patch_height", c.patch_height);
  c.patch_width = kv.get_size("patch_width", c.patch_width);
  c.background_corr = kv.get_size("background_corr", c.background_corr);
  c.background_temporal = kv.get_double("background_temporal", c.background_temporal);
  c.motif_amplitude = kv.get_double("motif_amplitude", c.motif_amplitude);
  c.signal_amplitude = kv.get_double("signal_amplitude", c.signal_amplitude);
  c.distractors = kv.get_size("distractors", c.distractors);
  c.distractor_ratio = kv.get_double("distractor_ratio", c.distractor_ratio);
  c.seed = kv.get_u64("seed", c.seed);
  kv.reject_unknown();
  c.validate();
  return c;
}

std::string format_synth_config(const SynthConfig& c) {
  std::ostringstream os;
  os << "classes=" << c.classes << '\n'
     << "train_per_class=" << c.train_per_class << '\n'
     << "val_per_class=" << c.val_per_class << '\n'
     << "frames=" << c.frames << '\n'
     << "height=" << c.height << '\n'
     << "width=" << c.width << '\n'
     << "channels=" << c.channels << '\n'
     << "patch_frames=" << c.patch_frames << '\n'
     << "patch_height=" << c.patch_height << '\n'
     << "patch_width=" << c.patch_width << '\n'
     << "background_corr=" << c.background_corr << '\n'
     << "background_temporal=" << format_double(c.background_temporal) << '\n'
     << "motif_amplitude=" << format_double(c.motif_amplitude) << '\n'
     << "signal_amplitude=" << format_double(c.signal_amplitude) << '\n'
     << "distractors=" << c.distractors << '\n'
     << "distractor_ratio=" << format_double(c.distractor_ratio) << '\n'
     << "seed=" << c.seed << '\n';
  return os.str();
}

SynthConfig read_synth_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open synth config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_synth_config(ss.str());
}

void write_synth_config(const SynthConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << format_synth_config(cfg);
}

// ---------------------------------------------------------------------------
// Generator

namespace {

constexpr std::uint64_t kTextureStream = 0x7e47'0001;
constexpr std::uint64_t kTrainStream = 0x7a1;
constexpr std::uint64_t kValStream = 0x7a2;

std::uint64_t split_stream(const std::string& split) {
  if (split == "train") return kTrainStream;
  if (split == "val") return kValStream;
  throw Error("synth: unknown split '" + split + "'");
}

// Unit-variance noise, box-smoothed (circularly) over `corr` pixels in space
// and AR(1)-correlated over time. Shape [channels, T, H, W].
std::vector<double> smooth_background(const SynthConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.channels, t = cfg.frames, h = cfg.height, w = cfg.width, l = cfg.background_corr;
  const double rho = cfg.background_temporal;
  const double innov = std::sqrt(1.0 - rho * rho);
  std::vector<double> out(c * t * h * w);
  std::vector<double> field(h * w), tmp(h * w);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t f = 0; f < t; ++f) {
      for (auto& v : field) v = f == 0 ? rng.normal() : rho * v + innov * rng.normal();
      // Separable circular box filter; the sum of l*l unit normals scaled by
      // 1/l keeps unit variance.
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double s = 0;
          for (std::size_t d = 0; d < l; ++d) s += field[y * w + (x + d) % w];
          tmp[y * w + x] = s;
        }
      double* dst = out.data() + (k * t + f) * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double s = 0;
          for (std::size_t d = 0; d < l; ++d) s += tmp[((y + d) % h) * w + x];
          dst[y * w + x] = s / static_cast<double>(l);
        }
    }
  }
  return out;
}

void add_motif(const SynthConfig& cfg, Rng& rng, std::vector<double>& clip) {
  const std::size_t c = cfg.channels, t = cfg.frames, h = cfg.height, w = cfg.width;
  const double cy = rng.uniform() * static_cast<double>(h), cx = rng.uniform() * static_cast<double>(w);
  const double vy = 4.0 * rng.uniform() - 2.0, vx = 4.0 * rng.uniform() - 2.0;
  const double sigma = static_cast<double>(std::min(h, w)) / 6.0;
  std::vector<double> color(c);
  for (auto& v : color) v = 0.5 + 0.5 * rng.uniform();
  for (std::size_t f = 0; f < t; ++f) {
    const double py = cy + vy * static_cast<double>(f), px = cx + vx * static_cast<double>(f);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - py, dx = static_cast<double>(x) - px;
        const double g = cfg.motif_amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        for (std::size_t k = 0; k < c; ++k) clip[((k * t + f) * h + y) * w + x] += color[k] * g;
      }
  }
}

PatchBox random_box(const SynthConfig& cfg, Rng& rng) {
  PatchBox b;
  b.t = cfg.patch_frames;
  b.h = cfg.patch_height;
  b.w = cfg.patch_width;
  b.t0 = rng.uniform_int(cfg.frames - b.t + 1);
  b.y0 = rng.uniform_int(cfg.height - b.h + 1);
  b.x0 = rng.uniform_int(cfg.width - b.w + 1);
  return b;
}

void plant(const SynthConfig& cfg, const Tensor<double>& tex, const PatchBox& b, double amp, std::vector<double>& clip) {
  const std::size_t t = cfg.frames, h = cfg.height, w = cfg.width;
  for (std::size_t k = 0; k < cfg.channels; ++k)
    for (std::size_t dt = 0; dt < b.t; ++dt)
      for (std::size_t dy = 0; dy < b.h; ++dy)
        for (std::size_t dx = 0; dx < b.w; ++dx) {
          const double v = tex[((k * b.t + dt) * b.h + dy) * b.w + dx];
          clip[((k * t + b.t0 + dt) * h + b.y0 + dy) * w + b.x0 + dx] += amp * (1.0 + v);
        }
}

}  // namespace

Tensor<double> class_texture(const SynthConfig& cfg, std::size_t c) {
  Rng rng = Rng(cfg.seed, kTextureStream).split(c);
  constexpr double kPi = std::numbers::pi;
  // Orientations are stratified so no two classes share one.
  const double theta = (static_cast<double>(c) + rng.uniform()) * kPi / static_cast<double>(cfg.classes);
  const double freq = 2.0 * kPi / (3.0 + 3.0 * rng.uniform());
  const double drift = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.25 + 0.5 * rng.uniform()) * kPi;
  const double phase = 2.0 * kPi * rng.uniform();
  std::vector<double> color(cfg.channels);
  for (auto& v : color) v = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  const double ky = freq * std::sin(theta), kx = freq * std::cos(theta);
  Tensor<double> tex({cfg.channels, cfg.patch_frames, cfg.patch_height, cfg.patch_width}, 0.0);
  std::size_t i = 0;
  for (std::size_t k = 0; k < cfg.channels; ++k)
    for (std::size_t t = 0; t < cfg.patch_frames; ++t)
      for (std::size_t y = 0; y < cfg.patch_height; ++y)
        for (std::size_t x = 0; x < cfg.patch_width; ++x)
          tex[i++] = color[k] * std::cos(ky * static_cast<double>(y) + kx * static_cast<double>(x) +
                                         drift * static_cast<double>(t) + phase);
  double mean = 0;
  for (double v : tex.values()) mean += v;
  mean /= static_cast<double>(tex.size());
  double ss = 0;
  for (auto& v : tex.values()) {
    v -= mean;
    ss += v * v;
  }
  const double rms = std::sqrt(ss / static_cast<double>(tex.size()));
  if (rms > 0)
    for (auto& v : tex.values()) v /= rms;
  return tex;
}

SynthClip synth_clip(const SynthConfig& cfg, const std::string& split, std::size_t index) {
  cfg.validate();
  const Rng base = Rng(cfg.seed, split_stream(split)).split(index);
  Rng bg = base.split(1), motif = base.split(2), place = base.split(3), decoy = base.split(4);
  SynthClip out;
  out.label = index % cfg.classes;
  std::vector<double> clip = smooth_background(cfg, bg);
  add_motif(cfg, motif, clip);
  for (std::size_t d = 0; d < cfg.distractors; ++d) {
    const std::size_t k = decoy.uniform_int(cfg.classes);
    const PatchBox b = random_box(cfg, decoy);
    plant(cfg, class_texture(cfg, k), b, cfg.distractor_ratio * cfg.signal_amplitude, clip);
  }
  out.box = random_box(cfg, place);
  plant(cfg, class_texture(cfg, out.label), out.box, cfg.signal_amplitude, clip);
  out.clip = Tensor<float>({cfg.channels, cfg.frames, cfg.height, cfg.width}, std::vector<float>(clip.begin(), clip.end()));
  return out;
}

SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  SynthOutput out;
  auto make = [&](const std::string& split, std::size_t per_class, ClipManifest& m, std::filesystem::path& mpath) {
    std::filesystem::create_directories(out_dir / split);
    m.classes = cfg.classes;
    m.split = split;
    m.base_dir = out_dir;
    const std::size_t n = per_class * cfg.classes;
    char name[32];
    for (std::size_t i = 0; i < n; ++i) {
      SynthClip c = synth_clip(cfg, split, i);
      std::snprintf(name, sizeof(name), "%06zu.vten", i);
      ManifestEntry e{split + "/" + name, c.label, c.box};
      vten::save(m.resolve(e), c.clip);
      m.entries.push_back(std::move(e));
    }
    mpath = out_dir / (split + ".manifest");
    write_manifest(m, mpath);
  };
  make("train", cfg.train_per_class, out.train, out.train_manifest);
  make("val", cfg.val_per_class, out.val, out.val_manifest);
  write_synth_config(cfg, out_dir / "synth.cfg");
  return out;
}

}  // namespace dfb
