#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfb/tensor.hpp"

namespace dfb {

/// Ground-truth placement of the planted patch, in clip coordinates.
struct PatchBox {
  std::size_t t0 = 0, y0 = 0, x0 = 0;
  std::size_t t = 0, h = 0, w = 0;

  bool contains(double ct, double cy, double cx) const;
  friend bool operator==(const PatchBox&, const PatchBox&) = default;
};

struct ManifestEntry {
  /// Relative to the manifest's directory.
  std::string path;
  std::size_t label = 0;
  PatchBox box;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Text manifest:
///   DFBMANIFEST 1 C=<classes> SPLIT=<tag>
///   <relative-path>\t<label>\t<t0>,<y0>,<x0>,<t>,<h>,<w>
struct ClipManifest {
  std::size_t classes = 0;
  std::string split;
  std::vector<ManifestEntry> entries;
  /// Directory clip paths resolve against; not serialised.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }
  bool operator==(const ClipManifest& o) const {
    return classes == o.classes && split == o.split && entries == o.entries;
  }
};

void write_manifest(const ClipManifest& manifest, const std::filesystem::path& path);
/// Parses and validates a manifest. With `check_files`, every clip must exist.
ClipManifest read_manifest(const std::filesystem::path& path, bool check_files = true);

/// Loads a clip as [channels, T, H, W], checking the shape when given.
template <typename T>
Tensor<T> load_clip(const ClipManifest& manifest, const ManifestEntry& entry, const Shape& expected = {});

struct SynthConfig {
  std::size_t classes = 8;
  std::size_t train_per_class = 100;
  std::size_t val_per_class = 30;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t patch_frames = 3;
  std::size_t patch_height = 5;
  std::size_t patch_width = 5;
  /// Box-filter width (pixels) of the spatially smooth background.
  std::size_t background_corr = 4;
  /// Frame-to-frame correlation of the background, in [0, 1).
  double background_temporal = 0.7;
  /// Peak amplitude of the class-independent moving blob.
  double motif_amplitude = 1.0;
  /// Patch amplitude relative to the unit background standard deviation.
  double signal_amplitude = 1.0;
  /// Class-independent decoy patches per clip, textures drawn from all classes.
  std::size_t distractors = 0;
  /// Decoy amplitude relative to the true patch.
  double distractor_ratio = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Key-value file round-trip for SynthConfig (same syntax as run configs).
SynthConfig read_synth_config(const std::filesystem::path& path);
void write_synth_config(const SynthConfig& cfg, const std::filesystem::path& path);
SynthConfig parse_synth_config(const std::string& text);
std::string format_synth_config(const SynthConfig& cfg);

/// Fixed texture of class `c`: [channels, pt, ph, pw]. A drifting grating with a
/// per-class orientation, period, speed, phase and channel sign pattern,
/// normalised to zero mean and unit rms.
Tensor<double> class_texture(const SynthConfig& cfg, std::size_t c);

/// One clip of the given split ("train" or "val") and index, with its label and
/// patch placement. Pure function of (cfg, split, index).
struct SynthClip {
  Tensor<float> clip;
  std::size_t label = 0;
  PatchBox box;
};
SynthClip synth_clip(const SynthConfig& cfg, const std::string& split, std::size_t index);

struct SynthOutput {
  ClipManifest train;
  ClipManifest val;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
};

/// Writes <out>/<split>/<index>.vten clips plus <out>/train.manifest and <out>/val.manifest.
SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace dfb
