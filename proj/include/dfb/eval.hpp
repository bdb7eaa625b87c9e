#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dfb/train.hpp"

namespace dfb {

/// Parent grouping of classes: (class index, meta-category name) pairs.
struct MetaMap {
  std::vector<std::pair<std::size_t, std::string>> entries;
};

/// Lines "<class-index>\t<meta-name>"; every class must lie in [0, classes).
MetaMap read_meta_map(const std::filesystem::path& path, std::size_t classes);
MetaMap parse_meta_map(const std::string& text, std::size_t classes, const std::string& source = "meta map");

struct ConfusedPair {
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::size_t count = 0;

  friend bool operator==(const ConfusedPair&, const ConfusedPair&) = default;
};

struct MetaAccuracy {
  std::string name;
  std::vector<std::size_t> classes;
  /// Unweighted mean of the child classes' top-1 (classes without clips skipped); NaN if none.
  double top1 = 0;
};

struct EvalReport {
  std::size_t classes = 0;
  std::size_t clips = 0;
  double top1 = 0;
  double top5 = 0;
  /// confusion[truth][prediction] = count.
  std::vector<std::vector<std::size_t>> confusion;
  /// Per-class top-1; NaN for classes without clips.
  std::vector<double> class_top1;
  std::vector<MetaAccuracy> meta;
  std::vector<ConfusedPair> confused;
  /// Clips where z_comb differed from z_avg + z_xchannel + z_max.
  std::size_t comb_identity_violations = 0;
};

/// Builds a report from per-clip class scores. Ranking is by score with ties
/// to the lower class index, matching predict().
EvalReport summarize_scores(const std::vector<std::vector<double>>& scores, const std::vector<std::size_t>& labels,
                            std::size_t classes, const MetaMap* meta = nullptr, std::size_t confused_k = 10);

/// Off-diagonal cells with a nonzero count, by count descending then (row, col); at most k.
std::vector<ConfusedPair> top_confused_pairs(const EvalReport& report, std::size_t k);

/// Deterministic eval-mode pass (dropout off, centre segment sampling).
template <typename T>
EvalReport evaluate(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data,
                    const MetaMap* meta = nullptr, ConvAlgo algo = ConvAlgo::kGemm, std::size_t threads = 1);

/// Loads the checkpoint and manifest and evaluates at the checkpoint's precision.
EvalReport evaluate_checkpoint(const std::filesystem::path& ckpt_dir, const std::filesystem::path& manifest,
                               const std::filesystem::path* meta_path = nullptr);

std::string report_json(const EvalReport& report);
std::string confusion_csv(const EvalReport& report);

// ---------------------------------------------------------------------------
// Maximal-response localization.

/// Input-space box around a feature cell.
struct InputBox {
  double ct = 0, cy = 0, cx = 0;
  std::size_t t0 = 0, y0 = 0, x0 = 0;
  std::size_t t = 0, h = 0, w = 0;
};

struct LocalizationResult {
  std::string clip_id;
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::size_t cls = 0;
  std::size_t filter = 0;
  double response = 0;
  /// Argmax cell in the filter volume (t is the sampled frame in 2D mode).
  std::size_t ft = 0, fy = 0, fx = 0;
  InputBox box;
  bool hit = false;
};

/// Cumulative (t, h, w) stride between the input clip and the filter volume.
std::array<std::size_t, 3> filter_strides(const ModelConfig& cfg);

/// Maps a feature cell to its footprint: centre = f * s + s / 2 and extent s
/// per axis, clipped to the clip. An axis whose feature extent is 1 spans the
/// whole clip axis.
InputBox feature_to_input(const ModelConfig& cfg, std::size_t ft, std::size_t fy, std::size_t fx);

/// Box centre inside the patch, or the whole patch inside the box.
bool localization_hit(const InputBox& box, const PatchBox& patch);

/// One eval-mode forward; a result for every filter of every class.
template <typename T>
std::vector<LocalizationResult> localize_all(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& clip,
                                             const PatchBox& patch, std::size_t label, const std::string& clip_id,
                                             ConvAlgo algo = ConvAlgo::kGemm);

/// Filter k of class c.
template <typename T>
LocalizationResult localize(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& clip,
                            const PatchBox& patch, std::size_t label, std::size_t cls, std::size_t filter,
                            const std::string& clip_id = "", ConvAlgo algo = ConvAlgo::kGemm);

struct ClassHitRate {
  std::size_t cls = 0;
  std::size_t best_filter = 0;
  std::size_t hits = 0;
  std::size_t clips = 0;
  double rate = 0;
};

/// For each class, the filter with the highest hit-rate over that class's
/// clips (only correctly classified ones when `correct_only`).
template <typename T>
std::vector<ClassHitRate> class_hit_rates(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data,
                                          bool correct_only, ConvAlgo algo = ConvAlgo::kGemm, std::size_t threads = 1);

/// Probability that a uniformly placed patch contains the centre of a
/// uniformly chosen location: patch volume / clip volume.
double random_hit_rate_ratio(std::size_t clip_t, std::size_t clip_h, std::size_t clip_w, std::size_t patch_t,
                             std::size_t patch_h, std::size_t patch_w);

/// Exact hit probability of a uniformly random feature cell under the same
/// box mapping and hit rule, averaged over every patch placement.
double random_cell_hit_rate(const ModelConfig& cfg, std::size_t patch_t, std::size_t patch_h, std::size_t patch_w);

std::string localization_csv_header();
std::string localization_csv_row(const LocalizationResult& r);

}  // namespace dfb
