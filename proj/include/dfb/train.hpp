#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dfb/head.hpp"
#include "dfb/synth.hpp"

namespace dfb {

/// Run configuration: optimiser recipe plus the model it trains.
struct TrainConfig {
  ModelConfig model;
  double lr = 0.01;
  /// Fractions of the total step count where the rate is multiplied by lr_decay.
  std::vector<double> lr_milestones{0.5, 0.75, 0.9};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Rescales the batch gradient to this global L2 norm when it is larger; 0 disables.
  double grad_clip = 0;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  /// Arithmetic width in bits: 32 or 64.
  std::size_t precision = 64;
  /// Random horizontal flip of training clips.
  bool flip = false;
  /// Train top-1 from a separate eval-mode pass instead of the training forwards.
  bool eval_train = false;
  std::size_t threads = 1;
  ConvAlgo algo = ConvAlgo::kGemm;

  void validate() const;
  friend bool operator==(const TrainConfig& a, const TrainConfig& b);
};

/// Flat key=value text; `classes` is required, unknown keys are rejected.
TrainConfig parse_run_config(const std::string& text, const std::string& source = "run config");
std::string format_run_config(const TrainConfig& cfg);
TrainConfig read_run_config(const std::filesystem::path& path);
void write_run_config(const TrainConfig& cfg, const std::filesystem::path& path);

/// Step schedule: lr * decay^(number of milestones reached at `step`).
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

/// Global L2 norm over the slots flagged in `active` (all slots when null).
template <typename T>
double gradient_norm(const Gradients<T>& grads, const std::vector<bool>* active = nullptr);

template <typename T>
SgdState<T> make_sgd_state(const ParamSet<T>& params);

/// v = momentum v + g + wd p (wd only on decaying slots); p -= lr v.
/// Slots flagged false in `active` are left untouched.
template <typename T>
void sgd_step(ParamSet<T>& params, const Gradients<T>& grads, T lr, T momentum, T weight_decay, SgdState<T>& state,
              const std::vector<bool>* active = nullptr);

/// Clips of one manifest held in memory.
template <typename T>
struct Dataset {
  std::size_t classes = 0;
  std::vector<Tensor<T>> clips;
  std::vector<std::size_t> labels;
  std::vector<PatchBox> boxes;
  std::vector<std::string> ids;

  std::size_t size() const noexcept { return clips.size(); }
};

/// Loads every clip, checking it against the backbone's clip extents.
template <typename T>
Dataset<T> load_dataset(const ClipManifest& manifest, const BackboneConfig& backbone);

struct MetricsRow {
  std::size_t epoch = 0;
  double total = 0, comb = 0, avg = 0, max = 0, xchannel = 0;
  double train_top1 = 0;
  /// NaN without a validation set.
  double val_top1 = 0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// Tab-separated: epoch, L_total, L_comb, L_avg, L_max, L_xchannel, train-top1, val-top1.
std::string format_metrics_row(const MetricsRow& row);
MetricsRow parse_metrics_row(const std::string& line);
std::vector<MetricsRow> read_metrics_log(const std::filesystem::path& path);

/// Raised when a loss turns non-finite or the loss identity breaks.
class TrainingError : public Error {
 public:
  using Error::Error;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  /// Batch means of the per-clip losses.
  double total = 0, comb = 0, avg = 0, max = 0, xchannel = 0;
  /// Global L2 norm of the batch-mean gradient before clipping.
  double grad_norm = 0;
};

template <typename T>
struct TrainResult {
  ParamSet<T> params;
  std::vector<MetricsRow> metrics;
  std::vector<StepRecord> steps;
  /// Per-clip loss identity checks performed (all passed, or training threw).
  std::size_t identity_checks = 0;
};

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_epoch;
};

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const Dataset<T>& train_set, const Dataset<T>* val_set = nullptr,
                     const TrainHooks& hooks = {});

/// Eval-mode top-1 over a dataset.
template <typename T>
double top1_accuracy(const ModelConfig& cfg, const ParamSet<T>& params, const Dataset<T>& data,
                     ConvAlgo algo = ConvAlgo::kGemm, std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/index.txt, <dir>/config.txt, <dir>/params/<slot>.vten.

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, const ParamSet<T>& params);

struct Checkpoint {
  TrainConfig config;
  ParamSet<double> params;
};

/// Reads a checkpoint, verifying that its parameters match the layout the
/// stored config implies. Values are widened to 64-bit.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// End-to-end `train` command: loads manifests, trains at cfg.precision and
/// writes the checkpoint plus <out>/metrics.log.
std::vector<MetricsRow> train_to_directory(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                                           const std::filesystem::path* val_manifest,
                                           const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

}  // namespace dfb
