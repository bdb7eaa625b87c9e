#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfb/autodiff.hpp"

namespace dfb {

/// Worst analytic vs finite-difference disagreement for one parameter.
struct GradEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_err = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
  /// Coordinates whose step had to shrink to stay off a kink.
  std::size_t refined = 0;
  /// Coordinates with a kink closer than the smallest step tried.
  std::size_t skipped = 0;
};

struct GradReport {
  std::string label;
  double tolerance = 0;
  double step = 0;
  bool deterministic = true;
  double seconds = 0;
  std::vector<GradEntry> entries;

  double max_rel_err() const;
  bool pass() const;
  std::string table() const;
  /// "key=value" lines for machine consumption.
  std::string key_values() const;
};

/// |a - f| / max(|a|, |f|, 1e-8).
double relative_error(double analytic, double numeric);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Shrink the step (by 10x, at most this many times) whenever a perturbation
  /// flips a relu or moves a max-pool argmax.
  bool kink_aware = true;
  int max_refinements = 4;
};

/// Builds the scalar loss from scratch on a fresh tape; must be deterministic.
using LossBuilder = std::function<Var(Tape<double>& tape, const ParamSet<double>& params)>;

/// Central differences (f(p+e) - f(p-e)) / 2e over every coordinate of every
/// slot, compared with the tape's gradient. A forward that gives different
/// losses on two identical runs marks the report non-deterministic (failed).
/// Any skipped coordinate also fails the report.
GradReport gradcheck(const LossBuilder& build, ParamSet<double> params, const GradCheckOptions& opts,
                     const std::string& label = "");

/// Names accepted by op_gradcheck.
const std::vector<std::string>& gradcheck_ops();

/// Relu on/off pattern and max-pool argmax positions recorded on a tape.
std::vector<std::size_t> piece_signature(const Tape<double>& tape);

/// Randomised small-shape check of one op's backward rule.
GradReport op_gradcheck(const std::string& op, std::uint64_t seed, double tolerance = 1e-6);

/// End-to-end check of the total loss on the micro-model (3 classes, 2
/// filters per class, 4x8x8 clip, all three branches, fixed dropout masks).
GradReport full_head_gradcheck(std::uint64_t seed, double tolerance = 1e-5, double step = 1e-3);

}  // namespace dfb
