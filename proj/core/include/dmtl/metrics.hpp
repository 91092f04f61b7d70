// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmtl/tensor.hpp"

namespace dmtl::metrics {

/// Per-task scalar metrics of one model on one dataset, plus the optional
/// multi-task performance relative to single-task baselines (percent).
struct MetricReport {
  std::map<std::string, double> per_task;
  std::optional<double> delta_m;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// Boolean mask over an H x W grid, row-major.
struct BinaryMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
};

// ---------------------------------------------------------------------------
// Segmentation

/// Sum-of-counts confusion matrix; mIoU is taken over classes present in gt.
class ConfusionMatrix {
 public:
  ConfusionMatrix(int num_classes, int ignore_index = 255);
  void add(std::span<const int> pred, std::span<const int> gt);
  double miou() const;
  std::int64_t count(int gt_class, int pred_class) const;
  std::int64_t valid_pixels() const noexcept { return valid_; }

 private:
  int num_classes_;
  int ignore_index_;
  std::vector<std::int64_t> counts_;
  std::int64_t valid_ = 0;
};

double compute_miou(const LabelMap& pred, const LabelMap& gt, int num_classes, int ignore_index = 255);

// ---------------------------------------------------------------------------
// Regression

/// Running mean of a per-pixel error.
class MeanAccumulator {
 public:
  void add(double value, std::size_t count = 1) {
    sum_ += value;
    count_ += count;
  }
  double mean() const;
  std::size_t count() const noexcept { return count_; }

 private:
  double sum_ = 0.0;
  std::size_t count_ = 0;
};

/// Adds |pred - gt| of every valid element. mask has one entry per pixel;
/// the trailing channel dimension (if any) is averaged within the pixel.
void accumulate_abs_err(MeanAccumulator& acc, const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask);
double compute_abs_err(const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask);

/// Adds the angle in degrees between normalized 3-vectors for valid pixels.
void accumulate_angle_err(MeanAccumulator& acc, const Tensor& pred, const Tensor& gt,
                          std::span<const std::uint8_t> mask);
double compute_mean_angle_err(const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask);

// ---------------------------------------------------------------------------
// Binary maps

/// Uniform threshold grid {0.00, 0.02, ..., 1.00}.
const std::vector<double>& f_measure_thresholds();

/// F1 from counts; zero precision/recall when the denominators vanish.
double f1_from_counts(double tp, double fp, double fn);

enum class ThresholdGrid { uniform51, unique_values };

struct MaxFResult {
  double value = 0.0;
  double threshold = 0.0;
  /// Set when gt has no positives; value is then 0.
  bool degenerate = false;
};

/// Per-threshold TP/FP/FN counts on the uniform grid, summed over images.
class ThresholdCounts {
 public:
  ThresholdCounts();
  void add(std::span<const double> prob, std::span<const std::uint8_t> gt);
  /// F1 at grid index i.
  double f_at(std::size_t i) const;
  MaxFResult max_f() const;

 private:
  std::vector<double> tp_, fp_, fn_;
  double positives_ = 0;
};

/// Positive prediction is prob >= threshold.
MaxFResult compute_max_f(std::span<const double> prob, std::span<const std::uint8_t> gt,
                         ThresholdGrid grid = ThresholdGrid::uniform51);

/// Dataset-level boundary F-measure with distance-tolerant matching. A
/// predicted positive is matched if a gt positive lies within Chebyshev
/// distance `tolerance`, and a gt positive is recalled if a predicted positive
/// lies within the same distance. One threshold is chosen for the dataset.
class BoundaryCounts {
 public:
  explicit BoundaryCounts(int tolerance_px = 1);
  /// prob is an H x W tensor (or H x W x 1).
  void add(const Tensor& prob, const BinaryMap& gt);
  double ods_f() const;
  double f_at(std::size_t i) const;

 private:
  int tolerance_;
  std::vector<double> matched_pred_, total_pred_, matched_gt_;
  double total_gt_ = 0;
  std::size_t images_ = 0;
};

double compute_ods_f(const std::vector<Tensor>& probs, const std::vector<BinaryMap>& gts, int tolerance_px = 1);

// ---------------------------------------------------------------------------
// Multi-task aggregate

/// (100 / T) * sum_t s_t (M_t - S_t) / S_t with s_t = -1 for lower-is-better.
double compute_delta_m(const std::map<std::string, double>& mtl, const std::map<std::string, double>& stl,
                       const std::map<std::string, bool>& lower_is_better);

}  // namespace dmtl::metrics
