// SPDX-License-Identifier: Apache-2.0
#include "dmtl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dmtl::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes, int ignore_index)
    : num_classes_(num_classes),
      ignore_index_(ignore_index),
      counts_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 1) throw Error("ConfusionMatrix: num_classes must be >= 1");
}

void ConfusionMatrix::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw ShapeError("compute_miou: prediction and ground truth differ in size");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i];
    if (g == ignore_index_) continue;
    const int p = pred[i];
    if (g < 0 || g >= num_classes_) throw Error("compute_miou: gt label " + std::to_string(g) + " out of range");
    if (p < 0 || p >= num_classes_) throw Error("compute_miou: predicted label " + std::to_string(p) + " out of range");
    ++counts_[static_cast<std::size_t>(g) * num_classes_ + p];
    ++valid_;
  }
}

std::int64_t ConfusionMatrix::count(int gt_class, int pred_class) const {
  return counts_[static_cast<std::size_t>(gt_class) * num_classes_ + pred_class];
}

double ConfusionMatrix::miou() const {
  if (valid_ == 0) throw Error("compute_miou: no valid pixels");
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes_; ++c) {
    std::int64_t gt_c = 0, pred_c = 0;
    for (int k = 0; k < num_classes_; ++k) {
      gt_c += count(c, k);
      pred_c += count(k, c);
    }
    if (gt_c == 0) continue;
    const std::int64_t inter = count(c, c);
    total += static_cast<double>(inter) / static_cast<double>(gt_c + pred_c - inter);
    ++present;
  }
  return total / present;
}

double compute_miou(const LabelMap& pred, const LabelMap& gt, int num_classes, int ignore_index) {
  if (pred.shape != gt.shape) {
    throw ShapeError("compute_miou: shape mismatch " + to_string(pred.shape) + " vs " + to_string(gt.shape));
  }
  ConfusionMatrix cm(num_classes, ignore_index);
  cm.add(pred.data, gt.data);
  return cm.miou();
}

double MeanAccumulator::mean() const {
  if (count_ == 0) throw Error("mean of an empty accumulator: no valid pixels");
  return sum_ / static_cast<double>(count_);
}

namespace {

std::size_t checked_pixels(const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask, int channels,
                           const char* op) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  }
  const std::size_t pixels = pred.numel() / static_cast<std::size_t>(channels);
  if (mask.size() != pixels) throw ShapeError(std::string(op) + ": mask size does not match pixel count");
  return pixels;
}

}  // namespace

void accumulate_abs_err(MeanAccumulator& acc, const Tensor& pred, const Tensor& gt,
                        std::span<const std::uint8_t> mask) {
  const int c = mask.empty() ? 1 : static_cast<int>(pred.numel() / std::max<std::size_t>(mask.size(), 1));
  const std::size_t pixels = checked_pixels(pred, gt, mask, std::max(c, 1), "compute_abs_err");
  for (std::size_t p = 0; p < pixels; ++p) {
    if (!mask[p]) continue;
    double e = 0.0;
    for (int j = 0; j < c; ++j) e += std::abs(pred[p * c + j] - gt[p * c + j]);
    acc.add(e / c);
  }
}

double compute_abs_err(const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask) {
  MeanAccumulator acc;
  accumulate_abs_err(acc, pred, gt, mask);
  if (acc.count() == 0) throw Error("compute_abs_err: empty validity mask");
  return acc.mean();
}

void accumulate_angle_err(MeanAccumulator& acc, const Tensor& pred, const Tensor& gt,
                          std::span<const std::uint8_t> mask) {
  if (pred.rank() == 0 || pred.shape().back() != 3) {
    throw ShapeError("compute_mean_angle_err: expected 3-vector maps, got " + to_string(pred.shape()));
  }
  const std::size_t pixels = checked_pixels(pred, gt, mask, 3, "compute_mean_angle_err");
  for (std::size_t p = 0; p < pixels; ++p) {
    if (!mask[p]) continue;
    const double* a = pred.data() + 3 * p;
    const double* b = gt.data() + 3 * p;
    const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    if (na == 0.0 || nb == 0.0) {
      throw Error("compute_mean_angle_err: zero-norm vector at valid pixel " + std::to_string(p));
    }
    const double cosine = std::clamp((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb), -1.0, 1.0);
    acc.add(std::acos(cosine) * 180.0 / std::numbers::pi);
  }
}

double compute_mean_angle_err(const Tensor& pred, const Tensor& gt, std::span<const std::uint8_t> mask) {
  MeanAccumulator acc;
  accumulate_angle_err(acc, pred, gt, mask);
  if (acc.count() == 0) throw Error("compute_mean_angle_err: empty validity mask");
  return acc.mean();
}

const std::vector<double>& f_measure_thresholds() {
  static const std::vector<double> grid = [] {
    std::vector<double> g(51);
    for (int i = 0; i <= 50; ++i) g[static_cast<std::size_t>(i)] = i / 50.0;
    return g;
  }();
  return grid;
}

double f1_from_counts(double tp, double fp, double fn) {
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

ThresholdCounts::ThresholdCounts()
    : tp_(f_measure_thresholds().size(), 0.0),
      fp_(f_measure_thresholds().size(), 0.0),
      fn_(f_measure_thresholds().size(), 0.0) {}

void ThresholdCounts::add(std::span<const double> prob, std::span<const std::uint8_t> gt) {
  if (prob.size() != gt.size()) throw ShapeError("compute_max_f: prediction and ground truth differ in size");
  const auto& grid = f_measure_thresholds();
  for (std::size_t p = 0; p < prob.size(); ++p) {
    if (prob[p] < 0.0 || prob[p] > 1.0 || std::isnan(prob[p])) {
      throw Error("compute_max_f: probability outside [0, 1] at pixel " + std::to_string(p));
    }
    const bool pos = gt[p] != 0;
    positives_ += pos ? 1 : 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const bool pred = prob[p] >= grid[i];
      if (pred && pos) tp_[i] += 1;
      else if (pred) fp_[i] += 1;
      else if (pos) fn_[i] += 1;
    }
  }
}

double ThresholdCounts::f_at(std::size_t i) const { return f1_from_counts(tp_[i], fp_[i], fn_[i]); }

MaxFResult ThresholdCounts::max_f() const {
  MaxFResult r;
  if (positives_ == 0) {
    r.degenerate = true;
    return r;
  }
  const auto& grid = f_measure_thresholds();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double f = f_at(i);
    if (f > r.value) {
      r.value = f;
      r.threshold = grid[i];
    }
  }
  return r;
}

MaxFResult compute_max_f(std::span<const double> prob, std::span<const std::uint8_t> gt, ThresholdGrid grid) {
  if (grid == ThresholdGrid::uniform51) {
    ThresholdCounts counts;
    counts.add(prob, gt);
    return counts.max_f();
  }
  if (prob.size() != gt.size()) throw ShapeError("compute_max_f: prediction and ground truth differ in size");
  MaxFResult r;
  const double positives = static_cast<double>(std::count_if(gt.begin(), gt.end(), [](auto g) { return g != 0; }));
  if (positives == 0) {
    r.degenerate = true;
    return r;
  }
  // Sweep thresholds over the distinct predicted values, highest first.
  std::vector<std::size_t> order(prob.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (gt[order[k]]) tp += 1;
    else fp += 1;
    if (k + 1 < order.size() && prob[order[k + 1]] == prob[order[k]]) continue;
    const double f = f1_from_counts(tp, fp, positives - tp);
    if (f > r.value) {
      r.value = f;
      r.threshold = prob[order[k]];
    }
  }
  return r;
}

BoundaryCounts::BoundaryCounts(int tolerance_px)
    : tolerance_(tolerance_px),
      matched_pred_(f_measure_thresholds().size(), 0.0),
      total_pred_(f_measure_thresholds().size(), 0.0),
      matched_gt_(f_measure_thresholds().size(), 0.0) {
  if (tolerance_px < 0) throw Error("compute_ods_f: tolerance must be >= 0");
}

void BoundaryCounts::add(const Tensor& prob, const BinaryMap& gt) {
  const int h = gt.height, w = gt.width;
  if (prob.numel() != static_cast<std::size_t>(h) * w || gt.data.size() != prob.numel()) {
    throw ShapeError("compute_ods_f: probability map " + to_string(prob.shape()) + " does not match " +
                     std::to_string(h) + "x" + std::to_string(w) + " ground truth");
  }
  const int t = tolerance_;
  // gt dilated by the tolerance window, and the window maximum of prob.
  std::vector<std::uint8_t> gt_near(gt.data.size(), 0);
  std::vector<double> prob_max(gt.data.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool near = false;
      double mx = 0.0;
      for (int yy = std::max(0, y - t); yy <= std::min(h - 1, y + t); ++yy)
        for (int xx = std::max(0, x - t); xx <= std::min(w - 1, x + t); ++xx) {
          const std::size_t q = static_cast<std::size_t>(yy) * w + xx;
          near = near || gt.data[q] != 0;
          mx = std::max(mx, prob[q]);
        }
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      gt_near[p] = near ? 1 : 0;
      prob_max[p] = mx;
    }
  }
  const auto& grid = f_measure_thresholds();
  for (std::size_t p = 0; p < gt.data.size(); ++p) {
    const bool is_gt = gt.data[p] != 0;
    total_gt_ += is_gt ? 1 : 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (prob[p] >= grid[i]) {
        total_pred_[i] += 1;
        if (gt_near[p]) matched_pred_[i] += 1;
      }
      if (is_gt && prob_max[p] >= grid[i]) matched_gt_[i] += 1;
    }
  }
  ++images_;
}

double BoundaryCounts::f_at(std::size_t i) const {
  const double precision = total_pred_[i] > 0 ? matched_pred_[i] / total_pred_[i] : 0.0;
  const double recall = total_gt_ > 0 ? matched_gt_[i] / total_gt_ : 0.0;
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

double BoundaryCounts::ods_f() const {
  if (images_ == 0) throw Error("compute_ods_f: empty dataset");
  double best = 0.0;
  for (std::size_t i = 0; i < f_measure_thresholds().size(); ++i) best = std::max(best, f_at(i));
  return best;
}

double compute_ods_f(const std::vector<Tensor>& probs, const std::vector<BinaryMap>& gts, int tolerance_px) {
  if (probs.size() != gts.size()) throw ShapeError("compute_ods_f: image count mismatch");
  BoundaryCounts counts(tolerance_px);
  for (std::size_t i = 0; i < probs.size(); ++i) counts.add(probs[i], gts[i]);
  return counts.ods_f();
}

double compute_delta_m(const std::map<std::string, double>& mtl, const std::map<std::string, double>& stl,
                       const std::map<std::string, bool>& lower_is_better) {
  if (mtl.empty()) throw Error("compute_delta_m: no tasks");
  if (mtl.size() != stl.size()) throw Error("compute_delta_m: task keys differ between models");
  double total = 0.0;
  for (const auto& [task, m] : mtl) {
    auto s = stl.find(task);
    if (s == stl.end()) throw Error("compute_delta_m: task '" + task + "' missing from single-task metrics");
    auto dir = lower_is_better.find(task);
    if (dir == lower_is_better.end()) throw Error("compute_delta_m: no metric direction for task '" + task + "'");
    if (s->second == 0.0) throw Error("compute_delta_m: zero single-task value for task '" + task + "'");
    const double sign = dir->second ? -1.0 : 1.0;
    total += sign * (m - s->second) / s->second;
  }
  return 100.0 * total / static_cast<double>(mtl.size());
}

}  // namespace dmtl::metrics
