// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmtl/metrics.hpp"
#include "dmtl/model.hpp"
#include "dmtl/sample.hpp"

namespace dmtl::train {

struct TrainConfig {
  int steps = 200;
  int batch_size = 4;
  double lr = 1e-3;
  /// Polynomial decay lr * (1 - step / steps)^power.
  double lr_power = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Missing tasks weigh 1.
  std::map<std::string, double> task_weights;
  /// Evaluate and track the best checkpoint every N steps; 0 evaluates only at the end.
  int eval_every = 100;

  double weight(const std::string& task) const;
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Named seeds of every random stream in a run.
struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t noise = 1;
  std::uint64_t init = 2;
  std::uint64_t eval = 3;
  friend bool operator==(const Seeds&, const Seeds&) = default;
};

void to_json(nlohmann::json& j, const Seeds& s);
void from_json(const nlohmann::json& j, Seeds& s);

double poly_lr(double base, int step, int total_steps, double power);

/// Mean loss of a prediction map [N, h, w, C] against one label per row.
/// Predictions are resized bilinearly to the label resolution first.
ag::Var task_loss(const ag::Var& pred, const std::vector<const TaskLabel*>& labels, const TaskSpec& task);

/// [N, H, W, 3] batch of the given samples' images.
Tensor stack_images(const std::vector<const PartialLabelSample*>& batch);

struct LossReport {
  std::map<std::string, double> per_task_initial;
  std::map<std::string, double> per_task_denoised;
  double total = 0.0;
  int step = 0;
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

void to_json(nlohmann::json& j, const LossReport& r);

/// Adam with bias correction over every parameter of a registry. Parameters
/// without a gradient in a step are skipped and keep their own step count.
class Adam {
 public:
  Adam(const nn::ParameterRegistry& reg, double beta1, double beta2, double eps);
  Adam(const nn::ParameterRegistry& reg, const TrainConfig& cfg)
      : Adam(reg, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

  /// Applies one update from the accumulated gradients.
  void step(double lr);

  /// Updates applied to each parameter.
  std::vector<std::int64_t>& step_counts() noexcept { return t_; }
  std::vector<Tensor>& first_moments() noexcept { return m_; }
  std::vector<Tensor>& second_moments() noexcept { return v_; }
  const std::vector<std::int64_t>& step_counts() const noexcept { return t_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }
  const std::vector<nn::NamedVar>& parameters() const noexcept { return params_; }

 private:
  std::vector<nn::NamedVar> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::vector<std::int64_t> t_;
};

/// Rows of `batch` labeled for `task`.
std::vector<int> labeled_rows(const std::vector<const PartialLabelSample*>& batch, const std::string& task);

/// Training objective of one batch: sum over labeled tasks of
/// weight * (initial loss + denoised loss). Fills `report`; throws on a
/// non-finite total.
ag::Var batch_loss(const std::vector<const PartialLabelSample*>& batch, const DiffusionModel& model,
                   const TrainConfig& cfg, std::uint64_t noise_seed, int step, LossReport& report);

/// One optimization step: full initial pass and conditioning over all tasks,
/// then diffusion, denoising and supervision of the labeled tasks only.
/// Noise of task t at this step comes from Rng{noise_seed, step, t}.
LossReport training_step(const std::vector<const PartialLabelSample*>& batch, DiffusionModel& model, Adam& opt,
                         const TrainConfig& cfg, std::uint64_t noise_seed, int step);

/// One step of a single-task model on the rows labeled for its task. Returns
/// the loss, or NaN when the batch holds no such row.
double single_task_step(const std::vector<const PartialLabelSample*>& batch, SingleTaskModel& model, Adam& opt,
                        const TrainConfig& cfg, int step);

/// Accumulates the metric of every task from prediction maps at any resolution.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::vector<TaskSpec> tasks);
  /// pred is [1, h, w, C] logits or values.
  void add(const std::string& task, const Tensor& pred, const TaskLabel& label);
  metrics::MetricReport report() const;

 private:
  struct State;
  std::vector<TaskSpec> tasks_;
  std::vector<std::shared_ptr<State>> state_;
};

struct EvalReport {
  metrics::MetricReport initial;
  metrics::MetricReport denoised;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Metrics of the initial and denoised maps over fully labeled samples, in
/// eval mode. Noise of sample i and task t comes from Rng{eval_seed, i, t}.
EvalReport evaluate(const DiffusionModel& model, const std::vector<PartialLabelSample>& samples,
                    std::uint64_t eval_seed);

/// Metrics of single-task models, one per task.
metrics::MetricReport evaluate_single(const std::vector<const SingleTaskModel*>& models,
                                      const std::vector<PartialLabelSample>& samples);

/// Fills delta_m of `report` from per-task baseline numbers.
void attach_delta_m(metrics::MetricReport& report, const metrics::MetricReport& baseline,
                    const std::vector<TaskSpec>& tasks);

/// Key -> value text, one `task value` pair per line and `delta_m` last.
std::string format_report(const metrics::MetricReport& r);
metrics::MetricReport parse_report(const std::string& text);

nlohmann::json report_json(const metrics::MetricReport& r);

}  // namespace dmtl::train
