// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace dmtl {

enum class TaskKind { segmentation, depth, normal, saliency, boundary, parsing };
enum class LossKind { cross_entropy, l1 };
enum class MetricKind { miou, abs_err, mean_angle_err, max_f, ods_f };

std::string_view to_string(TaskKind k);
std::string_view to_string(LossKind k);
std::string_view to_string(MetricKind k);
TaskKind task_kind_from_string(std::string_view s);

inline constexpr int kIgnoreIndex = 255;

/// Declarative description of one dense prediction task.
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::segmentation;
  int out_channels = 1;
  LossKind loss = LossKind::cross_entropy;
  MetricKind metric = MetricKind::miou;
  bool lower_is_better = false;

  /// Fills loss, metric and direction from the kind.
  static TaskSpec make(std::string name, TaskKind kind, int out_channels);

  bool is_classification() const noexcept { return loss == LossKind::cross_entropy; }
  /// Throws on out_channels < 1 or a kind/loss mismatch.
  void validate() const;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// The three tasks of the synthetic benchmark.
std::vector<TaskSpec> default_tasks(int segmentation_classes = 5);

/// Index of `name` in `tasks`; throws if absent.
std::size_t task_index(const std::vector<TaskSpec>& tasks, std::string_view name);

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);

}  // namespace dmtl
