// SPDX-License-Identifier: Apache-2.0
#include "dmtl/task.hpp"

#include "dmtl/tensor.hpp"

namespace dmtl {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::segmentation: return "segmentation";
    case TaskKind::depth: return "depth";
    case TaskKind::normal: return "normal";
    case TaskKind::saliency: return "saliency";
    case TaskKind::boundary: return "boundary";
    case TaskKind::parsing: return "parsing";
  }
  return "?";
}

std::string_view to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross_entropy" : "l1"; }

std::string_view to_string(MetricKind k) {
  switch (k) {
    case MetricKind::miou: return "miou";
    case MetricKind::abs_err: return "abs_err";
    case MetricKind::mean_angle_err: return "m_err";
    case MetricKind::max_f: return "max_f";
    case MetricKind::ods_f: return "ods_f";
  }
  return "?";
}

TaskKind task_kind_from_string(std::string_view s) {
  for (TaskKind k : {TaskKind::segmentation, TaskKind::depth, TaskKind::normal, TaskKind::saliency,
                     TaskKind::boundary, TaskKind::parsing}) {
    if (to_string(k) == s) return k;
  }
  throw Error("unknown task kind: " + std::string(s));
}

TaskSpec TaskSpec::make(std::string name, TaskKind kind, int out_channels) {
  TaskSpec t;
  t.name = std::move(name);
  t.kind = kind;
  t.out_channels = out_channels;
  switch (kind) {
    case TaskKind::segmentation:
    case TaskKind::parsing:
      t.loss = LossKind::cross_entropy;
      t.metric = MetricKind::miou;
      t.lower_is_better = false;
      break;
    case TaskKind::saliency:
      t.loss = LossKind::cross_entropy;
      t.metric = MetricKind::max_f;
      t.lower_is_better = false;
      break;
    case TaskKind::boundary:
      t.loss = LossKind::cross_entropy;
      t.metric = MetricKind::ods_f;
      t.lower_is_better = false;
      break;
    case TaskKind::depth:
      t.loss = LossKind::l1;
      t.metric = MetricKind::abs_err;
      t.lower_is_better = true;
      break;
    case TaskKind::normal:
      t.loss = LossKind::l1;
      t.metric = MetricKind::mean_angle_err;
      t.lower_is_better = true;
      break;
  }
  return t;
}

void TaskSpec::validate() const {
  if (name.empty()) throw Error("task with empty name");
  if (out_channels < 1) throw Error("task '" + name + "': out_channels must be >= 1");
  const bool regression = kind == TaskKind::depth || kind == TaskKind::normal;
  if (regression != (loss == LossKind::l1)) {
    throw Error("task '" + name + "': loss " + std::string(to_string(loss)) + " inconsistent with kind " +
                std::string(to_string(kind)));
  }
  if (kind == TaskKind::normal && out_channels != 3) throw Error("task '" + name + "': normals need 3 channels");
  if ((kind == TaskKind::saliency || kind == TaskKind::boundary) && out_channels != 2) {
    throw Error("task '" + name + "': binary tasks need 2 logit channels");
  }
  if ((kind == TaskKind::segmentation || kind == TaskKind::parsing) && out_channels < 2) {
    throw Error("task '" + name + "': segmentation needs >= 2 classes");
  }
}

std::vector<TaskSpec> default_tasks(int segmentation_classes) {
  return {TaskSpec::make("semseg", TaskKind::segmentation, segmentation_classes),
          TaskSpec::make("depth", TaskKind::depth, 1), TaskSpec::make("normal", TaskKind::normal, 3)};
}

std::size_t task_index(const std::vector<TaskSpec>& tasks, std::string_view name) {
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i].name == name) return i;
  throw Error("unknown task: " + std::string(name));
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = nlohmann::json{{"name", t.name}, {"kind", to_string(t.kind)}, {"out_channels", t.out_channels}};
}

void from_json(const nlohmann::json& j, TaskSpec& t) {
  for (const auto& [key, _] : j.items()) {
    if (key != "name" && key != "kind" && key != "out_channels") throw Error("unknown task key: " + key);
  }
  t = TaskSpec::make(j.at("name").get<std::string>(), task_kind_from_string(j.at("kind").get<std::string>()),
                     j.at("out_channels").get<int>());
  t.validate();
}

}  // namespace dmtl
