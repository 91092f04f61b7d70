// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dmtl/task.hpp"
#include "dmtl/tensor.hpp"

namespace dmtl {

/// Dense ground truth of one task for one image.
struct TaskLabel {
  /// Class ids [H, W] for classification tasks; ignore pixels hold kIgnoreIndex.
  LabelMap classes;
  /// Values [H, W, C] for regression tasks.
  Tensor values;
  /// One entry per pixel for regression tasks.
  std::vector<std::uint8_t> valid;

  /// Regression label with validity derived from the values: finite entries,
  /// and a nonzero vector when C > 1.
  static TaskLabel regression(Tensor values);
  static TaskLabel classification(LabelMap classes);

  friend bool operator==(const TaskLabel&, const TaskLabel&) = default;
};

/// Image plus the labels of the tasks annotated for it.
struct PartialLabelSample {
  std::string id;
  /// [H, W, 3] in [0, 1].
  Tensor image;
  std::map<std::string, TaskLabel> labels;
  std::set<std::string> labeled_tasks;

  bool has_label(const std::string& task) const { return labeled_tasks.count(task) != 0; }
  /// Throws unless labeled_tasks is nonempty and equals the keys of labels.
  void validate() const;
};

}  // namespace dmtl
