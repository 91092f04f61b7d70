// SPDX-License-Identifier: Apache-2.0
#include "dmtl/sample.hpp"

#include <cmath>

namespace dmtl {

TaskLabel TaskLabel::regression(Tensor values) {
  TaskLabel l;
  if (values.rank() != 3) throw ShapeError("regression label must be [H, W, C], got " + to_string(values.shape()));
  const int c = values.dim(2);
  const std::size_t pixels = values.numel() / static_cast<std::size_t>(c);
  l.valid.assign(pixels, 1);
  for (std::size_t p = 0; p < pixels; ++p) {
    double norm = 0.0;
    bool finite = true;
    for (int j = 0; j < c; ++j) {
      const double v = values[p * c + j];
      finite = finite && std::isfinite(v);
      norm += v * v;
    }
    if (!finite || (c > 1 && norm == 0.0)) l.valid[p] = 0;
  }
  l.values = std::move(values);
  return l;
}

TaskLabel TaskLabel::classification(LabelMap classes) {
  if (classes.shape.size() != 2) throw ShapeError("class label must be [H, W], got " + to_string(classes.shape));
  TaskLabel l;
  l.classes = std::move(classes);
  return l;
}

void PartialLabelSample::validate() const {
  if (labeled_tasks.empty()) throw Error("sample '" + id + "' has no labeled task");
  if (labels.size() != labeled_tasks.size()) throw Error("sample '" + id + "': labels do not match labeled tasks");
  for (const auto& [name, _] : labels)
    if (!labeled_tasks.count(name)) throw Error("sample '" + id + "': label for unlisted task '" + name + "'");
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("sample '" + id + "': image must be [H, W, 3]");
}

}  // namespace dmtl
