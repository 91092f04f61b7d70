// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmtl/sample.hpp"
#include "dmtl/task.hpp"

namespace dmtl::data {

struct SceneConfig {
  int height = 64;
  int width = 64;
  int min_shapes = 2;
  int max_shapes = 5;
  /// Segmentation classes including background 0.
  int classes = 5;
  double near = 1.0;
  double far = 4.0;
  /// Std of the additive image noise before quantization.
  double noise_std = 0.02;

  void validate() const;
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

/// Planar layer z = c + a*u + b*v over normalized coordinates u, v in [-0.5, 0.5].
struct ScenePrimitive {
  enum class Shape { plane, rectangle, ellipse };
  Shape shape = Shape::plane;
  int cls = 0;
  double c = 0, a = 0, b = 0;
  /// Centre and half-extents of rectangles and ellipses.
  double cu = 0, cv = 0, ru = 0, rv = 0;

  bool covers(double u, double v) const;
  double depth(double u, double v) const { return c + a * u + b * v; }
  std::array<double, 3> normal() const;
};

/// Normalized coordinate of pixel centre i along an axis of n pixels.
inline double pixel_coord(int i, int n) { return (i + 0.5) / n - 0.5; }

/// Rendered scene with mutually consistent full labels.
struct Scene {
  /// [H, W, 3], multiples of 1/255.
  Tensor image;
  /// [H, W]; background pixels bordering a shape hold kIgnoreIndex.
  LabelMap segmentation;
  /// [H, W, 1] in [near, far].
  Tensor depth;
  /// [H, W, 3] unit vectors.
  Tensor normal;
  /// Index of the visible primitive per pixel; 0 is the background plane.
  std::vector<int> owner;
  /// Index 0 is the background plane.
  std::vector<ScenePrimitive> primitives;
};

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

/// Foreground mask (class != 0); ignore pixels stay ignored.
LabelMap saliency_from_segmentation(const LabelMap& seg);
/// 1 where a 4-neighbour carries a different segmentation value.
LabelMap boundary_from_segmentation(const LabelMap& seg);

/// Full label of `task` for a scene.
TaskLabel scene_label(const Scene& scene, const TaskSpec& task);

enum class LabelSetting { one_label, random_label, full };

std::string_view to_string(LabelSetting s);
LabelSetting label_setting_from_string(std::string_view s);

struct LabelMapping {
  LabelSetting setting = LabelSetting::one_label;
  /// Labeled task names per image, in task order.
  std::vector<std::vector<std::string>> per_image;

  /// Every set nonempty and within `tasks`; setting-specific sizes; every task used.
  void validate(const std::vector<TaskSpec>& tasks) const;
  std::vector<std::size_t> task_counts(const std::vector<TaskSpec>& tasks) const;
};

LabelMapping assign_partial_labels(std::size_t n_images, const std::vector<TaskSpec>& tasks, LabelSetting setting,
                                   std::uint64_t seed);

struct DatasetSpec {
  SceneConfig scene;
  std::vector<TaskSpec> tasks = default_tasks();
  std::size_t n = 64;
  LabelSetting setting = LabelSetting::one_label;
  std::uint64_t seed = 0;
};

/// Writes images, every task's full labels and mapping.txt under root.
/// Scene i uses seed + i.
void generate_dataset(const std::filesystem::path& root, const DatasetSpec& spec);

enum class LabelView {
  /// Only the tasks listed in the mapping.
  mapped,
  /// Every task's label (evaluation).
  all,
};

/// Directory dataset:
///   images/{id}.png, {task}/{id}.png (classification) or {task}/{id}.npy
///   (regression), mapping.txt with `# setting ...`, `# tasks name:kind:channels,...`
///   headers and `id<TAB>task,task` lines.
class Dataset {
 public:
  /// Validates the mapping and the presence of every listed file.
  static Dataset open(const std::filesystem::path& root);

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<TaskSpec>& tasks() const noexcept { return tasks_; }
  const LabelMapping& mapping() const noexcept { return mapping_; }
  const std::filesystem::path& root() const noexcept { return root_; }

  /// Reads image and labels from disk.
  PartialLabelSample load(std::size_t i, LabelView view = LabelView::mapped) const;
  std::vector<PartialLabelSample> load_all(LabelView view = LabelView::mapped) const;

 private:
  std::filesystem::path label_path(const std::string& id, const TaskSpec& task) const;

  std::filesystem::path root_;
  std::vector<TaskSpec> tasks_;
  std::vector<std::string> ids_;
  LabelMapping mapping_;
};

std::filesystem::path label_file(const std::filesystem::path& root, const std::string& id, const TaskSpec& task);

}  // namespace dmtl::data
