// SPDX-License-Identifier: Apache-2.0
#include "dmtl/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dmtl/io.hpp"
#include "dmtl/rng.hpp"

namespace fs = std::filesystem;

namespace dmtl::data {

void SceneConfig::validate() const {
  if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
    throw Error("scene size must be a positive multiple of 4, got " + std::to_string(height) + "x" + std::to_string(width));
  if (min_shapes < 0 || max_shapes < min_shapes) throw Error("scene shape count range is invalid");
  if (classes < 2 || classes > 255) throw Error("scene classes must be in [2, 255]");
  if (!(near > 0.0) || !(far > near)) throw Error("scene depth range must satisfy 0 < near < far");
  if (!(noise_std >= 0.0)) throw Error("scene noise_std must be non-negative");
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"height", c.height}, {"width", c.width}, {"min_shapes", c.min_shapes},
                     {"max_shapes", c.max_shapes}, {"classes", c.classes}, {"near", c.near},
                     {"far", c.far}, {"noise_std", c.noise_std}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  static const std::set<std::string> keys{"height", "width", "min_shapes", "max_shapes",
                                          "classes", "near", "far", "noise_std"};
  for (const auto& [k, _] : j.items())
    if (!keys.count(k)) throw Error("unknown scene config key '" + k + "'");
  SceneConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.min_shapes = j.value("min_shapes", d.min_shapes);
  c.max_shapes = j.value("max_shapes", d.max_shapes);
  c.classes = j.value("classes", d.classes);
  c.near = j.value("near", d.near);
  c.far = j.value("far", d.far);
  c.noise_std = j.value("noise_std", d.noise_std);
}

bool ScenePrimitive::covers(double u, double v) const {
  switch (shape) {
    case Shape::plane: return true;
    case Shape::rectangle: return std::abs(u - cu) <= ru && std::abs(v - cv) <= rv;
    case Shape::ellipse: {
      const double du = (u - cu) / ru, dv = (v - cv) / rv;
      return du * du + dv * dv <= 1.0;
    }
  }
  return false;
}

std::array<double, 3> ScenePrimitive::normal() const {
  const double n = std::sqrt(a * a + b * b + 1.0);
  return {-a / n, -b / n, 1.0 / n};
}

namespace {

std::array<double, 3> class_albedo(int cls, int classes) {
  if (cls == 0) return {0.55, 0.55, 0.6};
  const double h = static_cast<double>(cls - 1) / std::max(1, classes - 1);
  return {0.5 + 0.45 * std::cos(6.2832 * h), 0.5 + 0.45 * std::cos(6.2832 * (h - 0.333)),
          0.5 + 0.45 * std::cos(6.2832 * (h - 0.667))};
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const double span = cfg.far - cfg.near;

  std::vector<ScenePrimitive> prims;
  {
    ScenePrimitive bg;
    bg.a = rng.uniform(-0.1, 0.1) * span;
    bg.b = rng.uniform(0.0, 0.3) * span;
    const double reach = (std::abs(bg.a) + std::abs(bg.b)) / 2.0;
    bg.c = cfg.far - reach;
    prims.push_back(bg);
  }
  const int count = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  for (int k = 0; k < count; ++k) {
    ScenePrimitive p;
    p.shape = rng.uniform(0.0, 1.0) < 0.5 ? ScenePrimitive::Shape::rectangle : ScenePrimitive::Shape::ellipse;
    p.cls = rng.uniform_int(1, cfg.classes - 1);
    p.a = rng.uniform(-0.25, 0.25) * span;
    p.b = rng.uniform(-0.25, 0.25) * span;
    const double reach = (std::abs(p.a) + std::abs(p.b)) / 2.0;
    p.c = rng.uniform(cfg.near + reach, cfg.near + 0.6 * span);
    p.c = std::min(p.c, cfg.far - reach);
    p.cu = rng.uniform(-0.35, 0.35);
    p.cv = rng.uniform(-0.35, 0.35);
    p.ru = rng.uniform(0.08, 0.25);
    p.rv = rng.uniform(0.08, 0.25);
    prims.push_back(p);
  }

  const int H = cfg.height, W = cfg.width;
  Scene s;
  s.image = Tensor({H, W, 3});
  s.depth = Tensor({H, W, 1});
  s.normal = Tensor({H, W, 3});
  s.segmentation = LabelMap{{H, W}, std::vector<int>(static_cast<std::size_t>(H) * W, 0)};
  s.owner.assign(static_cast<std::size_t>(H) * W, 0);

  const std::array<double, 3> light = [] {
    const double n = std::sqrt(0.3 * 0.3 + 0.4 * 0.4 + 1.0);
    return std::array<double, 3>{0.3 / n, -0.4 / n, 1.0 / n};
  }();
  Tensor noise({H, W, 3});
  rng.fill_normal(noise, cfg.noise_std);

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double u = pixel_coord(x, W), v = pixel_coord(y, H);
      std::size_t best = 0;
      double zbest = prims[0].depth(u, v);
      for (std::size_t k = 1; k < prims.size(); ++k) {
        if (!prims[k].covers(u, v)) continue;
        const double z = prims[k].depth(u, v);
        if (z < zbest) {
          zbest = z;
          best = k;
        }
      }
      const std::size_t px = static_cast<std::size_t>(y) * W + x;
      const ScenePrimitive& p = prims[best];
      s.owner[px] = static_cast<int>(best);
      s.segmentation.data[px] = p.cls;
      s.depth[px] = zbest;
      const auto n = p.normal();
      for (int j = 0; j < 3; ++j) s.normal[px * 3 + j] = n[j];
      const double lambert = std::max(0.0, n[0] * light[0] + n[1] * light[1] + n[2] * light[2]);
      const double fog = 0.35 * (zbest - cfg.near) / span;
      const auto albedo = class_albedo(p.cls, cfg.classes);
      for (int j = 0; j < 3; ++j) {
        const double lit = albedo[j] * (0.25 + 0.75 * lambert);
        const double val = std::clamp((1.0 - fog) * lit + fog * 0.8 + noise[px * 3 + j], 0.0, 1.0);
        s.image[px * 3 + j] = static_cast<double>(std::lround(val * 255.0)) / 255.0;
      }
    }
  }

  // Background pixels touching a shape become the ignore ring.
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t px = static_cast<std::size_t>(y) * W + x;
      if (s.owner[px] != 0) continue;
      bool touches = false;
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
        if (s.owner[static_cast<std::size_t>(yy) * W + xx] != 0) touches = true;
      }
      if (touches) s.segmentation.data[px] = kIgnoreIndex;
    }
  }
  s.primitives = std::move(prims);
  return s;
}

LabelMap saliency_from_segmentation(const LabelMap& seg) {
  LabelMap out = seg;
  for (int& v : out.data)
    if (v != kIgnoreIndex) v = v != 0 ? 1 : 0;
  return out;
}

LabelMap boundary_from_segmentation(const LabelMap& seg) {
  if (seg.shape.size() != 2) throw ShapeError("segmentation map must be [H, W]");
  const int H = seg.shape[0], W = seg.shape[1];
  LabelMap out{seg.shape, std::vector<int>(seg.data.size(), 0)};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t px = static_cast<std::size_t>(y) * W + x;
      if (seg.data[px] == kIgnoreIndex) {
        out.data[px] = kIgnoreIndex;
        continue;
      }
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
        if (seg.data[static_cast<std::size_t>(yy) * W + xx] != seg.data[px]) out.data[px] = 1;
      }
    }
  }
  return out;
}

TaskLabel scene_label(const Scene& scene, const TaskSpec& task) {
  switch (task.kind) {
    case TaskKind::segmentation: return TaskLabel::classification(scene.segmentation);
    case TaskKind::depth: return TaskLabel::regression(scene.depth);
    case TaskKind::normal: return TaskLabel::regression(scene.normal);
    case TaskKind::saliency: return TaskLabel::classification(saliency_from_segmentation(scene.segmentation));
    case TaskKind::boundary: return TaskLabel::classification(boundary_from_segmentation(scene.segmentation));
    case TaskKind::parsing: break;
  }
  throw Error("synthetic scenes have no labels for task '" + task.name + "' of kind " + std::string(to_string(task.kind)));
}

std::string_view to_string(LabelSetting s) {
  switch (s) {
    case LabelSetting::one_label: return "one_label";
    case LabelSetting::random_label: return "random_label";
    case LabelSetting::full: return "full";
  }
  return "?";
}

LabelSetting label_setting_from_string(std::string_view s) {
  if (s == "one_label") return LabelSetting::one_label;
  if (s == "random_label") return LabelSetting::random_label;
  if (s == "full") return LabelSetting::full;
  throw Error("unknown label setting '" + std::string(s) + "' (expected one_label, random_label or full)");
}

std::vector<std::size_t> LabelMapping::task_counts(const std::vector<TaskSpec>& tasks) const {
  std::vector<std::size_t> counts(tasks.size(), 0);
  for (const auto& set : per_image)
    for (const auto& name : set) ++counts[task_index(tasks, name)];
  return counts;
}

void LabelMapping::validate(const std::vector<TaskSpec>& tasks) const {
  const std::size_t T = tasks.size();
  if (T == 0) throw Error("label mapping needs at least one task");
  std::vector<std::size_t> counts(T, 0);
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    const auto& set = per_image[i];
    const std::string where = "image " + std::to_string(i);
    if (set.empty()) throw Error(where + " is labeled for zero tasks");
    std::set<std::string> seen;
    for (const auto& name : set) {
      if (!seen.insert(name).second) throw Error(where + " lists task '" + name + "' twice");
      bool known = false;
      for (std::size_t t = 0; t < T; ++t)
        if (tasks[t].name == name) {
          ++counts[t];
          known = true;
        }
      if (!known) throw Error(where + " lists unknown task '" + name + "'");
    }
    if (setting == LabelSetting::one_label && set.size() != 1)
      throw Error(where + " has " + std::to_string(set.size()) + " tasks under one_label");
    if (setting == LabelSetting::full && set.size() != T)
      throw Error(where + " has " + std::to_string(set.size()) + " tasks under full labeling");
  }
  for (std::size_t t = 0; t < T; ++t)
    if (counts[t] == 0) throw Error("task '" + tasks[t].name + "' is labeled in no image");
}

namespace {

template <class T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<std::string> names_in_order(const std::vector<TaskSpec>& tasks, const std::vector<std::size_t>& picked) {
  std::vector<std::size_t> sorted = picked;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::string> out;
  for (std::size_t t : sorted) out.push_back(tasks[t].name);
  return out;
}

}  // namespace

LabelMapping assign_partial_labels(std::size_t n_images, const std::vector<TaskSpec>& tasks, LabelSetting setting,
                                   std::uint64_t seed) {
  const std::size_t T = tasks.size();
  if (T == 0) throw Error("assign_partial_labels needs at least one task");
  if (n_images < T)
    throw Error("assign_partial_labels needs n_images >= number of tasks (" + std::to_string(n_images) + " < " +
                std::to_string(T) + ")");
  LabelMapping m;
  m.setting = setting;
  m.per_image.resize(n_images);
  switch (setting) {
    case LabelSetting::full: {
      std::vector<std::size_t> all(T);
      std::iota(all.begin(), all.end(), 0);
      for (auto& set : m.per_image) set = names_in_order(tasks, all);
      break;
    }
    case LabelSetting::one_label: {
      Rng rng({seed, 0});
      std::vector<std::size_t> order(n_images);
      std::iota(order.begin(), order.end(), 0);
      seeded_shuffle(order, rng);
      std::vector<std::size_t> task_order(T);
      std::iota(task_order.begin(), task_order.end(), 0);
      seeded_shuffle(task_order, rng);
      for (std::size_t r = 0; r < n_images; ++r) m.per_image[order[r]] = {tasks[task_order[r % T]].name};
      break;
    }
    case LabelSetting::random_label: {
      // Redraw whole mappings until every task is covered so that sizes stay uniform.
      for (std::uint64_t attempt = 0;; ++attempt) {
        if (attempt == 1000) throw Error("random_label assignment could not cover every task");
        Rng rng({seed, 1, attempt});
        std::vector<std::size_t> counts(T, 0);
        for (auto& set : m.per_image) {
          const int k = rng.uniform_int(1, static_cast<int>(T));
          std::vector<std::size_t> idx(T);
          std::iota(idx.begin(), idx.end(), 0);
          seeded_shuffle(idx, rng);
          idx.resize(static_cast<std::size_t>(k));
          for (std::size_t t : idx) ++counts[t];
          set = names_in_order(tasks, idx);
        }
        if (std::all_of(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; })) break;
      }
      break;
    }
  }
  m.validate(tasks);
  return m;
}

fs::path label_file(const fs::path& root, const std::string& id, const TaskSpec& task) {
  return root / task.name / (id + (task.is_classification() ? ".png" : ".npy"));
}

namespace {

std::string image_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", i);
  return buf;
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

void write_label(const fs::path& path, const TaskLabel& label, const TaskSpec& task) {
  if (task.is_classification()) {
    io::Image8 img;
    img.height = label.classes.shape[0];
    img.width = label.classes.shape[1];
    img.channels = 1;
    img.pixels.reserve(label.classes.data.size());
    for (int v : label.classes.data) {
      if (v < 0 || v > 255) throw Error("class id out of 8-bit range in " + path.string());
      img.pixels.push_back(static_cast<std::uint8_t>(v));
    }
    io::write_png(path, img);
  } else {
    io::write_npy(path, label.values);
  }
}

TaskLabel read_label(const fs::path& path, const TaskSpec& task) {
  if (!fs::exists(path)) throw Error("missing label file " + path.string());
  if (task.is_classification()) {
    const io::Image8 img = io::read_png(path);
    if (img.channels != 1) throw Error("class label must be a grayscale PNG: " + path.string());
    LabelMap m{{img.height, img.width}, std::vector<int>(img.pixels.begin(), img.pixels.end())};
    return TaskLabel::classification(std::move(m));
  }
  Tensor t = io::read_npy(path);
  if (t.rank() != 3 || t.dim(2) != task.out_channels)
    throw Error("label " + path.string() + " must be [H, W, " + std::to_string(task.out_channels) + "], got " +
                dmtl::to_string(t.shape()));
  return TaskLabel::regression(std::move(t));
}

}  // namespace

void generate_dataset(const fs::path& root, const DatasetSpec& spec) {
  spec.scene.validate();
  for (const auto& t : spec.tasks) t.validate();
  const LabelMapping mapping = assign_partial_labels(spec.n, spec.tasks, spec.setting, spec.seed);
  fs::create_directories(root / "images");
  for (const auto& t : spec.tasks) fs::create_directories(root / t.name);

  std::string text = "# setting " + std::string(to_string(spec.setting)) + "\n# tasks ";
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    const auto& task = spec.tasks[t];
    text += (t ? "," : "") + task.name + ":" + std::string(to_string(task.kind)) + ":" +
            std::to_string(task.out_channels);
  }
  text += "\n";
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::string id = image_id(i);
    const Scene scene = generate_scene(spec.seed + i, spec.scene);
    io::write_png(root / "images" / (id + ".png"), io::to_image8(scene.image));
    for (const auto& task : spec.tasks) write_label(label_file(root, id, task), scene_label(scene, task), task);
    text += id + "\t" + join(mapping.per_image[i], ',') + "\n";
  }
  io::write_file_atomic(root / "mapping.txt", text);
}

Dataset Dataset::open(const fs::path& root) {
  const fs::path mpath = root / "mapping.txt";
  if (!fs::exists(mpath)) throw Error("dataset mapping file not found: " + mpath.string());
  Dataset d;
  d.root_ = root;
  std::istringstream in(io::read_file(mpath));
  std::string line;
  bool have_setting = false;
  std::size_t lineno = 0;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream h(line.substr(1));
      std::string key, value;
      h >> key >> value;
      if (key == "setting") {
        d.mapping_.setting = label_setting_from_string(value);
        have_setting = true;
      } else if (key == "tasks") {
        for (const auto& entry : split(value, ',')) {
          const auto parts = split(entry, ':');
          if (parts.size() != 3) throw Error(mpath.string() + ":" + std::to_string(lineno) + ": bad task entry '" + entry + "'");
          TaskSpec t = TaskSpec::make(parts[0], task_kind_from_string(parts[1]), std::stoi(parts[2]));
          t.validate();
          d.tasks_.push_back(t);
        }
      }
      continue;
    }
    const auto tab = line.find('\t');
    const std::string id = line.substr(0, tab);
    if (tab == std::string::npos) throw Error("mapping entry for image '" + id + "' has no task list");
    if (d.tasks_.empty()) throw Error(mpath.string() + ": '# tasks' header must precede the entries");
    if (!seen_ids.insert(id).second) throw Error("image '" + id + "' appears twice in the mapping");
    std::vector<std::string> names = split(line.substr(tab + 1), ',');
    names.erase(std::remove(names.begin(), names.end(), std::string()), names.end());
    d.ids_.push_back(id);
    d.mapping_.per_image.push_back(std::move(names));
  }
  if (!have_setting) throw Error(mpath.string() + ": missing '# setting' header");
  if (d.ids_.empty()) throw Error(mpath.string() + ": dataset has no images");

  // Per-image checks name the offending id; the dataset-level ones run afterwards.
  for (std::size_t i = 0; i < d.ids_.size(); ++i) {
    const auto& set = d.mapping_.per_image[i];
    try {
      if (set.empty()) throw Error("labeled for zero tasks");
      for (const auto& name : set) {
        bool known = false;
        for (const auto& t : d.tasks_) known = known || t.name == name;
        if (!known) throw Error("unknown task '" + name + "'");
      }
      if (std::set<std::string>(set.begin(), set.end()).size() != set.size()) throw Error("duplicate task");
      if (d.mapping_.setting == LabelSetting::one_label && set.size() != 1)
        throw Error("one_label requires exactly one task, got " + std::to_string(set.size()));
      if (d.mapping_.setting == LabelSetting::full && set.size() != d.tasks_.size())
        throw Error("full labeling requires every task");
    } catch (const Error& e) {
      throw Error("mapping entry for image '" + d.ids_[i] + "': " + e.what());
    }
    const fs::path img = root / "images" / (d.ids_[i] + ".png");
    if (!fs::exists(img)) throw Error("missing image file " + img.string());
    for (const auto& name : d.mapping_.per_image[i]) {
      const fs::path lp = label_file(root, d.ids_[i], d.tasks_[task_index(d.tasks_, name)]);
      if (!fs::exists(lp)) throw Error("missing label file " + lp.string());
    }
  }
  d.mapping_.validate(d.tasks_);
  return d;
}

fs::path Dataset::label_path(const std::string& id, const TaskSpec& task) const { return label_file(root_, id, task); }

PartialLabelSample Dataset::load(std::size_t i, LabelView view) const {
  if (i >= ids_.size()) throw Error("dataset index " + std::to_string(i) + " out of range");
  PartialLabelSample s;
  s.id = ids_[i];
  s.image = io::from_image8(io::read_png(root_ / "images" / (s.id + ".png")));
  if (s.image.dim(2) != 3) throw Error("image " + s.id + " must be RGB");
  for (const auto& task : tasks_) {
    const auto& set = mapping_.per_image[i];
    const bool mapped = std::find(set.begin(), set.end(), task.name) != set.end();
    if (view == LabelView::mapped && !mapped) continue;
    s.labels.emplace(task.name, read_label(label_path(s.id, task), task));
    s.labeled_tasks.insert(task.name);
  }
  s.validate();
  return s;
}

std::vector<PartialLabelSample> Dataset::load_all(LabelView view) const {
  std::vector<PartialLabelSample> out;
  out.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) out.push_back(load(i, view));
  return out;
}

}  // namespace dmtl::data
