// SPDX-License-Identifier: Apache-2.0
#include "dmtl/visualize.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "dmtl/checkpoint.hpp"
#include "dmtl/ops.hpp"

namespace fs = std::filesystem;

namespace dmtl::vis {

std::array<std::uint8_t, 3> class_color(int k) {
  if (k == kIgnoreIndex) return {255, 255, 255};
  std::array<int, 3> c{0, 0, 0};
  for (int shift = 7; k > 0 && shift >= 0; --shift, k >>= 3) {
    for (int ch = 0; ch < 3; ++ch) c[ch] |= ((k >> ch) & 1) << shift;
  }
  return {static_cast<std::uint8_t>(c[0]), static_cast<std::uint8_t>(c[1]), static_cast<std::uint8_t>(c[2])};
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

io::Image8 render_map(const Tensor& map, const TaskSpec& task, int out_h, int out_w, DepthRange depth) {
  if (map.rank() != 4 || map.dim(0) != 1 || map.dim(3) != task.out_channels)
    throw ShapeError("render_map: expected [1, h, w, " + std::to_string(task.out_channels) + "], got " +
                     to_string(map.shape()));
  ag::NoGradGuard guard;
  const Tensor up = ag::upsample_bilinear(ag::constant(map), out_h, out_w).value();
  const int c = task.out_channels;
  io::Image8 img;
  img.height = out_h;
  img.width = out_w;
  img.channels = task.kind == TaskKind::depth ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(out_h) * out_w * img.channels);
  for (std::size_t p = 0; p < static_cast<std::size_t>(out_h) * out_w; ++p) {
    const double* v = up.data() + p * c;
    std::uint8_t* px = &img.pixels[p * img.channels];
    if (task.is_classification()) {
      const int k = static_cast<int>(std::max_element(v, v + c) - v);
      const auto col = class_color(k);
      std::copy(col.begin(), col.end(), px);
    } else if (task.kind == TaskKind::depth) {
      px[0] = to_byte((depth.far - v[0]) / (depth.far - depth.near));
    } else {
      double norm = 0.0;
      for (int i = 0; i < c; ++i) norm += v[i] * v[i];
      norm = std::sqrt(norm);
      for (int i = 0; i < 3; ++i) px[i] = to_byte(norm > 0.0 && i < c ? (v[i] / norm + 1.0) / 2.0 : 0.5);
    }
  }
  return img;
}

DenoiseTrace trace_denoising(const DiffusionModel& model, const Tensor& image, std::uint64_t seed) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("trace_denoising: image must be [H, W, 3]");
  ag::NoGradGuard guard;
  const bool feature = model.config().denoiser.variant == DiffusionVariant::feature;
  const InitialPass pass =
      model.forward_initial(ag::constant(image.reshaped({1, image.dim(0), image.dim(1), 3})), nn::Mode::eval);
  DenoiseTrace trace;
  trace.steps = model.schedule().steps;
  const auto& tasks = model.tasks();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::string& name = tasks[t].name;
    Rng rng({seed, 0, t});
    const Tensor noise = rng.normal(model.state_shape(pass, name, 1));
    const TaskPass tp = model.run_task(pass, name, {}, noise);
    auto shown = [&](const ag::Var& state) {
      return feature ? ag::add(tp.initial_prediction, model.denoiser().final_head(state, name)).value() : state.value();
    };
    DenoiseTrace::Task out;
    out.name = name;
    out.maps.push_back(tp.initial_prediction.value());
    out.states.push_back(tp.x_init.value());
    out.maps.push_back(shown(tp.x_S));
    out.states.push_back(tp.x_S.value());
    for (const auto& x : tp.trajectory) {
      out.maps.push_back(shown(x));
      out.states.push_back(x.value());
    }
    trace.tasks.push_back(std::move(out));
  }
  return trace;
}

std::vector<std::string> write_trace(const DenoiseTrace& trace, const std::vector<TaskSpec>& tasks, int image_h,
                                     int image_w, const fs::path& dir, DepthRange depth) {
  fs::create_directories(dir);
  std::vector<std::string> files;
  std::vector<ckpt::NamedTensor> states;
  nlohmann::json index{{"steps", trace.steps}, {"archive", "trajectory.bin"}, {"tasks", nlohmann::json::array()}};
  for (const auto& t : trace.tasks) {
    const TaskSpec& spec = tasks[task_index(tasks, t.name)];
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t k = 0; k < t.maps.size(); ++k) {
      const std::string phase = k == 0 ? "initial" : k == 1 ? "noisy" : "step" + std::to_string(trace.steps + 1 - static_cast<int>(k));
      const std::string png = t.name + "_" + phase + ".png";
      io::write_png(dir / png, render_map(t.maps[k], spec, image_h, image_w, depth));
      files.push_back(png);
      const std::string key = t.name + "." + phase;
      states.push_back({key, t.states[k]});
      entries.push_back({{"phase", phase}, {"image", png}, {"state", key}, {"shape", t.states[k].shape()}});
    }
    index["tasks"].push_back({{"name", t.name}, {"kind", to_string(spec.kind)}, {"entries", entries}});
  }
  io::write_file_atomic(dir / "trajectory.bin", ckpt::encode_tensors(states));
  io::write_file_atomic(dir / "trajectory.json", index.dump(2) + "\n");
  files.push_back("trajectory.bin");
  files.push_back("trajectory.json");
  return files;
}

}  // namespace dmtl::vis
