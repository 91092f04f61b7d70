// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmtl/io.hpp"
#include "dmtl/model.hpp"

namespace dmtl::vis {

/// Color of class k: bits of k spread over the high bits of R, G and B
/// (0 black, 1 dark red, 2 dark green, 3 olive, ...). The ignore index is white.
std::array<std::uint8_t, 3> class_color(int k);

/// Value range of the depth grayscale: near maps to white, far to black.
struct DepthRange {
  double near = 1.0;
  double far = 4.0;
};

/// Renders a map [1, h, w, C] at out_h x out_w. Classification maps are
/// upsampled as logits, then argmax and class_color; depth becomes gray;
/// normals map (n / |n| + 1) / 2 to RGB.
io::Image8 render_map(const Tensor& map, const TaskSpec& task, int out_h, int out_w, DepthRange depth = {});

/// One denoising pass over one image, every intermediate map per task.
struct DenoiseTrace {
  struct Task {
    std::string name;
    /// Prediction-space maps: initial, noisy (x_S), then x_{S-1} ... x_0.
    std::vector<Tensor> maps;
    /// Raw diffusion states in the same order (features in the feature variant).
    std::vector<Tensor> states;
  };
  int steps = 0;
  std::vector<Task> tasks;
};

/// Runs `model` in eval mode on image [H, W, 3]; noise of task t from Rng{seed, 0, t}.
/// Feature-variant states are shown through the model's final prediction head.
DenoiseTrace trace_denoising(const DiffusionModel& model, const Tensor& image, std::uint64_t seed);

/// `<task>_initial.png`, `<task>_noisy.png` and `<task>_step<s>.png` for
/// s = S-1 ... 0, plus trajectory.bin (raw states) and trajectory.json
/// (index). Returns the written file names.
std::vector<std::string> write_trace(const DenoiseTrace& trace, const std::vector<TaskSpec>& tasks, int image_h,
                                     int image_w, const std::filesystem::path& dir, DepthRange depth = {});

}  // namespace dmtl::vis
