// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>

#include "dmtl/backbone.hpp"
#include "dmtl/denoiser.hpp"
#include "dmtl/diffusion.hpp"

namespace dmtl {

struct ModelConfig {
  BackboneConfig backbone;
  DenoiserConfig denoiser;
  int diffusion_steps = 2;
  double beta_start = 1e-3;
  double beta_end = 1e-2;

  NoiseSchedule schedule() const { return build_linear_schedule(diffusion_steps, beta_start, beta_end); }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Maps of one batch after the initial backbone pass.
struct InitialPass {
  InitialOutputs initial;
  /// Absent under ablation_no_cond.
  std::optional<ConditionFeature> cond;
};

/// Per-task output of the diffusion and denoising stage for a subset of the batch.
struct TaskPass {
  ag::Var initial_prediction;
  ag::Var x_init;
  ag::Var x_S;
  std::vector<ag::Var> trajectory;
  /// Denoised prediction map P_0.
  ag::Var prediction;
};

/// Initial backbone model, diffusion and multi-task conditioned denoiser.
class DiffusionModel {
 public:
  DiffusionModel(const ModelConfig& cfg, std::uint64_t init_seed);

  InitialPass forward_initial(const ag::Var& images, nn::Mode mode) const;
  /// P_init (prediction variant) or F_init (feature variant) of `task`.
  ag::Var diffusion_input(const InitialPass& pass, const std::string& task) const;
  /// Shape of x_init restricted to `rows`.
  Shape state_shape(const InitialPass& pass, const std::string& task, std::size_t rows) const;
  /// Diffuses x_init[rows] with `noise` (ignored under ablation_no_diffusion),
  /// then denoises over the schedule. Empty rows means the whole batch.
  TaskPass run_task(const InitialPass& pass, const std::string& task, const std::vector<int>& rows,
                    const Tensor& noise) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const std::vector<TaskSpec>& tasks() const noexcept { return cfg_.backbone.tasks; }
  nn::ParameterRegistry& registry() noexcept { return *registry_; }
  const nn::ParameterRegistry& registry() const noexcept { return *registry_; }
  const Backbone& backbone() const noexcept { return *backbone_; }
  const Denoiser& denoiser() const noexcept { return *denoiser_; }

 private:
  ModelConfig cfg_;
  NoiseSchedule schedule_;
  std::unique_ptr<nn::ParameterRegistry> registry_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<Denoiser> denoiser_;
};

/// Encoder, decoder and 1x1 head trained on one task alone.
class SingleTaskModel {
 public:
  SingleTaskModel(const BackboneConfig& cfg, const TaskSpec& task, std::uint64_t init_seed);
  ag::Var forward(const ag::Var& images, nn::Mode mode) const;

  const TaskSpec& task() const noexcept { return task_; }
  nn::ParameterRegistry& registry() noexcept { return *registry_; }
  const nn::ParameterRegistry& registry() const noexcept { return *registry_; }

 private:
  TaskSpec task_;
  std::unique_ptr<nn::ParameterRegistry> registry_;
  std::unique_ptr<Backbone> backbone_;
};

}  // namespace dmtl
