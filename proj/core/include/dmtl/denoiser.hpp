// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmtl/diffusion.hpp"
#include "dmtl/nn.hpp"
#include "dmtl/task.hpp"

namespace dmtl {

enum class DiffusionVariant { prediction, feature };

std::string_view to_string(DiffusionVariant v);
DiffusionVariant variant_from_string(std::string_view s);

struct DenoiserConfig {
  int num_blocks = 4;
  int num_heads = 1;
  DiffusionVariant variant = DiffusionVariant::prediction;
  /// 3x3 conv + ReLU layers before the final 1x1 of each task head.
  int head_layers = 4;
  int ffn_expansion = 4;
  double max_period = 10000.0;
  /// Self-attention over the task embedding instead of conditioned cross-attention.
  bool ablation_no_cond = false;
  /// Feed the initial map straight to the denoiser without noise decay.
  bool ablation_no_diffusion = false;
  /// Prediction variant only: softmax classification maps before diffusion and conditioning.
  bool diffuse_probabilities = false;

  void validate(int channels) const;
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Sinusoidal embedding: sin(s * f_i) for the first half, cos(s * f_i) for the
/// second, with f_i = max_period^(-i / (dim / 2)).
std::vector<double> embed_step(int s, int dim, double max_period = 10000.0);

/// Condition tokens [N, H*W, C].
struct ConditionFeature {
  ag::Var tokens;
  int height = 0;
  int width = 0;
};

/// conv3x3 + ReLU stack followed by a 1x1 projection.
class TaskHead {
 public:
  TaskHead() = default;
  TaskHead(nn::ParameterRegistry& reg, const std::string& name, int channels, int layers, int out_channels, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;

 private:
  std::vector<nn::Conv2d> convs_;
  nn::Conv2d out_;
};

/// Per-task 3x3 projection to C, channel concatenation in task order, and a
/// shared 3x3 reduction back to C.
class ConditionBuilder {
 public:
  ConditionBuilder() = default;
  ConditionBuilder(nn::ParameterRegistry& reg, const std::string& prefix, const std::vector<TaskSpec>& tasks,
                   const std::vector<int>& in_channels, int channels, Rng& rng);
  ConditionFeature operator()(const std::map<std::string, ag::Var>& maps) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, nn::Conv2d> project_;
  nn::Conv2d fuse_;
};

/// Pre-norm transformer block. The residual stream carries the queries; keys
/// and values come from `memory`, or from the stream itself in self-attention mode.
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(nn::ParameterRegistry& reg, const std::string& name, int channels, int heads, int expansion,
                      bool self_attention, Rng& rng);
  ag::Var operator()(const ag::Var& stream, const ag::Var& memory) const;

 private:
  bool self_attention_ = false;
  int heads_ = 1;
  nn::LayerNorm ln_q_, ln_kv_, ln_ff_;
  nn::Linear wq_, wk_, wv_, wo_, ff1_, ff2_;
};

struct DenoiseResult {
  ag::Var x0;
  /// x_{S-1}, ..., x_0.
  std::vector<ag::Var> trajectory;
};

/// Multi-task conditioned denoiser. Transformer blocks and the feature
/// projection are shared across tasks; the input projections (input.<task>)
/// and heads (head.<task>) are not.
class Denoiser {
 public:
  Denoiser(nn::ParameterRegistry& reg, const DenoiserConfig& cfg, const std::vector<TaskSpec>& tasks, int channels,
           Rng& rng, const std::string& prefix = "denoiser.");

  /// Throws in the ablation_no_cond configuration, which has no condition path.
  ConditionFeature build_condition(const std::map<std::string, ag::Var>& initial_maps) const;

  /// x_{s-1} = x_init + correction, the correction being the task head
  /// (prediction variant) or the shared 1x1 projection `proj` (feature
  /// variant) of the transformer output. cond may be null only with ablation_no_cond.
  ag::Var denoise_step(const ag::Var& x_s, const ag::Var& x_init, int s, const ConditionFeature* cond,
                       const std::string& task) const;
  DenoiseResult run(const ag::Var& x_S, const ag::Var& x_init, const NoiseSchedule& schedule,
                    const ConditionFeature* cond, const std::string& task) const;
  /// Task head applied to the denoised feature map in the feature variant.
  ag::Var final_head(const ag::Var& x0, const std::string& task) const;

  const DenoiserConfig& config() const noexcept { return cfg_; }
  /// Channel count of x_s for `task`.
  int state_channels(const std::string& task) const;

 private:
  const TaskSpec& spec(const std::string& task) const;

  DenoiserConfig cfg_;
  std::vector<TaskSpec> tasks_;
  int channels_;
  ConditionBuilder cond_;
  std::map<std::string, nn::Conv2d> input_;
  std::vector<CrossAttentionBlock> blocks_;
  std::map<std::string, TaskHead> heads_;
  nn::Conv2d proj_;
};

}  // namespace dmtl
