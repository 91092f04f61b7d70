// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmtl/nn.hpp"
#include "dmtl/task.hpp"

namespace dmtl {

enum class EncoderKind { tiny_conv, resnet18_like };

std::string_view to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(std::string_view s);

struct BackboneConfig {
  EncoderKind encoder = EncoderKind::tiny_conv;
  int channels = 64;
  int decoder_blocks = 2;
  /// Width of the first resnet18_like stage; later stages double it.
  int resnet_width = 16;
  std::vector<TaskSpec> tasks = default_tasks();

  /// Total downsampling of the encoder input; images must be a multiple of it.
  int input_multiple() const;
  /// Ratio between image and feature resolution.
  int output_stride() const { return 4; }
  /// Throws on C <= 0, decoder_blocks < 1, or fewer than `min_tasks` tasks.
  void validate(std::size_t min_tasks = 2) const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

struct InitialOutputs {
  ag::Var backbone_feature;
  /// F_init per task, keyed by task name.
  std::map<std::string, ag::Var> task_features;
  /// Raw logits or regression values per task.
  std::map<std::string, ag::Var> task_predictions;
};

/// Shared encoder plus per-task residual decoders and 1x1 prediction heads.
/// Parameters are registered under `prefix` as encoder.*, decoder.<task>.* and
/// pred.<task>.*.
class Backbone {
 public:
  Backbone(nn::ParameterRegistry& reg, const BackboneConfig& cfg, Rng& rng, const std::string& prefix = "backbone.",
           std::size_t min_tasks = 2);

  /// images is [N, H, W, 3]; returns [N, H/4, W/4, C].
  ag::Var encode(const ag::Var& images, nn::Mode mode) const;
  ag::Var decode_task(const ag::Var& feature, const std::string& task, nn::Mode mode) const;
  ag::Var predict_initial(const ag::Var& task_feature, const std::string& task) const;
  InitialOutputs forward(const ag::Var& images, nn::Mode mode) const;

  const BackboneConfig& config() const noexcept { return cfg_; }

 private:
  struct Stage {
    std::vector<nn::ResidualBlock> blocks;
  };
  struct TaskBranch {
    std::vector<nn::ResidualBlock> decoder;
    nn::Conv2d pred;
  };
  const TaskBranch& branch(const std::string& task) const;

  BackboneConfig cfg_;
  // tiny_conv
  std::vector<nn::Conv2d> tiny_convs_;
  std::vector<nn::BatchNorm> tiny_bns_;
  // resnet18_like
  nn::Conv2d stem_;
  nn::BatchNorm stem_bn_;
  std::vector<Stage> stages_;
  nn::Conv2d fuse_;
  std::map<std::string, TaskBranch> branches_;
};

}  // namespace dmtl
