// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "dmtl/autograd.hpp"
#include "dmtl/rng.hpp"

namespace dmtl::nn {

struct NamedVar {
  std::string name;
  ag::Var var;
};

/// Owns the names of every trainable parameter and persistent buffer of a
/// model. Insertion order is the serialization order.
class ParameterRegistry {
 public:
  ag::Var add_parameter(std::string name, Tensor init);
  /// Non-trainable state (running statistics).
  ag::Var add_buffer(std::string name, Tensor init);

  const std::vector<NamedVar>& parameters() const noexcept { return params_; }
  const std::vector<NamedVar>& buffers() const noexcept { return buffers_; }
  /// Parameters whose name starts with `prefix`.
  std::vector<NamedVar> parameters_with_prefix(std::string_view prefix) const;
  const ag::Var* find(std::string_view name) const;

  std::size_t parameter_count() const;
  void zero_grad();

 private:
  void check_unique(const std::string& name) const;

  std::vector<NamedVar> params_;
  std::vector<NamedVar> buffers_;
};

enum class Mode { train, eval };

inline bool is_training(Mode m) { return m == Mode::train; }

class Conv2d {
 public:
  Conv2d() = default;
  /// He-style normal init with the given gain; bias starts at zero.
  Conv2d(ParameterRegistry& reg, const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
         bool bias, Rng& rng, double gain = 1.4142135623730951);

  ag::Var operator()(const ag::Var& x) const;
  int in_channels() const { return weight_.dim(2); }
  int out_channels() const { return weight_.dim(3); }
  const ag::Var& weight() const { return weight_; }

 private:
  ag::Var weight_;
  ag::Var bias_;
  int stride_ = 1;
  int pad_ = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterRegistry& reg, const std::string& name, int in_features, int out_features, Rng& rng,
         double gain = 1.0);
  ag::Var operator()(const ag::Var& x) const;

 private:
  ag::Var weight_;
  ag::Var bias_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParameterRegistry& reg, const std::string& name, int channels);
  ag::Var operator()(const ag::Var& x, Mode mode) const;

  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

 private:
  ag::Var gamma_;
  ag::Var beta_;
  ag::Var running_mean_;
  ag::Var running_var_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterRegistry& reg, const std::string& name, int channels);
  ag::Var operator()(const ag::Var& x) const;

 private:
  ag::Var gamma_;
  ag::Var beta_;
};

/// conv3x3-BN-ReLU-conv3x3-BN plus identity (or strided 1x1 projection) skip, then ReLU.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterRegistry& reg, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng);
  ag::Var operator()(const ag::Var& x, Mode mode) const;

 private:
  Conv2d conv1_, conv2_;
  BatchNorm bn1_, bn2_;
  bool project_ = false;
  Conv2d proj_;
  BatchNorm proj_bn_;
};

}  // namespace dmtl::nn
