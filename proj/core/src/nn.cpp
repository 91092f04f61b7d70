// SPDX-License-Identifier: Apache-2.0
#include "dmtl/nn.hpp"

#include <cmath>

#include "dmtl/ops.hpp"

namespace dmtl::nn {

void ParameterRegistry::check_unique(const std::string& name) const {
  if (find(name)) throw Error("duplicate parameter name: " + name);
}

ag::Var ParameterRegistry::add_parameter(std::string name, Tensor init) {
  check_unique(name);
  ag::Var v = ag::leaf(std::move(init));
  params_.push_back({std::move(name), v});
  return v;
}

ag::Var ParameterRegistry::add_buffer(std::string name, Tensor init) {
  check_unique(name);
  ag::Var v = ag::constant(std::move(init));
  buffers_.push_back({std::move(name), v});
  return v;
}

std::vector<NamedVar> ParameterRegistry::parameters_with_prefix(std::string_view prefix) const {
  std::vector<NamedVar> out;
  for (const auto& p : params_)
    if (std::string_view(p.name).starts_with(prefix)) out.push_back(p);
  return out;
}

const ag::Var* ParameterRegistry::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p.var;
  for (const auto& b : buffers_)
    if (b.name == name) return &b.var;
  return nullptr;
}

std::size_t ParameterRegistry::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

void ParameterRegistry::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

Conv2d::Conv2d(ParameterRegistry& reg, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
               int pad, bool bias, Rng& rng, double gain)
    : stride_(stride), pad_(pad) {
  const double fan_in = static_cast<double>(kernel * kernel * in_ch);
  weight_ = reg.add_parameter(name + ".weight", rng.normal({kernel, kernel, in_ch, out_ch}, gain / std::sqrt(fan_in)));
  if (bias) bias_ = reg.add_parameter(name + ".bias", Tensor::zeros({out_ch}));
}

ag::Var Conv2d::operator()(const ag::Var& x) const { return ag::conv2d(x, weight_, bias_, stride_, pad_); }

Linear::Linear(ParameterRegistry& reg, const std::string& name, int in_features, int out_features, Rng& rng,
               double gain) {
  weight_ = reg.add_parameter(name + ".weight",
                              rng.normal({in_features, out_features}, gain / std::sqrt(static_cast<double>(in_features))));
  bias_ = reg.add_parameter(name + ".bias", Tensor::zeros({out_features}));
}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::linear(x, weight_, bias_); }

BatchNorm::BatchNorm(ParameterRegistry& reg, const std::string& name, int channels) {
  gamma_ = reg.add_parameter(name + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = reg.add_parameter(name + ".beta", Tensor::zeros({channels}));
  running_mean_ = reg.add_buffer(name + ".running_mean", Tensor::zeros({channels}));
  running_var_ = reg.add_buffer(name + ".running_var", Tensor::full({channels}, 1.0));
}

ag::Var BatchNorm::operator()(const ag::Var& x, Mode mode) const {
  ag::Var rm = running_mean_;
  ag::Var rv = running_var_;
  return ag::batch_norm(x, gamma_, beta_, rm.mutable_value(), rv.mutable_value(), is_training(mode), kMomentum, kEps);
}

LayerNorm::LayerNorm(ParameterRegistry& reg, const std::string& name, int channels) {
  gamma_ = reg.add_parameter(name + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = reg.add_parameter(name + ".beta", Tensor::zeros({channels}));
}

ag::Var LayerNorm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma_, beta_, 1e-5); }

ResidualBlock::ResidualBlock(ParameterRegistry& reg, const std::string& name, int in_ch, int out_ch, int stride,
                             Rng& rng)
    : conv1_(reg, name + ".conv1", in_ch, out_ch, 3, stride, 1, false, rng),
      conv2_(reg, name + ".conv2", out_ch, out_ch, 3, 1, 1, false, rng),
      bn1_(reg, name + ".bn1", out_ch),
      bn2_(reg, name + ".bn2", out_ch),
      project_(stride != 1 || in_ch != out_ch) {
  if (project_) {
    proj_ = Conv2d(reg, name + ".proj", in_ch, out_ch, 1, stride, 0, false, rng, 1.0);
    proj_bn_ = BatchNorm(reg, name + ".proj_bn", out_ch);
  }
}

ag::Var ResidualBlock::operator()(const ag::Var& x, Mode mode) const {
  ag::Var h = ag::relu(bn1_(conv1_(x), mode));
  h = bn2_(conv2_(h), mode);
  ag::Var skip = project_ ? proj_bn_(proj_(x), mode) : x;
  return ag::relu(ag::add(h, skip));
}

}  // namespace dmtl::nn
