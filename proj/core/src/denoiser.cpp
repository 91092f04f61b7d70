// SPDX-License-Identifier: Apache-2.0
#include "dmtl/denoiser.hpp"

#include <cmath>

#include "dmtl/ops.hpp"

namespace dmtl {

namespace {

// Init gain of the layers producing per-step corrections.
constexpr double kCorrectionGain = 0.01;

}  // namespace

std::string_view to_string(DiffusionVariant v) { return v == DiffusionVariant::prediction ? "prediction" : "feature"; }

DiffusionVariant variant_from_string(std::string_view s) {
  if (s == "prediction") return DiffusionVariant::prediction;
  if (s == "feature") return DiffusionVariant::feature;
  throw Error("unknown diffusion variant: " + std::string(s));
}

void DenoiserConfig::validate(int channels) const {
  if (num_blocks < 1) throw Error("denoiser: num_blocks must be >= 1");
  if (head_layers < 1) throw Error("denoiser: head_layers must be >= 1");
  if (num_heads < 1 || channels % num_heads != 0) throw Error("denoiser: num_heads must divide the channel count");
  if (ffn_expansion < 1) throw Error("denoiser: ffn_expansion must be >= 1");
  if (!(max_period > 1.0)) throw Error("denoiser: max_period must be > 1");
  if (channels % 2 != 0) throw Error("denoiser: step embedding needs an even channel count");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"num_blocks", c.num_blocks},
                     {"num_heads", c.num_heads},
                     {"variant", to_string(c.variant)},
                     {"head_layers", c.head_layers},
                     {"ffn_expansion", c.ffn_expansion},
                     {"max_period", c.max_period},
                     {"ablation_no_cond", c.ablation_no_cond},
                     {"ablation_no_diffusion", c.ablation_no_diffusion},
                     {"diffuse_probabilities", c.diffuse_probabilities}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  nlohmann::json known;
  to_json(known, DenoiserConfig{});
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw Error("unknown denoiser key: " + key);
  DenoiserConfig d;
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.variant = variant_from_string(j.value("variant", std::string(to_string(d.variant))));
  c.head_layers = j.value("head_layers", d.head_layers);
  c.ffn_expansion = j.value("ffn_expansion", d.ffn_expansion);
  c.max_period = j.value("max_period", d.max_period);
  c.ablation_no_cond = j.value("ablation_no_cond", d.ablation_no_cond);
  c.ablation_no_diffusion = j.value("ablation_no_diffusion", d.ablation_no_diffusion);
  c.diffuse_probabilities = j.value("diffuse_probabilities", d.diffuse_probabilities);
}

std::vector<double> embed_step(int s, int dim, double max_period) {
  if (dim <= 0 || dim % 2 != 0) throw Error("embed_step: dim must be even and positive, got " + std::to_string(dim));
  if (s < 0) throw Error("embed_step: negative step");
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(max_period, -static_cast<double>(i) / half);
    e[static_cast<std::size_t>(i)] = std::sin(s * freq);
    e[static_cast<std::size_t>(half + i)] = std::cos(s * freq);
  }
  return e;
}

TaskHead::TaskHead(nn::ParameterRegistry& reg, const std::string& name, int channels, int layers, int out_channels,
                   Rng& rng) {
  for (int i = 0; i < layers; ++i) {
    convs_.emplace_back(reg, name + ".conv" + std::to_string(i), channels, channels, 3, 1, 1, true, rng);
  }
  // Small output so a fresh head is a near-identity correction of its anchor.
  out_ = nn::Conv2d(reg, name + ".out", channels, out_channels, 1, 1, 0, true, rng, kCorrectionGain);
}

ag::Var TaskHead::operator()(const ag::Var& x) const {
  ag::Var h = x;
  for (const auto& c : convs_) h = ag::relu(c(h));
  return out_(h);
}

ConditionBuilder::ConditionBuilder(nn::ParameterRegistry& reg, const std::string& prefix,
                                   const std::vector<TaskSpec>& tasks, const std::vector<int>& in_channels,
                                   int channels, Rng& rng) {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    order_.push_back(tasks[i].name);
    project_.emplace(tasks[i].name,
                     nn::Conv2d(reg, prefix + tasks[i].name, in_channels[i], channels, 3, 1, 1, true, rng));
  }
  fuse_ = nn::Conv2d(reg, prefix + "fuse", channels * static_cast<int>(tasks.size()), channels, 3, 1, 1, true, rng);
}

ConditionFeature ConditionBuilder::operator()(const std::map<std::string, ag::Var>& maps) const {
  std::vector<ag::Var> parts;
  Shape spatial;
  for (const auto& name : order_) {
    auto it = maps.find(name);
    if (it == maps.end()) throw Error("build_condition: missing initial map for task '" + name + "'");
    const Shape& s = it->second.shape();
    if (s.size() != 4) throw ShapeError("build_condition: expected NHWC map for '" + name + "'");
    if (spatial.empty()) spatial = {s[0], s[1], s[2]};
    if (Shape{s[0], s[1], s[2]} != spatial) throw ShapeError("build_condition: maps differ in spatial shape");
    parts.push_back(project_.at(name)(it->second));
  }
  ag::Var fused = fuse_(ag::concat_channels(parts));
  const int c = fused.dim(3);
  return {ag::reshape(fused, {spatial[0], spatial[1] * spatial[2], c}), spatial[1], spatial[2]};
}

CrossAttentionBlock::CrossAttentionBlock(nn::ParameterRegistry& reg, const std::string& name, int channels, int heads,
                                         int expansion, bool self_attention, Rng& rng)
    : self_attention_(self_attention), heads_(heads) {
  ln_q_ = nn::LayerNorm(reg, name + ".ln_q", channels);
  if (!self_attention) ln_kv_ = nn::LayerNorm(reg, name + ".ln_kv", channels);
  wq_ = nn::Linear(reg, name + ".wq", channels, channels, rng);
  wk_ = nn::Linear(reg, name + ".wk", channels, channels, rng);
  wv_ = nn::Linear(reg, name + ".wv", channels, channels, rng);
  wo_ = nn::Linear(reg, name + ".wo", channels, channels, rng);
  ln_ff_ = nn::LayerNorm(reg, name + ".ln_ff", channels);
  ff1_ = nn::Linear(reg, name + ".ff1", channels, channels * expansion, rng, std::sqrt(2.0));
  ff2_ = nn::Linear(reg, name + ".ff2", channels * expansion, channels, rng);
}

ag::Var CrossAttentionBlock::operator()(const ag::Var& stream, const ag::Var& memory) const {
  ag::Var q = ln_q_(stream);
  ag::Var kv = self_attention_ ? q : ln_kv_(memory);
  ag::Var a = ag::attention(wq_(q), wk_(kv), wv_(kv), heads_);
  ag::Var x = ag::add(stream, wo_(a));
  return ag::add(x, ff2_(ag::gelu(ff1_(ln_ff_(x)))));
}

Denoiser::Denoiser(nn::ParameterRegistry& reg, const DenoiserConfig& cfg, const std::vector<TaskSpec>& tasks,
                   int channels, Rng& rng, const std::string& prefix)
    : cfg_(cfg), tasks_(tasks), channels_(channels) {
  cfg_.validate(channels);
  const bool feature = cfg_.variant == DiffusionVariant::feature;
  std::vector<int> in_ch;
  for (const auto& t : tasks_) in_ch.push_back(feature ? channels : t.out_channels);
  if (!cfg_.ablation_no_cond) cond_ = ConditionBuilder(reg, prefix + "cond.", tasks_, in_ch, channels, rng);
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    input_.emplace(tasks_[i].name, nn::Conv2d(reg, prefix + "input." + tasks_[i].name, in_ch[i], channels, 3, 1, 1,
                                              true, rng));
  }
  for (int b = 0; b < cfg_.num_blocks; ++b) {
    blocks_.emplace_back(reg, prefix + "blocks." + std::to_string(b), channels, cfg_.num_heads, cfg_.ffn_expansion,
                         cfg_.ablation_no_cond, rng);
  }
  if (feature) proj_ = nn::Conv2d(reg, prefix + "proj", channels, channels, 1, 1, 0, true, rng, kCorrectionGain);
  for (const auto& t : tasks_) {
    heads_.emplace(t.name, TaskHead(reg, prefix + "head." + t.name, channels, cfg_.head_layers, t.out_channels, rng));
  }
}

const TaskSpec& Denoiser::spec(const std::string& task) const { return tasks_[task_index(tasks_, task)]; }

int Denoiser::state_channels(const std::string& task) const {
  return cfg_.variant == DiffusionVariant::feature ? channels_ : spec(task).out_channels;
}

ConditionFeature Denoiser::build_condition(const std::map<std::string, ag::Var>& initial_maps) const {
  if (cfg_.ablation_no_cond) throw Error("build_condition: conditioning is disabled by ablation_no_cond");
  return cond_(initial_maps);
}

ag::Var Denoiser::denoise_step(const ag::Var& x_s, const ag::Var& x_init, int s, const ConditionFeature* cond,
                               const std::string& task) const {
  const int want = state_channels(task);
  const Shape& xs = x_s.shape();
  if (xs.size() != 4 || xs[3] != want) {
    throw ShapeError("denoise_step: task '" + task + "' expects " + std::to_string(want) + " channels in " +
                     std::string(to_string(cfg_.variant)) + " mode, got " + to_string(xs));
  }
  if (x_init.shape() != xs) {
    throw ShapeError("denoise_step: x_init " + to_string(x_init.shape()) + " does not match x_s " + to_string(xs));
  }
  if (s < 1) throw Error("denoise_step: step must be >= 1");
  if (!cfg_.ablation_no_cond) {
    if (!cond) throw Error("denoise_step: condition feature required");
    if (cond->tokens.dim(0) != xs[0] || cond->height != xs[1] || cond->width != xs[2]) {
      throw ShapeError("denoise_step: condition tokens do not match the map " + to_string(xs));
    }
  }
  const int n = xs[0], h = xs[1], w = xs[2];
  ag::Var tokens = ag::reshape(input_.at(task)(x_s), {n, h * w, channels_});
  const auto emb = embed_step(s, channels_, cfg_.max_period);
  ag::Var e = ag::add_bias(tokens, ag::constant(Tensor({channels_}, emb)));
  ag::Var stream = cfg_.ablation_no_cond ? e : cond->tokens;
  for (const auto& block : blocks_) stream = block(stream, e);
  ag::Var out = ag::reshape(stream, {n, h, w, channels_});
  // Each step refines the clean initial map instead of rebuilding it from
  // the noisy state, so a fresh denoiser starts from the initial prediction.
  return ag::add(x_init, cfg_.variant == DiffusionVariant::prediction ? heads_.at(task)(out) : proj_(out));
}

DenoiseResult Denoiser::run(const ag::Var& x_S, const ag::Var& x_init, const NoiseSchedule& schedule,
                            const ConditionFeature* cond, const std::string& task) const {
  DenoiseResult r;
  ag::Var x = x_S;
  for (int s = schedule.steps; s >= 1; --s) {
    x = denoise_step(x, x_init, s, cond, task);
    r.trajectory.push_back(x);
  }
  r.x0 = x;
  return r;
}

ag::Var Denoiser::final_head(const ag::Var& x0, const std::string& task) const {
  if (cfg_.variant != DiffusionVariant::feature) throw Error("final_head: only used by the feature variant");
  return heads_.at(spec(task).name)(x0);
}

}  // namespace dmtl
