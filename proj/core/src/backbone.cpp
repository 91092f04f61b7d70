// SPDX-License-Identifier: Apache-2.0
#include "dmtl/backbone.hpp"

#include "dmtl/ops.hpp"

namespace dmtl {

std::string_view to_string(EncoderKind k) { return k == EncoderKind::tiny_conv ? "tiny_conv" : "resnet18_like"; }

EncoderKind encoder_kind_from_string(std::string_view s) {
  if (s == "tiny_conv") return EncoderKind::tiny_conv;
  if (s == "resnet18_like") return EncoderKind::resnet18_like;
  throw Error("unknown encoder kind: " + std::string(s));
}

int BackboneConfig::input_multiple() const { return encoder == EncoderKind::tiny_conv ? 4 : 32; }

void BackboneConfig::validate(std::size_t min_tasks) const {
  if (channels <= 0) throw Error("backbone: channels must be > 0");
  if (decoder_blocks < 1) throw Error("backbone: decoder_blocks must be >= 1");
  if (resnet_width < 1) throw Error("backbone: resnet_width must be >= 1");
  if (tasks.size() < min_tasks) throw Error("backbone: need at least " + std::to_string(min_tasks) + " tasks");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    tasks[i].validate();
    for (std::size_t j = 0; j < i; ++j)
      if (tasks[j].name == tasks[i].name) throw Error("backbone: duplicate task '" + tasks[i].name + "'");
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"encoder", to_string(c.encoder)},
                     {"channels", c.channels},
                     {"decoder_blocks", c.decoder_blocks},
                     {"resnet_width", c.resnet_width},
                     {"tasks", c.tasks}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "encoder" && key != "channels" && key != "decoder_blocks" && key != "resnet_width" && key != "tasks") {
      throw Error("unknown backbone key: " + key);
    }
  }
  BackboneConfig d;
  c.encoder = encoder_kind_from_string(j.value("encoder", std::string(to_string(d.encoder))));
  c.channels = j.value("channels", d.channels);
  c.decoder_blocks = j.value("decoder_blocks", d.decoder_blocks);
  c.resnet_width = j.value("resnet_width", d.resnet_width);
  c.tasks = j.contains("tasks") ? j.at("tasks").get<std::vector<TaskSpec>>() : d.tasks;
}

Backbone::Backbone(nn::ParameterRegistry& reg, const BackboneConfig& cfg, Rng& rng, const std::string& prefix,
                   std::size_t min_tasks)
    : cfg_(cfg) {
  cfg_.validate(min_tasks);
  const int c = cfg_.channels;
  const std::string enc = prefix + "encoder.";
  if (cfg_.encoder == EncoderKind::tiny_conv) {
    const int widths[] = {std::max(c / 2, 1), c, c};
    const int strides[] = {1, 2, 2};
    int in = 3;
    for (int i = 0; i < 3; ++i) {
      const std::string n = enc + "conv" + std::to_string(i + 1);
      tiny_convs_.emplace_back(reg, n, in, widths[i], 3, strides[i], 1, false, rng);
      tiny_bns_.emplace_back(reg, enc + "bn" + std::to_string(i + 1), widths[i]);
      in = widths[i];
    }
  } else {
    const int w = cfg_.resnet_width;
    stem_ = nn::Conv2d(reg, enc + "stem", 3, w, 7, 2, 3, false, rng);
    stem_bn_ = nn::BatchNorm(reg, enc + "stem_bn", w);
    int in = w;
    for (int s = 0; s < 4; ++s) {
      const int out = w << s;
      Stage stage;
      for (int b = 0; b < 2; ++b) {
        const std::string n = enc + "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        stage.blocks.emplace_back(reg, n, b == 0 ? in : out, out, (b == 0 && s > 0) ? 2 : 1, rng);
      }
      stages_.push_back(std::move(stage));
      in = out;
    }
    fuse_ = nn::Conv2d(reg, enc + "fuse", w * 15, c, 3, 1, 1, true, rng);
  }
  for (const auto& t : cfg_.tasks) {
    TaskBranch br;
    for (int b = 0; b < cfg_.decoder_blocks; ++b) {
      br.decoder.emplace_back(reg, prefix + "decoder." + t.name + "." + std::to_string(b), c, c, 1, rng);
    }
    br.pred = nn::Conv2d(reg, prefix + "pred." + t.name, c, t.out_channels, 1, 1, 0, true, rng, 1.0);
    branches_.emplace(t.name, std::move(br));
  }
}

ag::Var Backbone::encode(const ag::Var& images, nn::Mode mode) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[3] != 3) throw ShapeError("encode: expected [N, H, W, 3] images, got " + to_string(s));
  const int m = cfg_.input_multiple();
  if (s[1] % m != 0 || s[2] % m != 0) {
    throw ShapeError("encode: image size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                     " must be a multiple of " + std::to_string(m));
  }
  if (cfg_.encoder == EncoderKind::tiny_conv) {
    ag::Var h = images;
    for (std::size_t i = 0; i < tiny_convs_.size(); ++i) h = ag::relu(tiny_bns_[i](tiny_convs_[i](h), mode));
    return h;
  }
  ag::Var h = ag::relu(stem_bn_(stem_(images), mode));
  h = ag::max_pool2d(h, 3, 2, 1);
  std::vector<ag::Var> outs;
  for (const auto& stage : stages_) {
    for (const auto& block : stage.blocks) h = block(h, mode);
    outs.push_back(h);
  }
  const int oh = outs[0].dim(1), ow = outs[0].dim(2);
  for (std::size_t i = 1; i < outs.size(); ++i) outs[i] = ag::upsample_bilinear(outs[i], oh, ow);
  return fuse_(ag::concat_channels(outs));
}

const Backbone::TaskBranch& Backbone::branch(const std::string& task) const {
  auto it = branches_.find(task);
  if (it == branches_.end()) throw Error("unknown task: " + task);
  return it->second;
}

ag::Var Backbone::decode_task(const ag::Var& feature, const std::string& task, nn::Mode mode) const {
  const auto& br = branch(task);
  if (feature.shape().size() != 4 || feature.dim(3) != cfg_.channels) {
    throw ShapeError("decode_task: expected " + std::to_string(cfg_.channels) + "-channel NHWC feature, got " +
                     to_string(feature.shape()));
  }
  ag::Var h = feature;
  for (const auto& block : br.decoder) h = block(h, mode);
  return h;
}

ag::Var Backbone::predict_initial(const ag::Var& task_feature, const std::string& task) const {
  const auto& br = branch(task);
  if (task_feature.shape().size() != 4 || task_feature.dim(3) != cfg_.channels) {
    throw ShapeError("predict_initial: expected " + std::to_string(cfg_.channels) + " channels, got " +
                     to_string(task_feature.shape()));
  }
  return br.pred(task_feature);
}

InitialOutputs Backbone::forward(const ag::Var& images, nn::Mode mode) const {
  InitialOutputs out;
  out.backbone_feature = encode(images, mode);
  for (const auto& t : cfg_.tasks) {
    ag::Var f = decode_task(out.backbone_feature, t.name, mode);
    out.task_predictions[t.name] = predict_initial(f, t.name);
    out.task_features[t.name] = f;
  }
  return out;
}

}  // namespace dmtl
