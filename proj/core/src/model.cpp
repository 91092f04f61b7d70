// SPDX-License-Identifier: Apache-2.0
#include "dmtl/model.hpp"


#include "dmtl/ops.hpp"

namespace dmtl {

void ModelConfig::validate() const {
  backbone.validate();
  denoiser.validate(backbone.channels);
  schedule();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"backbone", c.backbone},
                     {"denoiser", c.denoiser},
                     {"diffusion_steps", c.diffusion_steps},
                     {"beta_start", c.beta_start},
                     {"beta_end", c.beta_end}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "backbone" && key != "denoiser" && key != "diffusion_steps" && key != "beta_start" && key != "beta_end") {
      throw Error("unknown model key: " + key);
    }
  }
  ModelConfig d;
  c.backbone = j.contains("backbone") ? j.at("backbone").get<BackboneConfig>() : d.backbone;
  c.denoiser = j.contains("denoiser") ? j.at("denoiser").get<DenoiserConfig>() : d.denoiser;
  c.diffusion_steps = j.value("diffusion_steps", d.diffusion_steps);
  c.beta_start = j.value("beta_start", d.beta_start);
  c.beta_end = j.value("beta_end", d.beta_end);
}

DiffusionModel::DiffusionModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), registry_(std::make_unique<nn::ParameterRegistry>()) {
  cfg_.validate();
  schedule_ = cfg_.schedule();
  Rng rng({init_seed, 0});
  backbone_ = std::make_unique<Backbone>(*registry_, cfg_.backbone, rng);
  Rng drng({init_seed, 1});
  denoiser_ = std::make_unique<Denoiser>(*registry_, cfg_.denoiser, cfg_.backbone.tasks, cfg_.backbone.channels, drng);
}

namespace {

std::map<std::string, ag::Var> inputs_for(const DiffusionModel& m, const InitialPass& pass) {
  std::map<std::string, ag::Var> maps;
  for (const auto& t : m.tasks()) maps[t.name] = m.diffusion_input(pass, t.name);
  return maps;
}

}  // namespace

InitialPass DiffusionModel::forward_initial(const ag::Var& images, nn::Mode mode) const {
  InitialPass pass;
  pass.initial = backbone_->forward(images, mode);
  if (!cfg_.denoiser.ablation_no_cond) pass.cond = denoiser_->build_condition(inputs_for(*this, pass));
  return pass;
}

ag::Var DiffusionModel::diffusion_input(const InitialPass& pass, const std::string& task) const {
  const TaskSpec& spec = tasks()[task_index(tasks(), task)];
  if (cfg_.denoiser.variant == DiffusionVariant::feature) return pass.initial.task_features.at(task);
  const ag::Var& p = pass.initial.task_predictions.at(task);
  return cfg_.denoiser.diffuse_probabilities && spec.is_classification() ? ag::softmax_last(p) : p;
}

Shape DiffusionModel::state_shape(const InitialPass& pass, const std::string& task, std::size_t rows) const {
  Shape s = diffusion_input(pass, task).shape();
  s[0] = static_cast<int>(rows);
  return s;
}

TaskPass DiffusionModel::run_task(const InitialPass& pass, const std::string& task, const std::vector<int>& rows,
                                  const Tensor& noise) const {
  TaskPass out;
  const bool all = rows.empty();
  auto pick = [&](const ag::Var& v) { return all ? v : ag::select_batch(v, rows); };
  out.initial_prediction = pick(pass.initial.task_predictions.at(task));
  out.x_init = pick(diffusion_input(pass, task));
  out.x_S = cfg_.denoiser.ablation_no_diffusion ? out.x_init
                                                : diffuse(out.x_init, schedule_.steps, schedule_, noise);
  std::optional<ConditionFeature> cond;
  if (pass.cond) {
    cond = *pass.cond;
    cond->tokens = pick(pass.cond->tokens);
  }
  DenoiseResult r = denoiser_->run(out.x_S, out.x_init, schedule_, cond ? &*cond : nullptr, task);
  out.trajectory = std::move(r.trajectory);
  // The feature variant's final head corrects the initial prediction.
  out.prediction = cfg_.denoiser.variant == DiffusionVariant::feature
                       ? ag::add(out.initial_prediction, denoiser_->final_head(r.x0, task))
                       : r.x0;
  return out;
}

SingleTaskModel::SingleTaskModel(const BackboneConfig& cfg, const TaskSpec& task, std::uint64_t init_seed)
    : task_(task), registry_(std::make_unique<nn::ParameterRegistry>()) {
  BackboneConfig single = cfg;
  single.tasks = {task};
  Rng rng({init_seed, 0});
  backbone_ = std::make_unique<Backbone>(*registry_, single, rng, "backbone.", 1);
}

ag::Var SingleTaskModel::forward(const ag::Var& images, nn::Mode mode) const {
  ag::Var f = backbone_->encode(images, mode);
  return backbone_->predict_initial(backbone_->decode_task(f, task_.name, mode), task_.name);
}

}  // namespace dmtl
