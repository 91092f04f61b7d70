// SPDX-License-Identifier: Apache-2.0
#include "dmtl/run.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dmtl/checkpoint.hpp"
#include "dmtl/io.hpp"

namespace fs = std::filesystem;

namespace dmtl::train {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw Error(what + " must be an object");
  for (const auto& [k, _] : j.items())
    if (!keys.count(k)) throw Error("unknown " + what + " key: " + k);
}

std::string_view to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::cotrain: return "cotrain";
    case BaselineMode::file: return "file";
    case BaselineMode::none: return "none";
  }
  return "?";
}

BaselineMode baseline_mode_from_string(const std::string& s) {
  if (s == "cotrain") return BaselineMode::cotrain;
  if (s == "file") return BaselineMode::file;
  if (s == "none") return BaselineMode::none;
  throw Error("unknown baseline mode '" + s + "' (expected cotrain, file or none)");
}

// Large offset keeps generated held-out scenes disjoint from training scenes.
constexpr std::uint64_t kEvalSeedOffset = 1000000;

}  // namespace

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.backbone = backbone;
  m.denoiser = denoiser;
  m.diffusion_steps = diffusion.steps;
  m.beta_start = diffusion.beta_start;
  m.beta_end = diffusion.beta_end;
  return m;
}

void RunConfig::validate() const {
  model().validate();
  train.validate();
  data.scene.validate();
  for (const auto& [name, _] : train.task_weights) task_index(backbone.tasks, name);
  if (data.train.empty()) {
    if (data.n < backbone.tasks.size()) throw Error("data.n must be at least the number of tasks");
    if (data.scene.height % backbone.input_multiple() != 0 || data.scene.width % backbone.input_multiple() != 0)
      throw Error("data.scene size must be a multiple of " + std::to_string(backbone.input_multiple()));
    for (const auto& t : backbone.tasks) {
      if (t.kind == TaskKind::segmentation && t.out_channels != data.scene.classes)
        throw Error("task '" + t.name + "' has " + std::to_string(t.out_channels) + " classes but data.scene.classes is " +
                    std::to_string(data.scene.classes));
      if (t.kind == TaskKind::parsing) throw Error("generated scenes have no labels for parsing task '" + t.name + "'");
    }
  }
  if (data.eval.empty() && data.eval_n > 0 && data.eval_n < backbone.tasks.size())
    throw Error("data.eval_n must be 0 or at least the number of tasks");
  if (baseline.mode == BaselineMode::file && baseline.report.empty())
    throw Error("baseline.mode file needs baseline.report");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{
      {"data",
       {{"train", c.data.train},
        {"eval", c.data.eval},
        {"n", c.data.n},
        {"eval_n", c.data.eval_n},
        {"setting", data::to_string(c.data.setting)},
        {"seed", c.data.seed},
        {"scene", c.data.scene}}},
      {"backbone", c.backbone},
      {"denoiser", c.denoiser},
      {"diffusion",
       {{"steps", c.diffusion.steps}, {"beta_start", c.diffusion.beta_start}, {"beta_end", c.diffusion.beta_end}}},
      {"train", c.train},
      {"seeds", c.seeds},
      {"baseline", {{"mode", to_string(c.baseline.mode)}, {"report", c.baseline.report}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, {"data", "backbone", "denoiser", "diffusion", "train", "seeds", "baseline"}, "config");
  RunConfig d;
  c = d;
  if (j.contains("data")) {
    const auto& jd = j.at("data");
    reject_unknown(jd, {"train", "eval", "n", "eval_n", "setting", "seed", "scene"}, "data");
    c.data.train = jd.value("train", d.data.train);
    c.data.eval = jd.value("eval", d.data.eval);
    c.data.n = jd.value("n", d.data.n);
    c.data.eval_n = jd.value("eval_n", d.data.eval_n);
    c.data.setting = data::label_setting_from_string(jd.value("setting", std::string(data::to_string(d.data.setting))));
    c.data.seed = jd.value("seed", d.data.seed);
    if (jd.contains("scene")) c.data.scene = jd.at("scene").get<data::SceneConfig>();
  }
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  if (j.contains("denoiser")) c.denoiser = j.at("denoiser").get<DenoiserConfig>();
  if (j.contains("diffusion")) {
    const auto& jd = j.at("diffusion");
    reject_unknown(jd, {"steps", "beta_start", "beta_end"}, "diffusion");
    c.diffusion.steps = jd.value("steps", d.diffusion.steps);
    c.diffusion.beta_start = jd.value("beta_start", d.diffusion.beta_start);
    c.diffusion.beta_end = jd.value("beta_end", d.diffusion.beta_end);
  }
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<Seeds>();
  if (j.contains("baseline")) {
    const auto& jb = j.at("baseline");
    reject_unknown(jb, {"mode", "report"}, "baseline");
    c.baseline.mode = baseline_mode_from_string(jb.value("mode", std::string(to_string(d.baseline.mode))));
    c.baseline.report = jb.value("report", d.baseline.report);
  }
}

void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty() || std::any_of(parts.begin(), parts.end(), [](const std::string& p) { return p.empty(); }))
    throw Error("invalid config key '" + dotted + "'");
  nlohmann::json* node = &j;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw Error("unknown config key '" + dotted + "'");
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  const bool open_map = parts.size() == 3 && parts[0] == "train" && parts[1] == "task_weights";
  if (!node->is_object() || (!node->contains(leaf) && !open_map)) throw Error("unknown config key '" + dotted + "'");
  if (node->contains(leaf) && (*node)[leaf].is_string()) {
    (*node)[leaf] = value;
    return;
  }
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) throw Error("invalid value '" + value + "' for config key '" + dotted + "'");
  (*node)[leaf] = std::move(parsed);
}

RunConfig resolve_config(const std::optional<fs::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig base;
  if (file) {
    const nlohmann::json parsed = nlohmann::json::parse(io::read_file(*file), nullptr, false);
    if (parsed.is_discarded()) throw Error("config file " + file->string() + " is not valid JSON");
    base = parsed.get<RunConfig>();
  }
  nlohmann::json j = base;
  for (const auto& [k, v] : overrides) apply_override(j, k, v);
  RunConfig out = j.get<RunConfig>();
  out.validate();
  return out;
}

namespace {

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

}  // namespace

std::vector<std::string> divergent_keys(const nlohmann::json& a, const nlohmann::json& b) {
  std::map<std::string, nlohmann::json> fa, fb;
  flatten(a, "", fa);
  flatten(b, "", fb);
  std::set<std::string> keys;
  for (const auto& [k, _] : fa) keys.insert(k);
  for (const auto& [k, _] : fb) keys.insert(k);
  std::vector<std::string> out;
  for (const auto& k : keys) {
    const auto ia = fa.find(k), ib = fb.find(k);
    if (ia == fa.end() || ib == fb.end() || ia->second != ib->second) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, int step, std::uint64_t data_seed) {
  if (dataset_size == 0) throw Error("cannot draw batches from an empty dataset");
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> order(dataset_size);
  for (int k = 0; k < batch_size; ++k) {
    const std::uint64_t g = static_cast<std::uint64_t>(step) * batch_size + k;
    const std::uint64_t epoch = g / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng({data_seed, epoch});
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
      cached_epoch = epoch;
    }
    out.push_back(order[g % dataset_size]);
  }
  return out;
}

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j = r.loss;
  j["lr"] = r.lr;
  if (!r.single_task.empty()) j["single_task"] = r.single_task;
  return j;
}

Trainer::Trainer(const RunConfig& cfg, std::vector<PartialLabelSample> train_samples)
    : cfg_(cfg), samples_(std::move(train_samples)) {
  cfg_.validate();
  if (samples_.empty()) throw Error("training set is empty");
  for (const auto& s : samples_) {
    s.validate();
    for (const auto& name : s.labeled_tasks) task_index(cfg_.backbone.tasks, name);
  }
  model_ = std::make_unique<DiffusionModel>(cfg_.model(), cfg_.seeds.init);
  opt_ = std::make_unique<Adam>(model_->registry(), cfg_.train);
  if (cfg_.baseline.mode == BaselineMode::cotrain) {
    for (const auto& t : cfg_.backbone.tasks) {
      stl_.push_back(std::make_unique<SingleTaskModel>(cfg_.backbone, t, cfg_.seeds.init));
      stl_opt_.push_back(std::make_unique<Adam>(stl_.back()->registry(), cfg_.train));
    }
  }
}

StepRecord Trainer::step() {
  if (finished()) throw Error("training already finished");
  const auto idx = batch_indices(samples_.size(), cfg_.train.batch_size, step_, cfg_.seeds.data);
  std::vector<const PartialLabelSample*> batch;
  for (std::size_t i : idx) batch.push_back(&samples_[i]);
  StepRecord rec;
  rec.lr = poly_lr(cfg_.train.lr, step_, cfg_.train.steps, cfg_.train.lr_power);
  rec.loss = training_step(batch, *model_, *opt_, cfg_.train, cfg_.seeds.noise, step_);
  for (std::size_t k = 0; k < stl_.size(); ++k) {
    const double l = single_task_step(batch, *stl_[k], *stl_opt_[k], cfg_.train, step_);
    if (!std::isnan(l)) rec.single_task[stl_[k]->task().name] = l;
  }
  ++step_;
  return rec;
}

std::vector<const SingleTaskModel*> Trainer::single_task_models() const {
  std::vector<const SingleTaskModel*> out;
  for (const auto& m : stl_) out.push_back(m.get());
  return out;
}

namespace {

void append_optimizer(std::vector<ckpt::NamedTensor>& out, const Adam& opt, const std::string& prefix) {
  const auto& params = opt.parameters();
  Tensor counts({static_cast<int>(params.size())});
  for (std::size_t k = 0; k < params.size(); ++k) {
    out.push_back({prefix + "m." + params[k].name, opt.first_moments()[k]});
    out.push_back({prefix + "v." + params[k].name, opt.second_moments()[k]});
    counts[k] = static_cast<double>(opt.step_counts()[k]);
  }
  out.push_back({prefix + "steps", counts});
}

void restore_optimizer(Adam& opt, const std::map<std::string, const Tensor*>& byname, const std::string& prefix) {
  auto get = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    const auto it = byname.find(name);
    if (it == byname.end()) throw Error("checkpoint lacks optimizer entry " + name);
    if (it->second->shape() != shape) throw Error("checkpoint optimizer entry " + name + " has the wrong shape");
    return *it->second;
  };
  const auto& params = opt.parameters();
  const Tensor& counts = get(prefix + "steps", {static_cast<int>(params.size())});
  for (std::size_t k = 0; k < params.size(); ++k) {
    opt.first_moments()[k] = get(prefix + "m." + params[k].name, params[k].var.shape());
    opt.second_moments()[k] = get(prefix + "v." + params[k].name, params[k].var.shape());
    opt.step_counts()[k] = static_cast<std::int64_t>(counts[k]);
  }
}

}  // namespace

void Trainer::save(const fs::path& dir, const std::string& stem, const nlohmann::json& extra) const {
  fs::create_directories(dir);
  std::vector<ckpt::NamedTensor> entries = ckpt::registry_state(model_->registry(), "model.");
  append_optimizer(entries, *opt_, "opt.");
  for (std::size_t k = 0; k < stl_.size(); ++k) {
    const std::string p = "stl." + stl_[k]->task().name + ".";
    for (auto& e : ckpt::registry_state(stl_[k]->registry(), p + "model.")) entries.push_back(std::move(e));
    append_optimizer(entries, *stl_opt_[k], p + "opt.");
  }
  const std::string bytes = ckpt::encode_tensors(entries);
  io::write_file_atomic(dir / (stem + ".bin"), bytes);
  nlohmann::json info = extra.is_object() ? extra : nlohmann::json::object();
  info["format"] = "dmtl-checkpoint";
  info["version"] = 1;
  info["step"] = step_;
  info["config"] = cfg_;
  info["tasks"] = cfg_.backbone.tasks;
  info["archive"] = stem + ".bin";
  info["sha256"] = io::sha256_hex(bytes);
  io::write_file_atomic(dir / (stem + ".json"), info.dump(2) + "\n");
}

nlohmann::json read_checkpoint_info(const fs::path& dir, const std::string& stem) {
  const fs::path p = dir / (stem + ".json");
  if (!fs::exists(p)) throw Error("checkpoint sidecar not found: " + p.string());
  nlohmann::json info = nlohmann::json::parse(io::read_file(p), nullptr, false);
  if (info.is_discarded() || !info.is_object() || info.value("format", "") != "dmtl-checkpoint")
    throw Error(p.string() + " is not a checkpoint sidecar");
  return info;
}

namespace {

std::vector<ckpt::NamedTensor> read_verified_archive(const fs::path& dir, const nlohmann::json& info) {
  const fs::path bin = dir / info.at("archive").get<std::string>();
  const std::string bytes = io::read_file(bin);
  if (io::sha256_hex(bytes) != info.at("sha256").get<std::string>())
    throw Error("checkpoint archive " + bin.string() + " does not match its recorded hash");
  return ckpt::decode_tensors(bytes);
}

}  // namespace

void Trainer::load(const fs::path& dir, const std::string& stem) {
  const nlohmann::json info = read_checkpoint_info(dir, stem);
  const auto diff = divergent_keys(info.at("config"), nlohmann::json(cfg_));
  if (!diff.empty()) {
    std::string msg = "checkpoint was written with a different config; divergent keys:";
    for (const auto& k : diff) msg += " " + k;
    throw Error(msg);
  }
  const auto entries = read_verified_archive(dir, info);
  std::map<std::string, const Tensor*> byname;
  for (const auto& e : entries) byname[e.name] = &e.value;
  ckpt::load_registry_state(model_->registry(), entries, "model.");
  restore_optimizer(*opt_, byname, "opt.");
  for (std::size_t k = 0; k < stl_.size(); ++k) {
    const std::string p = "stl." + stl_[k]->task().name + ".";
    ckpt::load_registry_state(stl_[k]->registry(), entries, p + "model.");
    restore_optimizer(*stl_opt_[k], byname, p + "opt.");
  }
  step_ = info.at("step").get<int>();
}

std::unique_ptr<DiffusionModel> load_model(const fs::path& dir, const std::string& stem, RunConfig* config,
                                           int diffusion_steps) {
  const nlohmann::json info = read_checkpoint_info(dir, stem);
  RunConfig cfg = info.at("config").get<RunConfig>();
  if (diffusion_steps > 0) cfg.diffusion.steps = diffusion_steps;
  auto model = std::make_unique<DiffusionModel>(cfg.model(), cfg.seeds.init);
  ckpt::load_registry_state(model->registry(), read_verified_archive(dir, info), "model.");
  if (config) *config = cfg;
  return model;
}

std::string build_manifest(const fs::path& dir) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string r = fs::relative(e.path(), dir).generic_string();
    if (r != "MANIFEST") rel.push_back(r);
  }
  std::sort(rel.begin(), rel.end());
  std::string out;
  for (const auto& r : rel) out += io::sha256_file(dir / r) + "  " + r + "\n";
  return out;
}

namespace {

bool has_all_label_files(const data::Dataset& d) {
  for (const auto& id : d.ids())
    for (const auto& t : d.tasks())
      if (!fs::exists(data::label_file(d.root(), id, t))) return false;
  return true;
}

data::Dataset prepare_dataset(const fs::path& root, const RunConfig& cfg, std::size_t n, data::LabelSetting setting,
                              std::uint64_t seed) {
  if (!fs::exists(root / "mapping.txt")) {
    data::DatasetSpec spec;
    spec.scene = cfg.data.scene;
    spec.tasks = cfg.backbone.tasks;
    spec.n = n;
    spec.setting = setting;
    spec.seed = seed;
    data::generate_dataset(root, spec);
  }
  data::Dataset d = data::Dataset::open(root);
  if (d.tasks() != cfg.backbone.tasks) throw Error("dataset " + root.string() + " has different tasks than the config");
  return d;
}

void write_text(const fs::path& p, const std::string& s) { io::write_file_atomic(p, s); }

}  // namespace

RunSummary run_training(const RunConfig& cfg_in, const fs::path& run_dir, bool resume) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  const fs::path ckpt_dir = run_dir / "checkpoints";
  if (resume) {
    if (!fs::exists(ckpt_dir / "last.json")) throw Error("nothing to resume: " + (ckpt_dir / "last.json").string() + " not found");
  } else if (fs::exists(run_dir / "config.json")) {
    throw Error("run directory " + run_dir.string() + " already holds a run; pass --resume to continue it");
  }
  fs::create_directories(run_dir);
  write_text(run_dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");

  const fs::path train_root = cfg.data.train.empty() ? run_dir / "data" / "train" : fs::path(cfg.data.train);
  const data::Dataset train_set = prepare_dataset(train_root, cfg, cfg.data.n, cfg.data.setting, cfg.data.seed);
  std::optional<data::Dataset> eval_set;
  if (!cfg.data.eval.empty()) {
    eval_set = prepare_dataset(cfg.data.eval, cfg, 0, data::LabelSetting::full, 0);
  } else if (cfg.data.eval_n > 0) {
    eval_set = prepare_dataset(run_dir / "data" / "eval", cfg, cfg.data.eval_n, data::LabelSetting::full,
                               cfg.data.seed + kEvalSeedOffset);
  }
  const auto train_eval_samples =
      train_set.load_all(has_all_label_files(train_set) ? data::LabelView::all : data::LabelView::mapped);
  std::vector<PartialLabelSample> eval_samples;
  if (eval_set) eval_samples = eval_set->load_all(data::LabelView::all);
  const auto& select_samples = eval_set ? eval_samples : train_eval_samples;

  Trainer trainer(cfg, train_set.load_all(data::LabelView::mapped));
  std::optional<metrics::MetricReport> file_baseline;
  if (cfg.baseline.mode == BaselineMode::file) file_baseline = parse_report(io::read_file(cfg.baseline.report));

  RunSummary summary;
  const fs::path log_path = run_dir / "log.jsonl";
  if (resume) {
    trainer.load(ckpt_dir, "last");
    const nlohmann::json info = read_checkpoint_info(ckpt_dir, "last");
    if (info.contains("best_delta_m")) summary.best_delta_m = info.at("best_delta_m").get<double>();
    std::string kept;
    if (fs::exists(log_path)) {
      std::istringstream in(io::read_file(log_path));
      std::string line;
      for (int i = 0; i < trainer.current_step() && std::getline(in, line); ++i) kept += line + "\n";
    }
    write_text(log_path, kept);
  } else {
    write_text(log_path, "");
  }

  auto baseline_for = [&](const std::vector<PartialLabelSample>& samples) -> std::optional<metrics::MetricReport> {
    if (file_baseline) return file_baseline;
    if (cfg.baseline.mode == BaselineMode::cotrain) return evaluate_single(trainer.single_task_models(), samples);
    return std::nullopt;
  };
  auto checkpoint_extra = [&]() {
    nlohmann::json extra = nlohmann::json::object();
    if (summary.best_delta_m) extra["best_delta_m"] = *summary.best_delta_m;
    return extra;
  };
  // Scores the current parameters; saves `best` when delta_m improves.
  auto select = [&]() {
    EvalReport r = evaluate(trainer.model(), select_samples, cfg.seeds.eval);
    const auto base = baseline_for(select_samples);
    if (!base) return;
    attach_delta_m(r.denoised, *base, cfg.backbone.tasks);
    if (!summary.best_delta_m || *r.denoised.delta_m > *summary.best_delta_m) {
      summary.best_delta_m = r.denoised.delta_m;
      trainer.save(ckpt_dir, "best", checkpoint_extra());
    }
  };

  std::ofstream log(log_path, std::ios::app | std::ios::binary);
  while (!trainer.finished()) {
    const StepRecord rec = trainer.step();
    log << to_json(rec).dump() << "\n";
    log.flush();
    const int done = trainer.current_step();
    if (cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && !trainer.finished()) {
      select();
      trainer.save(ckpt_dir, "last", checkpoint_extra());
    }
  }
  log.close();
  select();
  trainer.save(ckpt_dir, "last", checkpoint_extra());
  summary.steps = trainer.current_step();

  nlohmann::json final_eval;
  auto score = [&](const std::vector<PartialLabelSample>& samples, const char* key, const char* report_name,
                   const char* baseline_name) {
    EvalReport r = evaluate(trainer.model(), samples, cfg.seeds.eval);
    const auto base = baseline_for(samples);
    if (base) {
      attach_delta_m(r.initial, *base, cfg.backbone.tasks);
      attach_delta_m(r.denoised, *base, cfg.backbone.tasks);
      write_text(run_dir / baseline_name, format_report(*base));
      final_eval[key]["baseline"] = report_json(*base);
    }
    final_eval[key]["initial"] = report_json(r.initial);
    final_eval[key]["denoised"] = report_json(r.denoised);
    write_text(run_dir / report_name, format_report(r.denoised));
    return std::make_pair(r, base);
  };
  const auto [train_report, train_base] = score(train_eval_samples, "train", "report_train.txt", "baseline_train.txt");
  summary.train_report = train_report;
  summary.baseline = train_base;
  if (eval_set) {
    const auto [eval_report, eval_base] = score(eval_samples, "eval", "report_eval.txt", "baseline_eval.txt");
    summary.eval_report = eval_report;
    if (eval_base) summary.baseline = eval_base;
  }
  final_eval["steps"] = summary.steps;
  if (summary.best_delta_m) final_eval["best_delta_m"] = *summary.best_delta_m;
  write_text(run_dir / "final_eval.json", final_eval.dump(2) + "\n");
  write_text(run_dir / "MANIFEST", build_manifest(run_dir));
  return summary;
}

}  // namespace dmtl::train
