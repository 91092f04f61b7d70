// SPDX-License-Identifier: Apache-2.0
#include "dmtl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "dmtl/ops.hpp"

namespace dmtl::train {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys, const char* what) {
  for (const auto& [k, _] : j.items())
    if (!keys.count(k)) throw Error(std::string("unknown ") + what + " key: " + k);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double TrainConfig::weight(const std::string& task) const {
  const auto it = task_weights.find(task);
  return it == task_weights.end() ? 1.0 : it->second;
}

void TrainConfig::validate() const {
  if (steps < 1) throw Error("train.steps must be >= 1");
  if (batch_size < 1) throw Error("train.batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("train.lr must be finite and >= 0");
  if (!(lr_power >= 0.0)) throw Error("train.lr_power must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw Error("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw Error("train.adam_eps must be > 0");
  if (eval_every < 0) throw Error("train.eval_every must be >= 0");
  for (const auto& [k, w] : task_weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("task weight of '" + k + "' must be finite and >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},           {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"lr_power", c.lr_power},     {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},     {"task_weights", c.task_weights},
                     {"eval_every", c.eval_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j, {"steps", "batch_size", "lr", "lr_power", "adam_beta1", "adam_beta2", "adam_eps", "task_weights",
                     "eval_every"},
                 "train");
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.lr_power = j.value("lr_power", d.lr_power);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.task_weights = j.value("task_weights", d.task_weights);
  c.eval_every = j.value("eval_every", d.eval_every);
}

void to_json(nlohmann::json& j, const Seeds& s) {
  j = nlohmann::json{{"data", s.data}, {"noise", s.noise}, {"init", s.init}, {"eval", s.eval}};
}

void from_json(const nlohmann::json& j, Seeds& s) {
  reject_unknown(j, {"data", "noise", "init", "eval"}, "seeds");
  Seeds d;
  s.data = j.value("data", d.data);
  s.noise = j.value("noise", d.noise);
  s.init = j.value("init", d.init);
  s.eval = j.value("eval", d.eval);
}

double poly_lr(double base, int step, int total_steps, double power) {
  const double frac = std::clamp(1.0 - static_cast<double>(step) / std::max(1, total_steps), 0.0, 1.0);
  return base * std::pow(frac, power);
}

ag::Var task_loss(const ag::Var& pred, const std::vector<const TaskLabel*>& labels, const TaskSpec& task) {
  const int n = static_cast<int>(labels.size());
  if (n == 0 || pred.value().rank() != 4 || pred.dim(0) != n)
    throw ShapeError("task_loss(" + task.name + "): prediction " + to_string(pred.shape()) + " for " +
                     std::to_string(n) + " labels");
  if (pred.dim(3) != task.out_channels)
    throw ShapeError("task_loss(" + task.name + "): expected " + std::to_string(task.out_channels) + " channels");
  if (task.is_classification()) {
    const Shape& ls = labels[0]->classes.shape;
    if (ls.size() != 2) throw ShapeError("task_loss(" + task.name + "): missing class label");
    const int H = ls[0], W = ls[1];
    LabelMap stacked{{n, H, W}, {}};
    stacked.data.reserve(static_cast<std::size_t>(n) * H * W);
    for (const TaskLabel* l : labels) {
      if (l->classes.shape != ls) throw ShapeError("task_loss(" + task.name + "): label sizes differ within batch");
      stacked.data.insert(stacked.data.end(), l->classes.data.begin(), l->classes.data.end());
    }
    const ag::Var logits = (pred.dim(1) == H && pred.dim(2) == W) ? pred : ag::upsample_bilinear(pred, H, W);
    return ag::cross_entropy(logits, stacked, kIgnoreIndex);
  }
  const Tensor& first = labels[0]->values;
  if (first.rank() != 3 || first.dim(2) != task.out_channels)
    throw ShapeError("task_loss(" + task.name + "): regression label must be [H, W, " +
                     std::to_string(task.out_channels) + "]");
  const int H = first.dim(0), W = first.dim(1), C = first.dim(2);
  Tensor target({n, H, W, C});
  std::vector<std::uint8_t> mask;
  mask.reserve(static_cast<std::size_t>(n) * H * W);
  auto out = target.values().begin();
  for (const TaskLabel* l : labels) {
    if (l->values.shape() != first.shape()) throw ShapeError("task_loss(" + task.name + "): label sizes differ");
    out = std::copy(l->values.values().begin(), l->values.values().end(), out);
    mask.insert(mask.end(), l->valid.begin(), l->valid.end());
  }
  const ag::Var resized = (pred.dim(1) == H && pred.dim(2) == W) ? pred : ag::upsample_bilinear(pred, H, W);
  return ag::masked_l1(resized, target, mask);
}

Tensor stack_images(const std::vector<const PartialLabelSample*>& batch) {
  if (batch.empty()) throw Error("empty batch");
  const Shape& s = batch[0]->image.shape();
  Tensor out({static_cast<int>(batch.size()), s[0], s[1], s[2]});
  auto it = out.values().begin();
  for (const auto* b : batch) {
    if (b->image.shape() != s) throw ShapeError("images of one batch must share a shape");
    it = std::copy(b->image.values().begin(), b->image.values().end(), it);
  }
  return out;
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"step", r.step}, {"total", r.total}, {"initial", r.per_task_initial},
                     {"denoised", r.per_task_denoised}};
}

Adam::Adam(const nn::ParameterRegistry& reg, double beta1, double beta2, double eps)
    : params_(reg.parameters()), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
  t_.assign(params_.size(), 0);
}

void Adam::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ag::Var& p = params_[k].var;
    if (!p.has_grad()) continue;
    const double t = static_cast<double>(++t_[k]);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    const Tensor g = p.grad();
    auto m = m_[k].values();
    auto v = v_[k].values();
    auto w = p.mutable_value().values();
    auto gv = g.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gv[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gv[i] * gv[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

std::vector<int> labeled_rows(const std::vector<const PartialLabelSample*>& batch, const std::string& task) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch[i]->has_label(task)) rows.push_back(static_cast<int>(i));
  return rows;
}

ag::Var batch_loss(const std::vector<const PartialLabelSample*>& batch, const DiffusionModel& model,
                   const TrainConfig& cfg, std::uint64_t noise_seed, int step, LossReport& report) {
  for (const auto* s : batch) s->validate();
  const auto& tasks = model.tasks();
  const ag::Var images = ag::constant(stack_images(batch));
  const InitialPass pass = model.forward_initial(images, nn::Mode::train);

  report = LossReport{};
  report.step = step;
  std::vector<ag::Var> terms;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskSpec& task = tasks[t];
    report.per_task_initial[task.name] = 0.0;
    report.per_task_denoised[task.name] = 0.0;
    std::vector<int> rows = labeled_rows(batch, task.name);
    if (rows.empty()) continue;
    std::vector<const TaskLabel*> labels;
    for (int r : rows) labels.push_back(&batch[r]->labels.at(task.name));
    Rng rng({noise_seed, static_cast<std::uint64_t>(step), t});
    const Tensor noise = rng.normal(model.state_shape(pass, task.name, rows.size()));
    if (rows.size() == batch.size()) rows.clear();
    const TaskPass tp = model.run_task(pass, task.name, rows, noise);
    const ag::Var li = task_loss(tp.initial_prediction, labels, task);
    const ag::Var ld = task_loss(tp.prediction, labels, task);
    report.per_task_initial[task.name] = li.value().item();
    report.per_task_denoised[task.name] = ld.value().item();
    terms.push_back(ag::scale(ag::add(li, ld), cfg.weight(task.name)));
  }
  const ag::Var total = ag::add_n(terms);
  report.total = total.value().item();
  if (!std::isfinite(report.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << ":";
    for (const auto& [k, v] : report.per_task_initial) msg << " " << k << ".initial=" << v;
    for (const auto& [k, v] : report.per_task_denoised) msg << " " << k << ".denoised=" << v;
    msg << " batch=";
    for (const auto* s : batch) msg << s->id << " ";
    throw Error(msg.str());
  }
  return total;
}

LossReport training_step(const std::vector<const PartialLabelSample*>& batch, DiffusionModel& model, Adam& opt,
                         const TrainConfig& cfg, std::uint64_t noise_seed, int step) {
  model.registry().zero_grad();
  LossReport report;
  ag::backward(batch_loss(batch, model, cfg, noise_seed, step, report));
  opt.step(poly_lr(cfg.lr, step, cfg.steps, cfg.lr_power));
  return report;
}

double single_task_step(const std::vector<const PartialLabelSample*>& batch, SingleTaskModel& model, Adam& opt,
                        const TrainConfig& cfg, int step) {
  const TaskSpec& task = model.task();
  std::vector<const PartialLabelSample*> rows;
  std::vector<const TaskLabel*> labels;
  for (const auto* s : batch)
    if (s->has_label(task.name)) {
      rows.push_back(s);
      labels.push_back(&s->labels.at(task.name));
    }
  if (rows.empty()) return std::nan("");
  model.registry().zero_grad();
  const ag::Var pred = model.forward(ag::constant(stack_images(rows)), nn::Mode::train);
  const ag::Var loss = task_loss(pred, labels, task);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw Error("non-finite single-task loss for '" + task.name + "' at step " + std::to_string(step));
  ag::backward(loss);
  opt.step(poly_lr(cfg.lr, step, cfg.steps, cfg.lr_power));
  return value;
}

struct MetricAccumulator::State {
  std::optional<metrics::ConfusionMatrix> confusion;
  metrics::MeanAccumulator mean;
  metrics::ThresholdCounts thresholds;
  metrics::BoundaryCounts boundary{1};
  std::size_t samples = 0;
};

MetricAccumulator::MetricAccumulator(std::vector<TaskSpec> tasks) : tasks_(std::move(tasks)) {
  for (const auto& t : tasks_) {
    auto s = std::make_shared<State>();
    if (t.metric == MetricKind::miou) s->confusion.emplace(t.out_channels, kIgnoreIndex);
    state_.push_back(std::move(s));
  }
}

namespace {

// Positive-class probability per pixel from [H*W*C] logits.
std::vector<double> positive_probability(std::span<const double> logits, int channels) {
  const std::size_t pixels = logits.size() / static_cast<std::size_t>(channels);
  std::vector<double> p(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    if (channels == 1) {
      p[i] = 1.0 / (1.0 + std::exp(-logits[i]));
      continue;
    }
    const double* l = &logits[i * channels];
    const double mx = *std::max_element(l, l + channels);
    double z = 0.0;
    for (int c = 0; c < channels; ++c) z += std::exp(l[c] - mx);
    p[i] = std::exp(l[1] - mx) / z;
  }
  return p;
}

}  // namespace

void MetricAccumulator::add(const std::string& task_name, const Tensor& pred, const TaskLabel& label) {
  const std::size_t ti = task_index(tasks_, task_name);
  const TaskSpec& task = tasks_[ti];
  State& st = *state_[ti];
  const int H = task.is_classification() ? label.classes.shape.at(0) : label.values.dim(0);
  const int W = task.is_classification() ? label.classes.shape.at(1) : label.values.dim(1);
  if (pred.rank() != 4 || pred.dim(0) != 1 || pred.dim(3) != task.out_channels)
    throw ShapeError("metric input for '" + task.name + "' must be [1, h, w, " + std::to_string(task.out_channels) +
                     "], got " + to_string(pred.shape()));
  Tensor full;
  {
    ag::NoGradGuard guard;
    full = (pred.dim(1) == H && pred.dim(2) == W) ? pred
                                                  : ag::upsample_bilinear(ag::constant(pred), H, W).value();
  }
  const int C = task.out_channels;
  const std::size_t pixels = static_cast<std::size_t>(H) * W;
  switch (task.metric) {
    case MetricKind::miou: {
      std::vector<int> cls(pixels);
      for (std::size_t i = 0; i < pixels; ++i) {
        const double* l = &full[i * C];
        cls[i] = static_cast<int>(std::max_element(l, l + C) - l);
      }
      st.confusion->add(cls, label.classes.data);
      break;
    }
    case MetricKind::abs_err:
      metrics::accumulate_abs_err(st.mean, full.reshaped({H, W, C}), label.values, label.valid);
      break;
    case MetricKind::mean_angle_err:
      metrics::accumulate_angle_err(st.mean, full.reshaped({H, W, C}), label.values, label.valid);
      break;
    case MetricKind::max_f: {
      const auto p = positive_probability(full.values(), C);
      std::vector<double> prob;
      std::vector<std::uint8_t> gt;
      for (std::size_t i = 0; i < pixels; ++i) {
        if (label.classes.data[i] == kIgnoreIndex) continue;
        prob.push_back(p[i]);
        gt.push_back(label.classes.data[i] == 1 ? 1 : 0);
      }
      st.thresholds.add(prob, gt);
      break;
    }
    case MetricKind::ods_f: {
      const auto p = positive_probability(full.values(), C);
      Tensor prob({H, W});
      std::copy(p.begin(), p.end(), prob.values().begin());
      metrics::BinaryMap gt{H, W, std::vector<std::uint8_t>(pixels, 0)};
      for (std::size_t i = 0; i < pixels; ++i) gt.data[i] = label.classes.data[i] == 1 ? 1 : 0;
      st.boundary.add(prob, gt);
      break;
    }
  }
  ++st.samples;
}

metrics::MetricReport MetricAccumulator::report() const {
  metrics::MetricReport r;
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    const State& st = *state_[t];
    if (st.samples == 0) throw Error("no evaluated samples carry a label for task '" + tasks_[t].name + "'");
    double v = 0.0;
    switch (tasks_[t].metric) {
      case MetricKind::miou: v = st.confusion->miou(); break;
      case MetricKind::abs_err:
      case MetricKind::mean_angle_err: v = st.mean.mean(); break;
      case MetricKind::max_f: v = st.thresholds.max_f().value; break;
      case MetricKind::ods_f: v = st.boundary.ods_f(); break;
    }
    r.per_task[tasks_[t].name] = v;
  }
  return r;
}

EvalReport evaluate(const DiffusionModel& model, const std::vector<PartialLabelSample>& samples,
                    std::uint64_t eval_seed) {
  if (samples.empty()) throw Error("cannot evaluate an empty dataset");
  ag::NoGradGuard guard;
  const auto& tasks = model.tasks();
  MetricAccumulator initial(tasks), denoised(tasks);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PartialLabelSample& s = samples[i];
    const Tensor image = s.image.reshaped({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    const InitialPass pass = model.forward_initial(ag::constant(image), nn::Mode::eval);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const std::string& name = tasks[t].name;
      if (!s.has_label(name)) continue;
      Rng rng({eval_seed, i, t});
      const Tensor noise = rng.normal(model.state_shape(pass, name, 1));
      const TaskPass tp = model.run_task(pass, name, {}, noise);
      initial.add(name, tp.initial_prediction.value(), s.labels.at(name));
      denoised.add(name, tp.prediction.value(), s.labels.at(name));
    }
  }
  return {initial.report(), denoised.report()};
}

metrics::MetricReport evaluate_single(const std::vector<const SingleTaskModel*>& models,
                                      const std::vector<PartialLabelSample>& samples) {
  if (samples.empty()) throw Error("cannot evaluate an empty dataset");
  ag::NoGradGuard guard;
  std::vector<TaskSpec> tasks;
  for (const auto* m : models) tasks.push_back(m->task());
  MetricAccumulator acc(tasks);
  for (const auto& s : samples) {
    const Tensor image = s.image.reshaped({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    for (const auto* m : models) {
      if (!s.has_label(m->task().name)) continue;
      acc.add(m->task().name, m->forward(ag::constant(image), nn::Mode::eval).value(), s.labels.at(m->task().name));
    }
  }
  return acc.report();
}

void attach_delta_m(metrics::MetricReport& report, const metrics::MetricReport& baseline,
                    const std::vector<TaskSpec>& tasks) {
  std::map<std::string, bool> lower;
  for (const auto& t : tasks) lower[t.name] = t.lower_is_better;
  report.delta_m = metrics::compute_delta_m(report.per_task, baseline.per_task, lower);
}

std::string format_report(const metrics::MetricReport& r) {
  std::string out;
  for (const auto& [k, v] : r.per_task) out += k + " " + fmt(v) + "\n";
  if (r.delta_m) out += "delta_m " + fmt(*r.delta_m) + "\n";
  return out;
}

metrics::MetricReport parse_report(const std::string& text) {
  metrics::MetricReport r;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, value, extra;
    if (!(ls >> key >> value) || (ls >> extra))
      throw Error("report line " + std::to_string(lineno) + ": expected '<key> <value>'");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size()) throw Error("report line " + std::to_string(lineno) + ": bad number '" + value + "'");
    if (key == "delta_m") r.delta_m = v;
    else if (!r.per_task.emplace(key, v).second) throw Error("report lists '" + key + "' twice");
  }
  if (r.per_task.empty()) throw Error("report has no task entries");
  return r;
}

nlohmann::json report_json(const metrics::MetricReport& r) {
  nlohmann::json j{{"per_task", r.per_task}};
  if (r.delta_m) j["delta_m"] = *r.delta_m;
  return j;
}

}  // namespace dmtl::train
