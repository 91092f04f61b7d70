// SPDX-License-Identifier: Apache-2.0
// dmtl: dataset generation, training, evaluation and denoising dumps.
// Exit codes: 0 success, 1 runtime error, 2 invalid flags or config.
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "dmtl/data.hpp"
#include "dmtl/io.hpp"
#include "dmtl/metrics.hpp"
#include "dmtl/run.hpp"
#include "dmtl/visualize.hpp"

namespace fs = std::filesystem;
using namespace dmtl;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// `--a.b value` and `--a.b=value` pairs left over by the parser.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw UsageError("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw UsageError("override --" + body + " needs a value");
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

/// Run directory, checkpoint directory or checkpoint file -> (directory, stem).
std::pair<fs::path, std::string> locate_checkpoint(const fs::path& p) {
  if (fs::is_directory(p)) {
    if (fs::exists(p / "checkpoints" / "last.json")) return {p / "checkpoints", "last"};
    if (fs::exists(p / "last.json")) return {p, "last"};
    throw Error("no checkpoint found in " + p.string());
  }
  if (p.extension() == ".json" || p.extension() == ".bin") return {p.parent_path(), p.stem().string()};
  throw Error("not a checkpoint: " + p.string());
}

std::string timestamp_dir() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return std::string("runs/") + buf;
}

void write_manifest(const fs::path& dir) { io::write_file_atomic(dir / "MANIFEST", train::build_manifest(dir)); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct GenDataArgs {
  std::string out;
  std::size_t n = 64;
  std::string setting = "one_label";
  std::uint64_t seed = 0;
  int height = 64, width = 64, classes = 5;
};

int cmd_gen_data(const GenDataArgs& a) {
  data::DatasetSpec spec;
  spec.n = a.n;
  spec.seed = a.seed;
  spec.scene.height = a.height;
  spec.scene.width = a.width;
  spec.scene.classes = a.classes;
  spec.tasks = default_tasks(a.classes);
  try {
    spec.setting = data::label_setting_from_string(a.setting);
    spec.scene.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  data::generate_dataset(a.out, spec);
  write_manifest(a.out);
  const auto ds = data::Dataset::open(a.out);
  std::cout << "wrote " << ds.size() << " images to " << a.out << " (" << data::to_string(spec.setting) << ")\n";
  const auto counts = ds.mapping().task_counts(ds.tasks());
  for (std::size_t t = 0; t < ds.tasks().size(); ++t) std::cout << "  " << ds.tasks()[t].name << " " << counts[t] << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out;
  bool resume = false;
  std::vector<std::string> extras;
};

int cmd_train(const TrainArgs& a) {
  if (a.resume && a.out.empty()) throw UsageError("--resume needs --out RUN_DIR");
  const fs::path run_dir = a.out.empty() ? fs::path(timestamp_dir()) : fs::path(a.out);
  std::optional<fs::path> config_file;
  if (!a.config.empty()) config_file = a.config;
  else if (a.resume && fs::exists(run_dir / "config.json")) config_file = run_dir / "config.json";
  train::RunConfig cfg;
  try {
    cfg = train::resolve_config(config_file, parse_overrides(a.extras));
  } catch (const Error& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  const train::RunSummary s = train::run_training(cfg, run_dir, a.resume);
  std::cout << "run " << run_dir.string() << ": " << s.steps << " steps\n";
  const auto& r = s.eval_report ? *s.eval_report : s.train_report;
  std::cout << "initial\n" << train::format_report(r.initial) << "denoised\n" << train::format_report(r.denoised);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string view = "all";
  std::optional<std::uint64_t> seed;
  std::string baseline;
  std::string out;
  std::string from_numbers;
  std::string lower_is_better = "depth,normal";
};

int cmd_eval(const EvalArgs& a) {
  if (!a.from_numbers.empty()) {
    if (a.baseline.empty()) throw UsageError("--from-numbers needs --baseline");
    metrics::MetricReport mtl = train::parse_report(io::read_file(a.from_numbers));
    const metrics::MetricReport stl = train::parse_report(io::read_file(a.baseline));
    std::map<std::string, bool> lower;
    for (const auto& [task, _] : stl.per_task) lower[task] = false;
    for (const auto& task : split_list(a.lower_is_better))
      if (lower.count(task)) lower[task] = true;
    mtl.delta_m = metrics::compute_delta_m(mtl.per_task, stl.per_task, lower);
    const std::string text = train::format_report(mtl);
    if (!a.out.empty()) io::write_file_atomic(a.out, text);
    std::cout << text;
    return 0;
  }
  if (a.checkpoint.empty() || a.data.empty()) throw UsageError("eval needs --checkpoint and --data");
  data::LabelView view;
  if (a.view == "all") view = data::LabelView::all;
  else if (a.view == "mapped") view = data::LabelView::mapped;
  else throw UsageError("--view must be all or mapped");

  const auto [dir, stem] = locate_checkpoint(a.checkpoint);
  train::RunConfig cfg;
  const auto model = train::load_model(dir, stem, &cfg);
  const auto ds = data::Dataset::open(a.data);
  if (ds.tasks() != model->tasks()) throw Error("dataset " + a.data + " has different tasks than the checkpoint");
  train::EvalReport r = train::evaluate(*model, ds.load_all(view), a.seed.value_or(cfg.seeds.eval));
  if (!a.baseline.empty()) {
    const metrics::MetricReport base = train::parse_report(io::read_file(a.baseline));
    train::attach_delta_m(r.initial, base, model->tasks());
    train::attach_delta_m(r.denoised, base, model->tasks());
  }
  if (!a.out.empty()) io::write_file_atomic(a.out, train::format_report(r.denoised));
  std::cout << "initial\n" << train::format_report(r.initial) << "denoised\n" << train::format_report(r.denoised);
  return 0;
}

struct DenoiseArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
  int steps = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_denoise(const DenoiseArgs& a) {
  if (a.steps < 0) throw UsageError("--steps must be positive");
  const auto [dir, stem] = locate_checkpoint(a.checkpoint);
  train::RunConfig cfg;
  const auto model = train::load_model(dir, stem, &cfg, a.steps);
  const Tensor image = io::from_image8(io::read_png(a.image));
  if (image.dim(2) != 3) throw Error(a.image + " is not an RGB image");
  const auto trace = vis::trace_denoising(*model, image, a.seed.value_or(cfg.seeds.eval));
  const auto files = vis::write_trace(trace, model->tasks(), image.dim(0), image.dim(1), a.out,
                                      {cfg.data.scene.near, cfg.data.scene.far});
  write_manifest(a.out);
  std::cout << "wrote " << files.size() << " files to " << a.out << " (" << trace.steps << " steps)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task dense prediction with diffusion-based denoising"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic partially labeled dataset");
  g->add_option("--out", gen.out, "Dataset directory")->required();
  g->add_option("--n", gen.n, "Number of images")->capture_default_str();
  g->add_option("--setting", gen.setting, "one_label, random_label or full")->capture_default_str();
  g->add_option("--seed", gen.seed, "Base scene seed")->capture_default_str();
  g->add_option("--height", gen.height, "Image height")->capture_default_str();
  g->add_option("--width", gen.width, "Image width")->capture_default_str();
  g->add_option("--classes", gen.classes, "Segmentation classes including background")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; extra --section.key value pairs override the config");
  t->add_option("--config", tr.config, "JSON config file");
  t->add_option("--out", tr.out, "Run directory (default runs/<UTC timestamp>)");
  t->add_flag("--resume", tr.resume, "Continue from RUN_DIR/checkpoints/last");
  t->allow_extras();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Run directory or checkpoint file");
  e->add_option("--data", ev.data, "Dataset directory");
  e->add_option("--view", ev.view, "Labels to score: all or mapped")->capture_default_str();
  e->add_option("--seed", ev.seed, "Evaluation noise seed (default from the checkpoint config)");
  e->add_option("--baseline", ev.baseline, "Single-task report file; adds delta_m");
  e->add_option("--out", ev.out, "Write the denoised report here");
  e->add_option("--from-numbers", ev.from_numbers, "Report file to score against --baseline without a model");
  e->add_option("--lower-is-better", ev.lower_is_better, "Comma list of lower-is-better tasks for --from-numbers")
      ->capture_default_str();

  DenoiseArgs dn;
  auto* d = app.add_subcommand("denoise", "Dump every denoising step of one image");
  d->add_option("--checkpoint", dn.checkpoint, "Run directory or checkpoint file")->required();
  d->add_option("--image", dn.image, "RGB PNG")->required();
  d->add_option("--out", dn.out, "Output directory")->required();
  d->add_option("--steps", dn.steps, "Diffusion steps (default from the checkpoint)");
  d->add_option("--seed", dn.seed, "Noise seed (default from the checkpoint config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsageError;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) {
      tr.extras = t->remaining();
      return cmd_train(tr);
    }
    if (e->parsed()) return cmd_eval(ev);
    if (d->parsed()) return cmd_denoise(dn);
  } catch (const UsageError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsageError;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
