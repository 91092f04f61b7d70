// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "dmtl/data.hpp"
#include "dmtl/io.hpp"
#include "dmtl/ops.hpp"
#include "dmtl/run.hpp"
#include "dmtl/training.hpp"
#include "tempdir.hpp"

using namespace dmtl;
using namespace dmtl::train;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
namespace fs = std::filesystem;

namespace {

data::SceneConfig small_scene() {
  data::SceneConfig s;
  s.height = 16;
  s.width = 16;
  return s;
}

PartialLabelSample make_sample(std::uint64_t seed, const std::set<std::string>& labeled) {
  const data::Scene scene = data::generate_scene(seed, small_scene());
  PartialLabelSample s;
  s.id = std::to_string(seed);
  s.image = scene.image;
  for (const auto& t : default_tasks()) {
    if (!labeled.count(t.name)) continue;
    s.labels.emplace(t.name, data::scene_label(scene, t));
    s.labeled_tasks.insert(t.name);
  }
  return s;
}

ModelConfig small_model(DiffusionVariant v = DiffusionVariant::prediction) {
  ModelConfig m;
  m.backbone.channels = 8;
  m.backbone.decoder_blocks = 1;
  m.denoiser.num_blocks = 1;
  m.denoiser.head_layers = 1;
  m.denoiser.variant = v;
  return m;
}

RunConfig small_run() {
  RunConfig c;
  const ModelConfig m = small_model();
  c.backbone = m.backbone;
  c.denoiser = m.denoiser;
  c.data.scene = small_scene();
  c.data.n = 8;
  c.data.eval_n = 4;
  c.train.steps = 4;
  c.train.batch_size = 2;
  c.train.eval_every = 2;
  return c;
}

std::vector<PartialLabelSample> one_label_set(std::size_t n) {
  const auto tasks = default_tasks();
  std::vector<PartialLabelSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(100 + i, {tasks[i % tasks.size()].name}));
  return out;
}

std::vector<const PartialLabelSample*> ptrs(const std::vector<PartialLabelSample>& v) {
  std::vector<const PartialLabelSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

std::vector<Tensor> snapshot(const nn::ParameterRegistry& reg, std::string_view prefix = "") {
  std::vector<Tensor> out;
  for (const auto& p : reg.parameters_with_prefix(prefix)) out.push_back(p.var.value());
  return out;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("task loss closed forms", "[loss]") {
  const TaskSpec seg = TaskSpec::make("semseg", TaskKind::segmentation, 2);
  LabelMap lm{{4, 4}, std::vector<int>(16, 1)};
  const TaskLabel label = TaskLabel::classification(lm);

  SECTION("uniform logits give ln C") {
    const ag::Var zero = ag::constant(Tensor::zeros({1, 4, 4, 2}));
    CHECK_THAT(task_loss(zero, {&label}, seg).value().item(), WithinAbs(std::log(2.0), 1e-12));
    const TaskSpec seg5 = TaskSpec::make("semseg", TaskKind::segmentation, 5);
    const ag::Var zero5 = ag::constant(Tensor::zeros({1, 2, 2, 5}));
    CHECK_THAT(task_loss(zero5, {&label}, seg5).value().item(), WithinAbs(std::log(5.0), 1e-12));
  }
  SECTION("saturated logits stay finite") {
    Tensor right({1, 4, 4, 2}), wrong({1, 4, 4, 2});
    for (std::size_t i = 0; i < 16; ++i) {
      right[2 * i + 1] = 100.0;
      wrong[2 * i] = 100.0;
    }
    CHECK_THAT(task_loss(ag::constant(right), {&label}, seg).value().item(), WithinAbs(0.0, 1e-12));
    CHECK_THAT(task_loss(ag::constant(wrong), {&label}, seg).value().item(), WithinRel(100.0, 1e-12));
  }
  SECTION("ignore pixels do not count") {
    LabelMap mixed{{4, 4}, std::vector<int>(16, kIgnoreIndex)};
    mixed.data[0] = 0;
    Tensor logits({1, 4, 4, 2});
    for (std::size_t i = 0; i < 16; ++i) logits[2 * i + 1] = 7.0;
    const TaskLabel l = TaskLabel::classification(mixed);
    CHECK_THAT(task_loss(ag::constant(logits), {&l}, seg).value().item(), WithinRel(7.0 + std::log1p(std::exp(-7.0)), 1e-12));
  }

  const TaskSpec depth = TaskSpec::make("depth", TaskKind::depth, 1);
  Tensor gt({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) gt[i] = 1.0 + 0.1 * static_cast<double>(i);
  const TaskLabel dl = TaskLabel::regression(gt);
  SECTION("exact regression gives zero") {
    CHECK(task_loss(ag::constant(gt.reshaped({1, 4, 4, 1})), {&dl}, depth).value().item() == 0.0);
  }
  SECTION("constant maps survive upsampling") {
    Tensor flat({4, 4, 1});
    flat.fill(2.0);
    const TaskLabel fl = TaskLabel::regression(flat);
    Tensor low({1, 2, 2, 1});
    low.fill(2.5);
    CHECK_THAT(task_loss(ag::constant(low), {&fl}, depth).value().item(), WithinAbs(0.5, 1e-12));
  }
  SECTION("invalid regression pixels are masked") {
    Tensor holes = gt;
    holes[3] = std::numeric_limits<double>::quiet_NaN();
    const TaskLabel hl = TaskLabel::regression(holes);
    Tensor pred = gt;
    pred[3] = 1e6;
    CHECK(task_loss(ag::constant(pred.reshaped({1, 4, 4, 1})), {&hl}, depth).value().item() == 0.0);
  }
}

TEST_CASE("polynomial learning rate", "[optim]") {
  CHECK(poly_lr(1e-3, 0, 100, 0.9) == 1e-3);
  CHECK(poly_lr(1e-3, 100, 100, 0.9) == 0.0);
  CHECK_THAT(poly_lr(1e-3, 50, 100, 0.9), WithinRel(1e-3 * std::pow(0.5, 0.9), 1e-14));
  double prev = 1.0;
  for (int s = 0; s <= 100; ++s) {
    const double lr = poly_lr(1.0, s, 100, 0.9);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("adam first step moves by lr along the gradient sign", "[optim]") {
  nn::ParameterRegistry reg;
  ag::Var a = reg.add_parameter("a", Tensor({3}, {1.0, -2.0, 0.5}));
  ag::Var b = reg.add_parameter("b", Tensor({1}, {4.0}));
  Adam opt(reg, 0.9, 0.999, 1e-12);
  ag::backward(ag::sum(ag::mul(a, ag::constant(Tensor({3}, {3.0, -0.25, 1e-3})))));
  opt.step(0.1);
  CHECK_THAT(a.value()[0], WithinAbs(0.9, 1e-9));
  CHECK_THAT(a.value()[1], WithinAbs(-1.9, 1e-9));
  CHECK_THAT(a.value()[2], WithinAbs(0.4, 1e-6));
  CHECK(b.value()[0] == 4.0);
  CHECK(opt.step_counts() == std::vector<std::int64_t>{1, 0});
}

TEST_CASE("training step supervises labeled tasks only", "[train]") {
  const auto samples = one_label_set(3);
  const auto batch = ptrs(samples);
  TrainConfig cfg;
  cfg.steps = 10;

  SECTION("zero learning rate leaves parameters untouched") {
    DiffusionModel m(small_model(), 7);
    Adam opt(m.registry(), cfg);
    TrainConfig frozen = cfg;
    frozen.lr = 0.0;
    const auto before = snapshot(m.registry());
    const LossReport r = training_step(batch, m, opt, frozen, 1, 0);
    CHECK(snapshot(m.registry()) == before);
    double sum = 0;
    for (const auto& t : m.tasks()) sum += r.per_task_initial.at(t.name) + r.per_task_denoised.at(t.name);
    CHECK_THAT(r.total, WithinRel(sum, 1e-12));
  }
  SECTION("task weights scale the total") {
    DiffusionModel m(small_model(), 7);
    Adam opt(m.registry(), cfg);
    TrainConfig weighted = cfg;
    weighted.lr = 0.0;
    weighted.task_weights = {{"depth", 3.0}};
    const LossReport r = training_step(batch, m, opt, weighted, 1, 0);
    double sum = 0;
    for (const auto& t : m.tasks())
      sum += weighted.weight(t.name) * (r.per_task_initial.at(t.name) + r.per_task_denoised.at(t.name));
    CHECK_THAT(r.total, WithinRel(sum, 1e-12));
  }
  SECTION("a one-label batch reports exactly one task") {
    DiffusionModel m(small_model(), 7);
    Adam opt(m.registry(), cfg);
    const std::vector<const PartialLabelSample*> single{&samples[1]};
    const LossReport r = training_step(single, m, opt, cfg, 1, 0);
    int nonzero = 0;
    for (const auto& [task, v] : r.per_task_denoised) {
      if (v != 0.0) ++nonzero;
      if (task != "depth") CHECK(r.per_task_initial.at(task) == 0.0);
    }
    CHECK(nonzero == 1);
    CHECK(r.per_task_denoised.at("depth") > 0.0);
  }
  SECTION("unlabeled decoders learn through the condition") {
    for (bool no_cond : {false, true}) {
      ModelConfig mc = small_model();
      mc.denoiser.ablation_no_cond = no_cond;
      DiffusionModel m(mc, 7);
      Adam opt(m.registry(), cfg);
      const auto before = snapshot(m.registry(), "backbone.decoder.semseg.");
      const std::vector<const PartialLabelSample*> depth_only{&samples[1]};
      training_step(depth_only, m, opt, cfg, 1, 0);
      CHECK((snapshot(m.registry(), "backbone.decoder.semseg.") != before) == !no_cond);
    }
  }
  SECTION("same seeds give the same step") {
    DiffusionModel m1(small_model(), 7), m2(small_model(), 7);
    Adam o1(m1.registry(), cfg), o2(m2.registry(), cfg);
    CHECK(training_step(batch, m1, o1, cfg, 1, 3) == training_step(batch, m2, o2, cfg, 1, 3));
    CHECK(snapshot(m1.registry()) == snapshot(m2.registry()));
  }
}

TEST_CASE("poisoned labels of unlabeled tasks never reach the loss", "[train][data]") {
  dmtl::testing::TempDir dir;
  data::DatasetSpec spec;
  spec.scene = small_scene();
  spec.n = 6;
  spec.seed = 11;
  data::generate_dataset(dir.path(), spec);
  const data::Dataset full = data::Dataset::open(dir.path());
  const TaskSpec depth = default_tasks()[1];
  for (std::size_t i = 0; i < full.size(); ++i) {
    const auto& id = full.ids()[i];
    if (full.mapping().per_image[i].front() == "depth") continue;
    Tensor nan({16, 16, 1});
    nan.fill(std::numeric_limits<double>::quiet_NaN());
    io::write_npy(data::label_file(dir.path(), id, depth), nan);
  }
  const auto samples = data::Dataset::open(dir.path()).load_all(data::LabelView::mapped);
  DiffusionModel m(small_model(), 3);
  TrainConfig cfg;
  Adam opt(m.registry(), cfg);
  const LossReport r = training_step(ptrs(samples), m, opt, cfg, 1, 0);
  CHECK(std::isfinite(r.total));
  for (const auto& p : m.registry().parameters()) CHECK(p.var.value().all_finite());
}

TEST_CASE("metric accumulator reaches the optimum on exact maps", "[eval]") {
  const auto tasks = default_tasks();
  const PartialLabelSample s = make_sample(5, {"semseg", "depth", "normal"});
  MetricAccumulator acc(tasks);
  const LabelMap& cls = s.labels.at("semseg").classes;
  Tensor logits({1, 16, 16, 5});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const int v = cls.data[static_cast<std::size_t>(y) * 16 + x];
      const int c = v == kIgnoreIndex ? 0 : v;
      logits[(static_cast<std::size_t>(y) * 16 + x) * 5 + c] = 10.0;
    }
  acc.add("semseg", logits, s.labels.at("semseg"));
  acc.add("depth", s.labels.at("depth").values.reshaped({1, 16, 16, 1}), s.labels.at("depth"));
  acc.add("normal", s.labels.at("normal").values.reshaped({1, 16, 16, 3}), s.labels.at("normal"));
  const auto r = acc.report();
  CHECK(r.per_task.at("semseg") == 1.0);
  CHECK(r.per_task.at("depth") == 0.0);
  CHECK_THAT(r.per_task.at("normal"), WithinAbs(0.0, 1e-5));
}

TEST_CASE("evaluation is deterministic", "[eval]") {
  std::vector<PartialLabelSample> samples;
  for (std::uint64_t i = 0; i < 2; ++i) samples.push_back(make_sample(i, {"semseg", "depth", "normal"}));
  DiffusionModel m(small_model(), 4);
  const EvalReport a = evaluate(m, samples, 3);
  CHECK(a == evaluate(m, samples, 3));
  CHECK(a.initial.per_task.size() == 3);
  CHECK_THROWS_WITH(evaluate(m, {}, 3), ContainsSubstring("empty"));
}

TEST_CASE("report text and delta_m", "[eval]") {
  metrics::MetricReport base{{{"semseg", 0.5}, {"depth", 0.2}, {"normal", 20.0}}, std::nullopt};
  metrics::MetricReport mtl{{{"semseg", 0.6}, {"depth", 0.25}, {"normal", 18.0}}, std::nullopt};
  attach_delta_m(mtl, base, default_tasks());
  REQUIRE(mtl.delta_m);
  CHECK_THAT(*mtl.delta_m, WithinRel((20.0 - 25.0 + 10.0) / 3.0, 1e-12));

  mtl.per_task["depth"] = 0.1 + 1e-17;
  const std::string text = format_report(mtl);
  CHECK(text.rfind("delta_m ") == text.find_last_of('\n', text.size() - 2) + 1);
  CHECK(parse_report(text) == mtl);
  CHECK_THROWS(parse_report("semseg abc\n"));
}

TEST_CASE("run config serialization", "[config]") {
  RunConfig c = small_run();
  c.denoiser.variant = DiffusionVariant::feature;
  c.train.task_weights = {{"depth", 2.0}};
  c.baseline.mode = BaselineMode::none;
  const nlohmann::json j = c;
  CHECK(j.get<RunConfig>() == c);
  CHECK(nlohmann::json(j.get<RunConfig>()) == j);
  CHECK(nlohmann::json::object().get<RunConfig>() == RunConfig{});

  for (const char* bad : {R"({"bogus": 1})", R"({"data": {"bogus": 1}})", R"({"train": {"bogus": 1}})",
                          R"({"diffusion": {"bogus": 1}})", R"({"baseline": {"mode": "sometimes"}})"}) {
    CAPTURE(bad);
    CHECK_THROWS(nlohmann::json::parse(bad).get<RunConfig>());
  }
}

TEST_CASE("dotted overrides", "[config]") {
  nlohmann::json j = RunConfig{};
  apply_override(j, "denoiser.variant", "feature");
  apply_override(j, "train.lr", "0.01");
  apply_override(j, "train.task_weights.depth", "2");
  apply_override(j, "data.train", "123");
  const RunConfig c = j.get<RunConfig>();
  CHECK(c.denoiser.variant == DiffusionVariant::feature);
  CHECK(c.train.lr == 0.01);
  CHECK(c.train.weight("depth") == 2.0);
  CHECK(c.data.train == "123");
  CHECK_THROWS_WITH(apply_override(j, "train.lrr", "1"), ContainsSubstring("train.lrr"));
  CHECK_THROWS_WITH(apply_override(j, "nope.x", "1"), ContainsSubstring("nope.x"));
  CHECK_THROWS_WITH(apply_override(j, "train.steps", "ten"), ContainsSubstring("invalid value"));
  CHECK_THROWS(resolve_config(std::nullopt, {{"train.task_weights.sky", "1"}}));
  CHECK_THROWS(resolve_config(std::nullopt, {{"train.steps", "0"}}));

  dmtl::testing::TempDir dir;
  io::write_file_atomic(dir.path() / "c.json", R"({"train": {"steps": 7}})");
  const RunConfig r = resolve_config(dir.path() / "c.json", {{"train.batch_size", "3"}});
  CHECK(r.train.steps == 7);
  CHECK(r.train.batch_size == 3);

  nlohmann::json other = RunConfig{};
  other["train"]["lr"] = 0.5;
  other["seeds"]["noise"] = 9;
  CHECK(divergent_keys(RunConfig{}, other) == std::vector<std::string>{"seeds.noise", "train.lr"});
  CHECK(divergent_keys(other, other).empty());
}

TEST_CASE("batches walk per-epoch permutations", "[train]") {
  for (std::size_t n : {5u, 8u}) {
    for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
      std::vector<std::size_t> seen;
      for (std::size_t g = epoch * n; g < (epoch + 1) * n; ++g)
        seen.push_back(batch_indices(n, 1, static_cast<int>(g), 4).front());
      std::sort(seen.begin(), seen.end());
      for (std::size_t i = 0; i < n; ++i) CHECK(seen[i] == i);
    }
  }
  CHECK(batch_indices(8, 4, 3, 4) == batch_indices(8, 4, 3, 4));
  CHECK(batch_indices(8, 8, 0, 4) != batch_indices(8, 8, 0, 5));
  CHECK_THROWS(batch_indices(0, 2, 0, 0));
}

TEST_CASE("trainer resumes bitwise from a checkpoint", "[train][checkpoint]") {
  const RunConfig cfg = small_run();
  const auto samples = one_label_set(5);
  dmtl::testing::TempDir dir;

  Trainer straight(cfg, samples);
  std::vector<nlohmann::json> records;
  while (!straight.finished()) records.push_back(to_json(straight.step()));

  Trainer first(cfg, samples);
  first.step();
  first.step();
  first.save(dir.path(), "mid");
  Trainer second(cfg, samples);
  second.load(dir.path(), "mid");
  CHECK(second.current_step() == 2);
  std::vector<nlohmann::json> tail;
  while (!second.finished()) tail.push_back(to_json(second.step()));
  CHECK(tail == std::vector<nlohmann::json>(records.begin() + 2, records.end()));
  CHECK(snapshot(second.model().registry()) == snapshot(straight.model().registry()));
  for (std::size_t k = 0; k < straight.single_task_models().size(); ++k)
    CHECK(snapshot(second.single_task_models()[k]->registry()) == snapshot(straight.single_task_models()[k]->registry()));

  RunConfig changed = cfg;
  changed.train.lr = 0.5;
  changed.seeds.data = 8;
  Trainer mismatch(changed, samples);
  CHECK_THROWS_WITH(mismatch.load(dir.path(), "mid"),
                    ContainsSubstring("seeds.data") && ContainsSubstring("train.lr"));

  RunConfig loaded;
  const auto model = load_model(dir.path(), "mid", &loaded);
  CHECK(loaded == cfg);
  CHECK(snapshot(model->registry()) == snapshot(first.model().registry()));

  std::string bytes = io::read_file(dir.path() / "mid.bin");
  bytes[bytes.size() / 2] ^= 1;
  io::write_file_atomic(dir.path() / "mid.bin", bytes);
  CHECK_THROWS_WITH(load_model(dir.path(), "mid"), ContainsSubstring("hash"));
}

TEST_CASE("full runs are reproducible and resumable", "[run]") {
  RunConfig cfg = small_run();
  cfg.train.steps = 8;
  cfg.train.eval_every = 4;
  dmtl::testing::TempDir a, b, c;

  const RunSummary sa = run_training(cfg, a.path() / "run");
  CHECK(sa.steps == 8);
  CHECK(count_lines(a.path() / "run" / "log.jsonl") == 8);
  for (const char* f : {"config.json", "checkpoints/last.bin", "checkpoints/last.json", "checkpoints/best.bin",
                        "report_train.txt", "report_eval.txt", "baseline_eval.txt", "final_eval.json"})
    CHECK(fs::exists(a.path() / "run" / f));
  CHECK(io::read_file(a.path() / "run" / "MANIFEST") == build_manifest(a.path() / "run"));
  REQUIRE(sa.eval_report);
  CHECK(sa.eval_report->denoised.delta_m.has_value());
  CHECK_THROWS_WITH(run_training(cfg, a.path() / "run"), ContainsSubstring("--resume"));

  run_training(cfg, b.path() / "run");
  for (const char* f : {"log.jsonl", "checkpoints/last.bin", "checkpoints/last.json", "report_eval.txt"})
    CHECK(io::read_file(a.path() / "run" / f) == io::read_file(b.path() / "run" / f));

  // Interrupted after step 6 with the last checkpoint at step 4.
  const fs::path rc = c.path() / "run";
  fs::create_directories(rc);
  fs::copy(a.path() / "run" / "data", rc / "data", fs::copy_options::recursive);
  Trainer partial(cfg, data::Dataset::open(rc / "data" / "train").load_all(data::LabelView::mapped));
  std::string log;
  for (int s = 0; s < 6; ++s) {
    log += to_json(partial.step()).dump() + "\n";
    if (s == 3) partial.save(rc / "checkpoints", "last");
  }
  io::write_file_atomic(rc / "log.jsonl", log);
  run_training(cfg, rc, true);
  CHECK(io::read_file(rc / "log.jsonl") == io::read_file(a.path() / "run" / "log.jsonl"));
  CHECK(io::read_file(rc / "checkpoints" / "last.bin") == io::read_file(a.path() / "run" / "checkpoints" / "last.bin"));
  CHECK_THROWS_WITH(run_training(cfg, c.path() / "fresh", true), ContainsSubstring("nothing to resume"));
}
