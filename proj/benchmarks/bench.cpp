// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks of the hot kernels and of whole training and inference steps.
#include <set>
#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "dmtl/data.hpp"
#include "dmtl/model.hpp"
#include "dmtl/ops.hpp"
#include "dmtl/rng.hpp"
#include "dmtl/training.hpp"

using namespace dmtl;

namespace {

// Forward and backward of a 3x3 convolution; arg is the channel count.
void BM_Conv2d(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  ag::Var x = ag::leaf(rng.normal({4, 16, 16, c}));
  ag::Var w = ag::leaf(rng.normal({3, 3, c, c}, 0.1));
  ag::Var b = ag::leaf(Tensor::zeros({c}));
  for (auto _ : state) {
    ag::backward(ag::sum(ag::conv2d(x, w, b, 1, 1)));
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 4 * 16 * 16);
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(64);

// Forward and backward of multi-head self-attention over 16x16 tokens.
void BM_Attention(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(2);
  ag::Var q = ag::leaf(rng.normal({4, 256, c}));
  ag::Var k = ag::leaf(rng.normal({4, 256, c}));
  ag::Var v = ag::leaf(rng.normal({4, 256, c}));
  for (auto _ : state) {
    ag::backward(ag::sum(ag::attention(q, k, v, 4)));
    benchmark::DoNotOptimize(q.grad().data());
  }
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64);

std::vector<PartialLabelSample> make_batch(int n, bool full) {
  data::SceneConfig scene;
  std::vector<PartialLabelSample> out;
  const auto tasks = default_tasks();
  for (int i = 0; i < n; ++i) {
    const data::Scene s = data::generate_scene(static_cast<std::uint64_t>(i), scene);
    PartialLabelSample p;
    p.id = std::to_string(i);
    p.image = s.image;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      if (!full && k != static_cast<std::size_t>(i) % tasks.size()) continue;
      p.labels.emplace(tasks[k].name, data::scene_label(s, tasks[k]));
      p.labeled_tasks.insert(tasks[k].name);
    }
    out.push_back(std::move(p));
  }
  return out;
}

// One optimizer step of the default model on a one-label batch of 4.
void BM_TrainingStep(benchmark::State& state) {
  ModelConfig mc;
  mc.denoiser.variant = state.range(0) ? DiffusionVariant::feature : DiffusionVariant::prediction;
  DiffusionModel model(mc, 1);
  train::TrainConfig cfg;
  train::Adam opt(model.registry(), cfg);
  const auto samples = make_batch(cfg.batch_size, false);
  std::vector<const PartialLabelSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  int step = 0;
  for (auto _ : state) {
    const auto r = train::training_step(batch, model, opt, cfg, 1, step++);
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(BM_TrainingStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// Evaluation of 4 images: initial pass and denoising of every task.
void BM_Evaluate(benchmark::State& state) {
  ModelConfig mc;
  mc.denoiser.variant = state.range(0) ? DiffusionVariant::feature : DiffusionVariant::prediction;
  DiffusionModel model(mc, 1);
  const auto samples = make_batch(4, true);
  for (auto _ : state) {
    const auto r = train::evaluate(model, samples, 3);
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(BM_Evaluate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
