// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <nlohmann/json.hpp>
#include <set>

#include "dmtl/checkpoint.hpp"
#include "dmtl/visualize.hpp"
#include "tempdir.hpp"

using namespace dmtl;

TEST_CASE("class palette", "[vis]") {
  CHECK(vis::class_color(0) == std::array<std::uint8_t, 3>{0, 0, 0});
  CHECK(vis::class_color(1) == std::array<std::uint8_t, 3>{128, 0, 0});
  CHECK(vis::class_color(2) == std::array<std::uint8_t, 3>{0, 128, 0});
  CHECK(vis::class_color(3) == std::array<std::uint8_t, 3>{128, 128, 0});
  CHECK(vis::class_color(4) == std::array<std::uint8_t, 3>{0, 0, 128});
  CHECK(vis::class_color(8) == std::array<std::uint8_t, 3>{64, 0, 0});
  CHECK(vis::class_color(kIgnoreIndex) == std::array<std::uint8_t, 3>{255, 255, 255});
  std::set<std::array<std::uint8_t, 3>> seen;
  for (int k = 0; k < 256; ++k) seen.insert(vis::class_color(k));
  CHECK(seen.size() == 256);
}

TEST_CASE("map rendering", "[vis]") {
  const auto tasks = default_tasks();
  SECTION("segmentation takes the argmax") {
    Tensor logits({1, 1, 2, 5});
    logits[3] = 1.0;
    logits[5 + 1] = 2.0;
    const auto img = vis::render_map(logits, tasks[0], 1, 2);
    CHECK(img.channels == 3);
    CHECK(img.pixels == std::vector<std::uint8_t>{128, 128, 0, 128, 0, 0});
  }
  SECTION("depth is gray from near to far") {
    Tensor d({1, 1, 3, 1}, {1.0, 2.5, 4.0});
    const auto img = vis::render_map(d, tasks[1], 1, 3, {1.0, 4.0});
    CHECK(img.channels == 1);
    CHECK(img.pixels == std::vector<std::uint8_t>{255, 128, 0});
  }
  SECTION("normals map to RGB") {
    Tensor n({1, 1, 1, 3}, {0.0, 0.0, 2.0});
    const auto img = vis::render_map(n, tasks[2], 2, 2);
    CHECK(img.pixels.size() == 12);
    CHECK(std::vector<std::uint8_t>(img.pixels.begin(), img.pixels.begin() + 3) == std::vector<std::uint8_t>{128, 128, 255});
  }
  CHECK_THROWS_AS(vis::render_map(Tensor({1, 2, 2, 2}), tasks[2], 2, 2), ShapeError);
}

TEST_CASE("denoising trace holds S + 2 maps per task", "[vis]") {
  for (auto v : {DiffusionVariant::prediction, DiffusionVariant::feature}) {
    ModelConfig cfg;
    cfg.backbone.channels = 8;
    cfg.backbone.decoder_blocks = 1;
    cfg.denoiser.num_blocks = 1;
    cfg.denoiser.head_layers = 1;
    cfg.denoiser.variant = v;
    cfg.diffusion_steps = 3;
    DiffusionModel m(cfg, 1);
    const Tensor image = Rng(2).normal({16, 16, 3});
    const auto trace = vis::trace_denoising(m, image, 5);
    CHECK(trace.steps == 3);
    REQUIRE(trace.tasks.size() == 3);
    for (const auto& t : trace.tasks) {
      CHECK(t.maps.size() == 5);
      CHECK(t.states.size() == 5);
      for (const auto& map : t.maps) CHECK(map.dim(3) == m.tasks()[task_index(m.tasks(), t.name)].out_channels);
    }
    CHECK(vis::trace_denoising(m, image, 5).tasks[1].maps == trace.tasks[1].maps);

    dmtl::testing::TempDir dir;
    const auto files = vis::write_trace(trace, m.tasks(), 16, 16, dir.path());
    CHECK(files.size() == 3 * 5 + 2);
    for (const auto& f : files) CHECK(std::filesystem::exists(dir.path() / f));
    CHECK(std::filesystem::exists(dir.path() / "semseg_step0.png"));
    CHECK(std::filesystem::exists(dir.path() / "semseg_step2.png"));
    const auto index = nlohmann::json::parse(io::read_file(dir.path() / "trajectory.json"));
    CHECK(index["steps"] == 3);
    const auto states = ckpt::decode_tensors(io::read_file(dir.path() / "trajectory.bin"));
    CHECK(states.size() == 15);
    CHECK(states.front().name == "semseg.initial");
    CHECK(states.front().value == trace.tasks[0].states[0]);
  }
}
