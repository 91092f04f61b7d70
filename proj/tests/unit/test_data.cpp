// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dmtl/data.hpp"
#include "dmtl/io.hpp"
#include "tempdir.hpp"

using namespace dmtl;
using namespace dmtl::data;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<TaskSpec> five_tasks() {
  return {TaskSpec::make("semseg", TaskKind::segmentation, 5), TaskSpec::make("depth", TaskKind::depth, 1),
          TaskSpec::make("normal", TaskKind::normal, 3), TaskSpec::make("sal", TaskKind::saliency, 2),
          TaskSpec::make("edge", TaskKind::boundary, 2)};
}

std::string read_text(const std::filesystem::path& p) { return io::read_file(p); }

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::string replace_first(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  return s.replace(pos, from.size(), to);
}

}  // namespace

TEST_CASE("scene generation", "[data]") {
  SceneConfig cfg;

  SECTION("fixed seed is bitwise reproducible") {
    const Scene a = generate_scene(11, cfg), b = generate_scene(11, cfg);
    CHECK(a.image == b.image);
    CHECK(a.segmentation == b.segmentation);
    CHECK(a.depth == b.depth);
    CHECK(a.normal == b.normal);
    CHECK_FALSE(generate_scene(12, cfg).image == a.image);
  }

  SECTION("labels agree with an independent z-buffer") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Scene s = generate_scene(seed, cfg);
      REQUIRE(s.primitives.size() >= 1 + static_cast<std::size_t>(cfg.min_shapes));
      for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
          const double u = pixel_coord(x, cfg.width), v = pixel_coord(y, cfg.height);
          std::size_t top = 0;
          for (std::size_t k = 1; k < s.primitives.size(); ++k)
            if (s.primitives[k].covers(u, v) && s.primitives[k].depth(u, v) < s.primitives[top].depth(u, v)) top = k;
          const std::size_t px = static_cast<std::size_t>(y) * cfg.width + x;
          REQUIRE(s.owner[px] == static_cast<int>(top));
          REQUIRE(s.depth[px] == s.primitives[top].depth(u, v));
          const int cls = s.segmentation.data[px];
          if (cls != kIgnoreIndex) REQUIRE(cls == s.primitives[top].cls);
          else REQUIRE(top == 0);
          const auto n = s.primitives[top].normal();
          for (int j = 0; j < 3; ++j) REQUIRE(s.normal[px * 3 + j] == n[j]);
        }
      }
    }
  }

  SECTION("normals are unit length and depth stays in range") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Scene s = generate_scene(seed, cfg);
      for (std::size_t p = 0; p < s.owner.size(); ++p) {
        const double n2 = s.normal[p * 3] * s.normal[p * 3] + s.normal[p * 3 + 1] * s.normal[p * 3 + 1] +
                          s.normal[p * 3 + 2] * s.normal[p * 3 + 2];
        REQUIRE(std::abs(n2 - 1.0) < 1e-12);
        REQUIRE(s.depth[p] >= cfg.near - 1e-12);
        REQUIRE(s.depth[p] <= cfg.far + 1e-12);
      }
    }
  }

  SECTION("image is quantized to 8 bits and the ignore ring borders shapes") {
    const Scene s = generate_scene(3, cfg);
    for (double v : s.image.values()) REQUIRE(v == std::lround(v * 255.0) / 255.0);
    const int W = cfg.width;
    std::size_t ring = 0;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t px = static_cast<std::size_t>(y) * W + x;
        if (s.segmentation.data[px] != kIgnoreIndex) continue;
        ++ring;
        REQUIRE(s.owner[px] == 0);
        bool touches = false;
        for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < cfg.height && xx >= 0 && xx < W && s.owner[static_cast<std::size_t>(yy) * W + xx] != 0)
            touches = true;
        }
        REQUIRE(touches);
      }
    CHECK(ring > 0);
  }

  SECTION("invalid configs are rejected") {
    SceneConfig bad = cfg;
    bad.height = 30;
    CHECK_THROWS_AS(generate_scene(0, bad), Error);
    bad = cfg;
    bad.classes = 1;
    CHECK_THROWS_AS(generate_scene(0, bad), Error);
    bad = cfg;
    bad.far = bad.near;
    CHECK_THROWS_AS(generate_scene(0, bad), Error);
  }
}

TEST_CASE("derived saliency and boundary labels", "[data]") {
  const Scene s = generate_scene(5, SceneConfig{});
  const LabelMap& seg = s.segmentation;
  const int H = seg.shape[0], W = seg.shape[1];
  const LabelMap sal = saliency_from_segmentation(seg), edge = boundary_from_segmentation(seg);
  auto at = [&](const LabelMap& m, int y, int x) { return m.data[static_cast<std::size_t>(y) * W + x]; };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int c = at(seg, y, x);
      if (c == kIgnoreIndex) {
        REQUIRE(at(sal, y, x) == kIgnoreIndex);
        REQUIRE(at(edge, y, x) == kIgnoreIndex);
        continue;
      }
      REQUIRE(at(sal, y, x) == (c != 0 ? 1 : 0));
      int differs = 0;
      if (y > 0 && at(seg, y - 1, x) != c) differs = 1;
      if (y + 1 < H && at(seg, y + 1, x) != c) differs = 1;
      if (x > 0 && at(seg, y, x - 1) != c) differs = 1;
      if (x + 1 < W && at(seg, y, x + 1) != c) differs = 1;
      REQUIRE(at(edge, y, x) == differs);
    }
  CHECK(scene_label(s, TaskSpec::make("sal", TaskKind::saliency, 2)).classes == sal);
  CHECK_THROWS_AS(scene_label(s, TaskSpec::make("parts", TaskKind::parsing, 7)), Error);
}

TEST_CASE("partial label assignment", "[data]") {
  const auto tasks = five_tasks();

  SECTION("one_label divisible case") {
    const auto m = assign_partial_labels(10, tasks, LabelSetting::one_label, 3);
    CHECK(m.task_counts(tasks) == std::vector<std::size_t>{2, 2, 2, 2, 2});
    for (const auto& set : m.per_image) CHECK(set.size() == 1);
  }

  SECTION("one_label near-equal split") {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      auto counts = assign_partial_labels(4998, tasks, LabelSetting::one_label, seed).task_counts(tasks);
      std::sort(counts.begin(), counts.end());
      CHECK(counts == std::vector<std::size_t>{999, 999, 1000, 1000, 1000});
    }
  }

  SECTION("random_label size distribution") {
    const auto three = default_tasks();
    const auto m = assign_partial_labels(100000, three, LabelSetting::random_label, 9);
    double total = 0;
    std::vector<std::size_t> hist(4, 0);
    for (const auto& set : m.per_image) {
      total += static_cast<double>(set.size());
      ++hist[set.size()];
    }
    CHECK(std::abs(total / 1e5 - 2.0) <= 0.02);
    for (int k = 1; k <= 3; ++k) CHECK(std::abs(hist[k] / 1e5 - 1.0 / 3.0) < 0.01);
    // Each task belongs to a k-subset with probability k/3, averaging 2/3.
    for (std::size_t c : m.task_counts(three)) CHECK(std::abs(c / 1e5 - 2.0 / 3.0) < 0.01);
  }

  SECTION("full and determinism") {
    const auto f = assign_partial_labels(7, tasks, LabelSetting::full, 0);
    for (const auto& set : f.per_image) CHECK(set.size() == tasks.size());
    for (auto setting : {LabelSetting::one_label, LabelSetting::random_label}) {
      CHECK(assign_partial_labels(50, tasks, setting, 4).per_image ==
            assign_partial_labels(50, tasks, setting, 4).per_image);
      CHECK(assign_partial_labels(50, tasks, setting, 4).per_image !=
            assign_partial_labels(50, tasks, setting, 5).per_image);
    }
  }

  SECTION("small random_label mappings still cover every task") {
    for (std::uint64_t seed = 0; seed < 50; ++seed)
      CHECK_NOTHROW(assign_partial_labels(5, tasks, LabelSetting::random_label, seed).validate(tasks));
  }

  SECTION("errors") {
    CHECK_THROWS_WITH(assign_partial_labels(4, tasks, LabelSetting::one_label, 0), ContainsSubstring("n_images"));
    LabelMapping m{LabelSetting::random_label, {{"semseg"}, {}, {"depth", "normal"}}};
    CHECK_THROWS_WITH(m.validate(default_tasks()), ContainsSubstring("zero tasks"));
    m.per_image[1] = {"depth"};
    CHECK_NOTHROW(m.validate(default_tasks()));
    m.per_image[1] = {"bogus"};
    CHECK_THROWS_WITH(m.validate(default_tasks()), ContainsSubstring("bogus"));
    LabelMapping missing{LabelSetting::one_label, {{"semseg"}, {"depth"}}};
    CHECK_THROWS_WITH(missing.validate(default_tasks()), ContainsSubstring("normal"));
    CHECK_THROWS_AS(label_setting_from_string("half"), Error);
  }
}

TEST_CASE("file formats", "[data][io]") {
  testing::TempDir dir("dmtl-io");

  SECTION("npy round trip") {
    Tensor t({3, 4, 2});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std::sin(1.0 + static_cast<double>(i)) * 1e3;
    t[5] = -0.0;
    io::write_npy(dir.path() / "a.npy", t);
    const Tensor back = io::read_npy(dir.path() / "a.npy");
    CHECK(back.shape() == t.shape());
    CHECK(std::equal(back.values().begin(), back.values().end(), t.values().begin(),
                     [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }));
    const std::string bytes = io::read_file(dir.path() / "a.npy");
    CHECK(bytes.substr(0, 6) == "\x93NUMPY");
    CHECK((bytes.size() - 24 * 8) % 64 == 0);
  }

  SECTION("png round trip") {
    io::Image8 img{5, 7, 3, {}};
    for (int i = 0; i < 5 * 7 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 7));
    io::write_png(dir.path() / "a.png", img);
    const io::Image8 back = io::read_png(dir.path() / "a.png");
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.channels == 3);
    CHECK(back.pixels == img.pixels);
    const Tensor t = io::from_image8(back);
    CHECK(io::to_image8(t).pixels == img.pixels);
  }

  SECTION("sha256 known answer") {
    CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    io::write_file_atomic(dir.path() / "x.txt", "abc");
    CHECK(io::sha256_file(dir.path() / "x.txt") == io::sha256_hex("abc"));
  }

  SECTION("read errors") {
    CHECK_THROWS_AS(io::read_png(dir.path() / "none.png"), Error);
    write_text(dir.path() / "bad.npy", "not numpy");
    CHECK_THROWS_AS(io::read_npy(dir.path() / "bad.npy"), Error);
  }
}

TEST_CASE("dataset directory", "[data]") {
  testing::TempDir dir("dmtl-data");
  DatasetSpec spec;
  spec.n = 12;
  spec.seed = 40;
  spec.tasks = five_tasks();
  generate_dataset(dir.path(), spec);

  SECTION("layout and round trip") {
    CHECK(std::filesystem::exists(dir.path() / "images" / "00000.png"));
    CHECK(std::filesystem::exists(dir.path() / "depth" / "00011.npy"));
    CHECK(std::filesystem::exists(dir.path() / "semseg" / "00011.png"));
    const Dataset d = Dataset::open(dir.path());
    REQUIRE(d.size() == 12);
    CHECK(d.tasks() == spec.tasks);
    CHECK(d.mapping().per_image == assign_partial_labels(12, spec.tasks, spec.setting, spec.seed).per_image);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Scene s = generate_scene(spec.seed + i, spec.scene);
      const auto full = d.load(i, LabelView::all);
      CHECK(full.image == s.image);
      for (const auto& t : spec.tasks) CHECK(full.labels.at(t.name) == scene_label(s, t));
      const auto part = d.load(i);
      CHECK(part.labeled_tasks.size() == 1);
      CHECK(part.labels.size() == 1);
      CHECK(part.labeled_tasks.count(d.mapping().per_image[i][0]) == 1);
    }
  }

  SECTION("regeneration is byte identical") {
    testing::TempDir other("dmtl-data");
    generate_dataset(other.path(), spec);
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path())) {
      if (!e.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(e.path(), dir.path());
      CHECK(io::sha256_file(e.path()) == io::sha256_file(other.path() / rel));
    }
  }

  SECTION("corrupted entry names the image") {
    const auto mpath = dir.path() / "mapping.txt";
    const std::string text = read_text(mpath);
    write_text(mpath, replace_first(text, "00004\t", "00004\tnot_a_task,"));
    CHECK_THROWS_WITH(Dataset::open(dir.path()), ContainsSubstring("00004"));
  }

  SECTION("image with zero tasks is rejected") {
    const auto mpath = dir.path() / "mapping.txt";
    std::string text = read_text(mpath);
    const auto pos = text.find("00007\t");
    const auto end = text.find('\n', pos);
    text.replace(pos, end - pos, "00007\t");
    write_text(mpath, text);
    CHECK_THROWS_WITH(Dataset::open(dir.path()), ContainsSubstring("00007") && ContainsSubstring("zero tasks"));
  }

  SECTION("missing label file is named") {
    const Dataset d = Dataset::open(dir.path());
    const std::string task = d.mapping().per_image[2][0];
    const auto file = label_file(dir.path(), "00002", d.tasks()[task_index(d.tasks(), task)]);
    std::filesystem::remove(file);
    CHECK_THROWS_WITH(Dataset::open(dir.path()), ContainsSubstring(file.filename().string()));
  }

  SECTION("setting mismatch is rejected") {
    const auto mpath = dir.path() / "mapping.txt";
    write_text(mpath, replace_first(read_text(mpath), "# setting one_label", "# setting full"));
    CHECK_THROWS_AS(Dataset::open(dir.path()), Error);
  }

  SECTION("missing mapping") {
    std::filesystem::remove(dir.path() / "mapping.txt");
    CHECK_THROWS_WITH(Dataset::open(dir.path()), ContainsSubstring("mapping.txt"));
  }
}
