// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "dmtl/metrics.hpp"

using namespace dmtl;
using namespace dmtl::metrics;

namespace {

std::vector<std::uint8_t> full_mask(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

// Brute-force mIoU: explicit per-class set counting.
double miou_oracle(const std::vector<int>& pred, const std::vector<int>& gt, int k, int ignore) {
  double total = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    int inter = 0, uni = 0, in_gt = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      const bool a = pred[i] == c, b = gt[i] == c;
      inter += a && b;
      uni += a || b;
      in_gt += b;
    }
    if (in_gt == 0) continue;
    total += static_cast<double>(inter) / uni;
    ++present;
  }
  return total / present;
}

// Exhaustive sweep of F1 over the given thresholds.
double max_f_oracle(const std::vector<double>& prob, const std::vector<std::uint8_t>& gt,
                    const std::vector<double>& thresholds) {
  double best = 0;
  for (double t : thresholds) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const bool p = prob[i] >= t;
      tp += p && gt[i];
      fp += p && !gt[i];
      fn += !p && gt[i];
    }
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0;
    if (prec + rec > 0) best = std::max(best, 2 * prec * rec / (prec + rec));
  }
  return best;
}

// Boundary F by direct pairwise distance search, summed over images.
double ods_oracle(const std::vector<Tensor>& probs, const std::vector<BinaryMap>& gts, int tol) {
  double best = 0;
  for (int i = 0; i <= 50; ++i) {
    const double t = i / 50.0;
    double matched_pred = 0, total_pred = 0, matched_gt = 0, total_gt = 0;
    for (std::size_t n = 0; n < probs.size(); ++n) {
      const int h = gts[n].height, w = gts[n].width;
      auto near = [&](int y, int x, auto pred) {
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx)
            if (std::max(std::abs(yy - y), std::abs(xx - x)) <= tol && pred(yy * w + xx)) return true;
        return false;
      };
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int p = y * w + x;
          if (probs[n][static_cast<std::size_t>(p)] >= t) {
            ++total_pred;
            matched_pred += near(y, x, [&](int q) { return gts[n].data[static_cast<std::size_t>(q)] != 0; });
          }
          if (gts[n].data[static_cast<std::size_t>(p)]) {
            ++total_gt;
            matched_gt += near(y, x, [&](int q) { return probs[n][static_cast<std::size_t>(q)] >= t; });
          }
        }
    }
    const double prec = total_pred > 0 ? matched_pred / total_pred : 0;
    const double rec = total_gt > 0 ? matched_gt / total_gt : 0;
    if (prec + rec > 0) best = std::max(best, 2 * prec * rec / (prec + rec));
  }
  return best;
}

BinaryMap draw_line(int h, int w, int dx, bool diagonal) {
  BinaryMap m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
  for (int y = 1; y < h - 1; ++y) {
    const int x = (diagonal ? y : w / 2 - 2) + dx;
    if (x >= 0 && x < w) m.data[static_cast<std::size_t>(y * w + x)] = 1;
  }
  return m;
}

Tensor as_prob(const BinaryMap& m, double on = 1.0, double off = 0.0) {
  Tensor t({m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) t[i] = m.data[i] ? on : off;
  return t;
}

}  // namespace

TEST_CASE("mIoU examples", "[metrics]") {
  SECTION("identity") {
    LabelMap m{{3, 3}, {0, 1, 2, 2, 1, 0, 0, 0, 1}};
    CHECK(compute_miou(m, m, 3) == 1.0);
  }
  SECTION("hand-built confusion matrix") {
    LabelMap gt{{2, 2}, {0, 0, 1, 1}};
    LabelMap pred{{2, 2}, {0, 1, 1, 1}};
    CHECK(compute_miou(pred, gt, 2) == Catch::Approx(7.0 / 12.0).epsilon(1e-15));
  }
  SECTION("ignored pixels excluded everywhere") {
    LabelMap gt{{2, 2}, {0, 255, 255, 255}};
    LabelMap pred{{2, 2}, {0, 1, 1, 1}};
    CHECK(compute_miou(pred, gt, 2) == 1.0);
  }
  SECTION("errors") {
    LabelMap gt{{2, 2}, {255, 255, 255, 255}};
    LabelMap pred{{2, 2}, {0, 1, 1, 1}};
    CHECK_THROWS_WITH(compute_miou(pred, gt, 2), Catch::Matchers::ContainsSubstring("no valid pixels"));
    CHECK_THROWS_AS(compute_miou(LabelMap{{1, 4}, {0, 0, 0, 0}}, pred, 2), ShapeError);
  }
}

TEST_CASE("mIoU equals a brute-force oracle on random 8x8 maps", "[metrics][property]") {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(gen() % 5);
    std::vector<int> pred(64), gt(64);
    for (int i = 0; i < 64; ++i) {
      pred[static_cast<std::size_t>(i)] = static_cast<int>(gen() % static_cast<unsigned>(k));
      gt[static_cast<std::size_t>(i)] = gen() % 10 == 0 ? 255 : static_cast<int>(gen() % static_cast<unsigned>(k));
    }
    if (std::all_of(gt.begin(), gt.end(), [](int g) { return g == 255; })) gt[0] = 0;
    const double got = compute_miou(LabelMap{{8, 8}, pred}, LabelMap{{8, 8}, gt}, k);
    REQUIRE(got == miou_oracle(pred, gt, k, 255));
  }
}

TEST_CASE("mIoU reduces by summing counts across images", "[metrics]") {
  ConfusionMatrix cm(2);
  std::vector<int> p1{0, 0}, g1{0, 1}, p2{1, 1, 1, 1}, g2{1, 1, 1, 1};
  cm.add(p1, g1);
  cm.add(p2, g2);
  std::vector<int> p{0, 0, 1, 1, 1, 1}, g{0, 1, 1, 1, 1, 1};
  CHECK(cm.miou() == miou_oracle(p, g, 2, 255));
}

TEST_CASE("absolute error examples", "[metrics]") {
  Tensor gt({1, 2, 2, 1}, std::vector<double>{0.1, 0.7, 2.0, -1.0});
  CHECK(compute_abs_err(gt, gt, full_mask(4)) == 0.0);
  Tensor shifted = gt;
  for (double& v : shifted.values()) v += 0.5;
  CHECK(compute_abs_err(shifted, gt, full_mask(4)) == Catch::Approx(0.5));
  CHECK(compute_abs_err(Tensor({2}, std::vector<double>{1, 3}), Tensor({2}, 0.0), full_mask(2)) == 2.0);
  std::vector<std::uint8_t> none(4, 0);
  CHECK_THROWS_AS(compute_abs_err(gt, gt, none), Error);
}

TEST_CASE("mean angle error examples", "[metrics]") {
  Tensor z({1, 1, 2, 3}, std::vector<double>{0, 0, 1, 0, 0, 2});
  CHECK(compute_mean_angle_err(z, z, full_mask(2)) == 0.0);
  Tensor x({1, 1, 2, 3}, std::vector<double>{1, 0, 0, 0, 3, 0});
  CHECK(compute_mean_angle_err(x, z, full_mask(2)) == Catch::Approx(90.0));
  // 0 degrees at the first pixel, 60 degrees at the second.
  Tensor p({2, 3}, std::vector<double>{0, 0, 1, std::sqrt(3.0) / 2, 0, 0.5});
  Tensor g({2, 3}, std::vector<double>{0, 0, 5, 0, 0, 1});
  CHECK(compute_mean_angle_err(p, g, full_mask(2)) == Catch::Approx(30.0));
  Tensor zero({1, 3}, 0.0);
  CHECK_THROWS_AS(compute_mean_angle_err(zero, zero, full_mask(1)), Error);
  CHECK(compute_mean_angle_err(Tensor({1, 3}, std::vector<double>{0, 0, -1}), Tensor({1, 3}, std::vector<double>{0, 0, 1}),
                               full_mask(1)) == Catch::Approx(180.0));
}

TEST_CASE("maxF examples", "[metrics]") {
  std::vector<std::uint8_t> gt{1, 1, 0, 0};
  SECTION("identity") {
    std::vector<double> prob{1, 1, 0, 0};
    CHECK(compute_max_f(prob, gt).value == 1.0);
  }
  SECTION("inverted prediction scores zero above every positive threshold") {
    std::vector<double> prob{0, 0, 1, 1};
    ThresholdCounts counts;
    counts.add(prob, gt);
    for (std::size_t i = 1; i < f_measure_thresholds().size(); ++i) CHECK(counts.f_at(i) == 0.0);
  }
  SECTION("exhaustive sweep") {
    std::vector<double> prob{0.9, 0.4, 0.6, 0.1};
    auto r = compute_max_f(prob, gt);
    CHECK(r.value == Catch::Approx(0.8));
    CHECK(r.threshold > 0.1);
    CHECK(r.threshold <= 0.4);
  }
  SECTION("all-negative ground truth is flagged, not an error") {
    std::vector<double> prob{0.2, 0.3, 0.4, 0.5};
    std::vector<std::uint8_t> empty(4, 0);
    auto r = compute_max_f(prob, empty);
    CHECK(r.degenerate);
    CHECK(r.value == 0.0);
  }
}

TEST_CASE("maxF matches an exhaustive sweep on random maps", "[metrics][property]") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> prob(64);
    std::vector<std::uint8_t> gt(64);
    for (std::size_t i = 0; i < 64; ++i) {
      gt[i] = u(gen) < 0.4;
      prob[i] = std::clamp(0.5 * gt[i] + 0.7 * u(gen), 0.0, 1.0);
    }
    if (std::none_of(gt.begin(), gt.end(), [](auto g) { return g != 0; })) gt[0] = 1;
    REQUIRE(compute_max_f(prob, gt).value == Catch::Approx(max_f_oracle(prob, gt, f_measure_thresholds())));
    std::set<double> uniq(prob.begin(), prob.end());
    REQUIRE(compute_max_f(prob, gt, ThresholdGrid::unique_values).value ==
            Catch::Approx(max_f_oracle(prob, gt, {uniq.begin(), uniq.end()})));
  }
}

TEST_CASE("maxF is invariant to strictly monotone remapping", "[metrics][property]") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> prob(50), remapped(50);
    std::vector<std::uint8_t> gt(50);
    const double gamma = 0.2 + 3.0 * u(gen);
    for (std::size_t i = 0; i < prob.size(); ++i) {
      gt[i] = u(gen) < 0.5;
      prob[i] = u(gen);
      remapped[i] = std::pow(prob[i], gamma);
    }
    gt[0] = 1;
    const auto a = compute_max_f(prob, gt, ThresholdGrid::unique_values);
    const auto b = compute_max_f(remapped, gt, ThresholdGrid::unique_values);
    REQUIRE(a.value == Catch::Approx(b.value).epsilon(1e-12));
  }
}

TEST_CASE("odsF dilation matching", "[metrics]") {
  const int h = 12, w = 12;
  SECTION("identical, tolerance 0") {
    auto gt = draw_line(h, w, 0, false);
    CHECK(compute_ods_f({as_prob(gt)}, {gt}, 0) == 1.0);
  }
  SECTION("shifted by one pixel, tolerance 1") {
    for (bool diag : {false, true}) {
      auto gt = draw_line(h, w, 0, diag);
      auto pred = draw_line(h, w, 1, diag);
      CHECK(compute_ods_f({as_prob(pred)}, {gt}, 1) == 1.0);
    }
  }
  SECTION("shifted by two pixels, tolerance 1") {
    for (bool diag : {false, true}) {
      auto gt = draw_line(h, w, 0, diag);
      auto pred = draw_line(h, w, 2, diag);
      const double got = compute_ods_f({as_prob(pred, 0.8, 0.1)}, {gt}, 1);
      CHECK(got < 1.0);
      CHECK(got == Catch::Approx(ods_oracle({as_prob(pred, 0.8, 0.1)}, {gt}, 1)).epsilon(1e-14));
    }
  }
  SECTION("errors") {
    CHECK_THROWS_AS(compute_ods_f({}, {}, 1), Error);
    CHECK_THROWS_AS(BoundaryCounts(-1), Error);
  }
}

TEST_CASE("odsF equals the pairwise-distance oracle on random soft maps", "[metrics][property]") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> probs;
    std::vector<BinaryMap> gts;
    for (int img = 0; img < 3; ++img) {
      auto gt = draw_line(10, 10, static_cast<int>(gen() % 3), gen() % 2 == 0);
      Tensor p({10, 10});
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] = u(gen) < 0.15 ? u(gen) : 0.0;
      probs.push_back(p);
      gts.push_back(gt);
    }
    const int tol = static_cast<int>(trial % 3);
    REQUIRE(compute_ods_f(probs, gts, tol) == Catch::Approx(ods_oracle(probs, gts, tol)).epsilon(1e-14));
  }
}

TEST_CASE("delta_m examples", "[metrics]") {
  const std::map<std::string, bool> dir{{"semseg", false}, {"depth", true}};
  const std::map<std::string, double> stl{{"semseg", 75.82}, {"depth", 0.0125}};
  CHECK(compute_delta_m(stl, stl, dir) == 0.0);
  const double baseline = compute_delta_m({{"semseg", 73.19}, {"depth", 0.0168}}, stl, dir);
  CHECK(baseline == Catch::Approx(-18.93).margin(0.005));
  CHECK(std::abs(baseline - -18.81) <= 0.2);
  const double xtc = compute_delta_m({{"semseg", 73.36}, {"depth", 0.0158}}, stl, dir);
  CHECK(xtc == Catch::Approx(-14.82).margin(0.005));
  CHECK(std::abs(xtc - -14.74) <= 0.2);

  CHECK_THROWS_AS(compute_delta_m({{"semseg", 1.0}}, stl, dir), Error);
  CHECK_THROWS_AS(compute_delta_m({{"semseg", 1.0}, {"normal", 1.0}}, stl, dir), Error);
  CHECK_THROWS_AS(compute_delta_m(stl, {{"semseg", 0.0}, {"depth", 0.1}}, dir), Error);
}

TEST_CASE("delta_m is zero only at equality and linear per task", "[metrics][property]") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::map<std::string, bool> dir{{"a", false}, {"b", true}, {"c", trial % 2 == 0}};
    std::map<std::string, double> s{{"a", u(gen)}, {"b", u(gen)}, {"c", u(gen)}};
    std::map<std::string, double> m = s;
    REQUIRE(compute_delta_m(m, s, dir) == 0.0);
    const double d = u(gen) - 1.0;
    m["b"] += d;
    const double slope = -100.0 / (3.0 * s["b"]);
    REQUIRE(compute_delta_m(m, s, dir) == Catch::Approx(slope * d).margin(1e-12));
    REQUIRE((d != 0.0) == (compute_delta_m(m, s, dir) != 0.0));
  }
}

TEST_CASE("metrics are invariant to a paired pixel shuffle", "[metrics][property]") {
  std::mt19937_64 gen(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 48;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);

  std::vector<int> lp(n), lg(n), lp2(n), lg2(n);
  Tensor dp({static_cast<int>(n)}), dg({static_cast<int>(n)}), dp2 = dp, dg2 = dp;
  Tensor np({static_cast<int>(n), 3}), ng = np, np2 = np, ng2 = np;
  std::vector<double> prob(n), prob2(n);
  std::vector<std::uint8_t> bin(n), bin2(n), mask(n), mask2(n);
  for (std::size_t i = 0; i < n; ++i) {
    lp[i] = static_cast<int>(gen() % 4);
    lg[i] = static_cast<int>(gen() % 4);
    dp[i] = u(gen);
    dg[i] = u(gen);
    for (int c = 0; c < 3; ++c) {
      np[3 * i + c] = u(gen) - 0.5;
      ng[3 * i + c] = u(gen) - 0.5;
    }
    prob[i] = u(gen);
    bin[i] = u(gen) < 0.5;
    mask[i] = u(gen) < 0.8;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = perm[i];
    lp2[i] = lp[j];
    lg2[i] = lg[j];
    dp2[i] = dp[j];
    dg2[i] = dg[j];
    for (int c = 0; c < 3; ++c) {
      np2[3 * i + c] = np[3 * j + c];
      ng2[3 * i + c] = ng[3 * j + c];
    }
    prob2[i] = prob[j];
    bin2[i] = bin[j];
    mask2[i] = mask[j];
  }
  const Shape s{6, 8};
  CHECK(compute_miou({s, lp}, {s, lg}, 4) == compute_miou({s, lp2}, {s, lg2}, 4));
  CHECK(compute_abs_err(dp, dg, mask) == Catch::Approx(compute_abs_err(dp2, dg2, mask2)).epsilon(1e-14));
  CHECK(compute_mean_angle_err(np, ng, mask) == Catch::Approx(compute_mean_angle_err(np2, ng2, mask2)).epsilon(1e-14));
  CHECK(compute_max_f(prob, bin).value == compute_max_f(prob2, bin2).value);
}

TEST_CASE("metric ranges hold on random inputs", "[metrics][property]") {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a({8, 3}), b({8, 3});
    for (std::size_t i = 0; i < a.numel(); ++i) {
      a[i] = u(gen);
      b[i] = u(gen);
    }
    const double e = compute_mean_angle_err(a, b, full_mask(8));
    REQUIRE(e >= 0.0);
    REQUIRE(e <= 180.0);
    REQUIRE(compute_abs_err(a, b, full_mask(8)) >= 0.0);
  }
}
