// SPDX-License-Identifier: Apache-2.0
#include "dmtl/rng.hpp"

#include <vector>

namespace dmtl {

namespace {
std::mt19937_64 seeded(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}
}  // namespace

Rng::Rng(std::initializer_list<std::uint64_t> keys) : engine_(seeded(keys)) {}

void Rng::fill_normal(Tensor& t, double stddev) {
  // Fresh distribution per call: no cached deviate survives between calls.
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.storage()) v = dist(engine_);
}

Tensor Rng::normal(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  fill_normal(t, stddev);
  return t;
}

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

int Rng::uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

}  // namespace dmtl
