// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "dmtl/tensor.hpp"

namespace dmtl {

/// Explicit random source handed down to every consumer of randomness.
/// Streams are derived from named integer keys so that any sub-stream can be
/// recreated without replaying the ones before it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::initializer_list<std::uint64_t> keys);

  /// Fills `t` with N(0, stddev^2) draws.
  void fill_normal(Tensor& t, double stddev = 1.0);
  Tensor normal(Shape shape, double stddev = 1.0);
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dmtl
