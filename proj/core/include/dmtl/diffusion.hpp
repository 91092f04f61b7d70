// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "dmtl/autograd.hpp"
#include "dmtl/rng.hpp"

namespace dmtl {

/// Variance schedule of the forward chain; index s-1 holds step s.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// alpha_bar at step s in [1, steps].
  double alpha_bar_at(int s) const;
  /// Checks 0 < beta < 1, alpha = 1 - beta and the running product.
  void validate() const;

  /// Builds alpha and alpha_bar from explicit betas.
  static NoiseSchedule from_betas(std::vector<double> betas);
};

/// betas linearly spaced over [beta_start, beta_end] inclusive.
NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end);

/// sqrt(alpha_bar) * x + sqrt(1 - alpha_bar) * noise.
Tensor diffuse_closed_form(const Tensor& x_init, double alpha_bar, const Tensor& noise);

Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, const Tensor& noise);
/// Draws the noise from `rng`.
Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, Rng& rng);
Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, std::uint64_t seed);

/// Differentiable in x_init; the noise is a constant.
ag::Var diffuse(const ag::Var& x_init, int s, const NoiseSchedule& schedule, const Tensor& noise);

}  // namespace dmtl
