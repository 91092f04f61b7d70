// SPDX-License-Identifier: Apache-2.0
#include "dmtl/diffusion.hpp"

#include <cmath>


namespace dmtl {

double NoiseSchedule::alpha_bar_at(int s) const {
  if (s < 1 || s > steps) {
    throw Error("diffusion step " + std::to_string(s) + " out of range [1, " + std::to_string(steps) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(s - 1)];
}

void NoiseSchedule::validate() const {
  if (steps < 1) throw Error("noise schedule needs at least one step");
  const auto n = static_cast<std::size_t>(steps);
  if (beta.size() != n || alpha.size() != n || alpha_bar.size() != n) throw Error("noise schedule arrays disagree");
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw Error("beta must lie in (0, 1)");
    prod *= 1.0 - beta[i];
    if (alpha[i] != 1.0 - beta[i] || alpha_bar[i] != prod) throw Error("noise schedule is inconsistent");
  }
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.beta = std::move(betas);
  double prod = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  s.validate();
  return s;
}

NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw Error("build_linear_schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw Error("build_linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps), beta_start);
  for (int i = 1; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  if (steps > 1) betas.back() = beta_end;
  return NoiseSchedule::from_betas(std::move(betas));
}

Tensor diffuse_closed_form(const Tensor& x_init, double alpha_bar, const Tensor& noise) {
  if (!noise.same_shape(x_init)) {
    throw ShapeError("diffuse: noise shape " + to_string(noise.shape()) + " != " + to_string(x_init.shape()));
  }
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x_init.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x_init[i] + b * noise[i];
  return out;
}

Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, const Tensor& noise) {
  return diffuse_closed_form(x_init, schedule.alpha_bar_at(s), noise);
}

Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, Rng& rng) {
  const double ab = schedule.alpha_bar_at(s);
  return diffuse_closed_form(x_init, ab, rng.normal(x_init.shape()));
}

Tensor diffuse(const Tensor& x_init, int s, const NoiseSchedule& schedule, std::uint64_t seed) {
  Rng rng(seed);
  return diffuse(x_init, s, schedule, rng);
}

ag::Var diffuse(const ag::Var& x_init, int s, const NoiseSchedule& schedule, const Tensor& noise) {
  const double ab = schedule.alpha_bar_at(s);
  const double a = std::sqrt(ab);
  return ag::make_result(diffuse_closed_form(x_init.value(), ab, noise), {x_init}, [a](ag::Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += a * self.grad[i];
  });
}

}  // namespace dmtl
