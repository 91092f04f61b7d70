// SPDX-License-Identifier: Apache-2.0
// Central finite-difference oracle shared by the test suites. It only touches
// leaf values and re-runs the forward closure, so it is independent of every
// backward kernel it is used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "dmtl/autograd.hpp"
#include "dmtl/rng.hpp"

namespace dmtl::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline double central_difference(ag::Var& leaf, std::size_t i, const std::function<ag::Var()>& f, double h) {
  ag::NoGradGuard guard;
  double& v = leaf.mutable_value()[i];
  const double orig = v;
  v = orig + h;
  const double fp = f().value().item();
  v = orig - h;
  const double fm = f().value().item();
  v = orig;
  return (fp - fm) / (2.0 * h);
}

/// Fourth-order five-point stencil. Its truncation error is small enough to use
/// a larger step, which keeps rounding noise below tiny gradients of an O(1) loss.
inline double five_point_difference(ag::Var& leaf, std::size_t i, const std::function<ag::Var()>& f, double h) {
  ag::NoGradGuard guard;
  double& v = leaf.mutable_value()[i];
  const double orig = v;
  auto at = [&](double d) {
    v = orig + d;
    return f().value().item();
  };
  const double num = -at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h);
  v = orig;
  return num / (12.0 * h);
}

enum class Stencil { central, five_point };

/// Compares autodiff gradients of f with central differences for every entry
/// of the given leaves (or `samples` random entries per leaf when nonzero).
inline GradCheckResult grad_check(std::vector<ag::Var> leaves, const std::function<ag::Var()>& f,
                                  double h = 1e-6, std::size_t samples = 0, std::uint64_t seed = 1) {
  for (auto& l : leaves) l.zero_grad();
  ag::backward(f());
  Rng rng(seed);
  GradCheckResult r;
  for (auto& l : leaves) {
    const Tensor g = l.grad();
    std::vector<std::size_t> idx;
    if (samples == 0 || samples >= g.numel()) {
      for (std::size_t i = 0; i < g.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < samples; ++k) idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(g.numel()) - 1)));
    }
    for (std::size_t i : idx) {
      const double num = central_difference(l, i, f, h);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(g[i], num));
      r.max_abs_error = std::max(r.max_abs_error, std::abs(g[i] - num));
      ++r.checked;
    }
  }
  return r;
}

/// Checks `samples` scalar entries drawn uniformly over all entries of `leaves`.
inline GradCheckResult grad_check_pooled(std::vector<ag::Var> leaves, const std::function<ag::Var()>& f,
                                         std::size_t samples, std::uint64_t seed = 1, double h = 1e-6,
                                         Stencil stencil = Stencil::central) {
  for (auto& l : leaves) l.zero_grad();
  ag::backward(f());
  std::vector<std::size_t> offsets{0};
  for (const auto& l : leaves) offsets.push_back(offsets.back() + l.value().numel());
  std::vector<Tensor> grads;
  for (const auto& l : leaves) grads.push_back(l.grad());
  Rng rng(seed);
  GradCheckResult r;
  for (std::size_t k = 0; k < samples; ++k) {
    const auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(offsets.back()) - 1));
    const std::size_t li = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const std::size_t i = flat - offsets[li];
    const double num = stencil == Stencil::five_point ? five_point_difference(leaves[li], i, f, h)
                                                      : central_difference(leaves[li], i, f, h);
    r.max_rel_error = std::max(r.max_rel_error, relative_error(grads[li][i], num));
    r.max_abs_error = std::max(r.max_abs_error, std::abs(grads[li][i] - num));
    ++r.checked;
  }
  return r;
}

}  // namespace dmtl::testing
