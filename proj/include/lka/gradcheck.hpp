// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "lka/tensor.hpp"

namespace lka {

// Compares the tape gradient of scalar-valued `f` at `x` against central
// differences with per-element step h·max(1, |x_i|). Returns the maximum of
// |analytic - numeric| / max(1, |analytic|); any non-finite value yields +inf.
// `x` is restored to its original values on return.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  const bool was_tracked = x.requires_grad();
  Tape::current().clear();
  x.drop_grad();
  x.set_requires_grad(true);
  Tensor y = f(x);
  if (y.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  x.drop_grad();
  x.set_requires_grad(was_tracked);

  constexpr double inf = std::numeric_limits<double>::infinity();
  NoGradGuard no_grad;
  double worst = 0.0;
  auto data = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    const double step = h * std::max(1.0, std::abs(orig));
    data[i] = orig + step;
    const double fp = f(x).item();
    data[i] = orig - step;
    const double fm = f(x).item();
    data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) return inf;
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace lka
