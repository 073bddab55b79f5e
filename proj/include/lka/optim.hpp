// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lka/nn.hpp"
#include "lka/tensor.hpp"

namespace lka {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  // Round parameters and moments to float after each update, so a float32
  // checkpoint captures the exact training state.
  bool f32_state = true;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("AdamW betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  }
};

// First and second moments per parameter, in parameter order.
struct AdamWState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

inline void adamw_update(std::span<double> theta, std::span<const double> g, std::span<double> m,
                         std::span<double> v, std::uint64_t t, double lr, const AdamWConfig& cfg) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double th = theta[i] * decay;
    double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    if (cfg.f32_state) {
      mi = snap_to_f32(mi);
      vi = snap_to_f32(vi);
    }
    th -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
    theta[i] = cfg.f32_state ? snap_to_f32(th) : th;
    m[i] = mi;
    v[i] = vi;
  }
}

// One step over `params` with explicit gradients; moments are created on
// first use and must keep matching the parameter sizes afterwards.
inline void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamWState& state,
                       double lr, const AdamWConfig& cfg) {
  if (grads.size() != params.size())
    throw ContractError("adamw_step got " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, expected " +
                        std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].numel();
    if (grads[i].size() != n || state.m[i].size() != n || state.v[i].size() != n)
      throw ContractError("adamw_step size mismatch for parameter " + std::to_string(i) + " " +
                          shape_str(params[i].shape()));
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i)
    adamw_update(params[i].data(), grads[i], state.m[i], state.v[i], state.step, lr, cfg);
}

// Same, reading gradients from the tensors; a missing buffer counts as zero.
inline void adamw_step(std::span<Tensor> params, AdamWState& state, double lr, const AdamWConfig& cfg) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad())
      grads.emplace_back(p.grad().begin(), p.grad().end());
    else
      grads.emplace_back(p.numel(), 0.0);
  }
  adamw_step(params, grads, state, lr, cfg);
}

inline double cosine_lr(std::uint64_t step, std::uint64_t total, std::uint64_t warmup, double lr_max,
                        double lr_min) {
  if (step > total) throw ContractError("cosine_lr step " + std::to_string(step) + " beyond total " +
                                        std::to_string(total));
  if (warmup > 0 && step < warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return lr_max;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr_min + (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

}  // namespace lka
