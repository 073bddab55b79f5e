// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Large-kernel adapter: down-projection, channel-wise convolution over the
// token grid, GeLU, up-projection, plus the input residual. A config without
// a kernel is the plain bottleneck adapter.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lka/nn.hpp"

namespace lka {

enum class Recipe {
  cw_single,   // one k×k channel-wise conv
  dilated,     // one 3×3 channel-wise conv, dilation 3
  cw_stacked,  // three sequential 3×3 channel-wise convs
};

inline std::string_view to_string(Recipe r) {
  switch (r) {
    case Recipe::cw_single: return "cw_single";
    case Recipe::dilated: return "dilated";
    case Recipe::cw_stacked: return "cw_stacked";
  }
  return "?";
}

inline Recipe parse_recipe(std::string_view s) {
  if (s == "cw_single") return Recipe::cw_single;
  if (s == "dilated") return Recipe::dilated;
  if (s == "cw_stacked") return Recipe::cw_stacked;
  throw ConfigError("unknown recipe '" + std::string(s) + "' (expected cw_single, dilated or cw_stacked)");
}

struct LkaConfig {
  std::size_t d = 0;
  std::size_t d_hat = 0;
  std::optional<std::size_t> kernel;  // nullopt: vanilla adapter
  Recipe recipe = Recipe::cw_single;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t cls_tokens = 0;

  bool vanilla() const { return !kernel.has_value(); }

  // Kernel side and dilation of each conv layer in the stack. The dilated
  // and stacked recipes are fixed 3×3 designs; `kernel` only selects the
  // single-conv size.
  struct ConvLayer {
    std::size_t kernel;
    std::size_t dilation;
  };
  std::vector<ConvLayer> conv_layers() const {
    if (vanilla()) return {};
    switch (recipe) {
      case Recipe::cw_single: return {{*kernel, 1}};
      case Recipe::dilated: return {{3, 3}};
      case Recipe::cw_stacked: return {{3, 1}, {3, 1}, {3, 1}};
    }
    return {};
  }

  std::size_t spatial_tokens() const { return grid_h * grid_w; }
  std::size_t sequence_length() const { return spatial_tokens() + cls_tokens; }

  // Shape-level checks: enough to allocate and count parameters.
  void validate_shapes() const {
    if (d == 0 || d_hat == 0) throw ConfigError("adapter widths must be positive");
    if (kernel && (*kernel == 0 || *kernel % 2 == 0))
      throw ConfigError("adapter kernel size must be odd, got " + std::to_string(*kernel));
  }

  // Full contract, required before the adapter runs inside a model.
  void validate() const {
    validate_shapes();
    if (d_hat >= d)
      throw ConfigError("bottleneck width " + std::to_string(d_hat) + " must be smaller than embed dim " +
                        std::to_string(d));
    if (grid_h == 0 || grid_w == 0) throw ConfigError("adapter token grid must be non-empty");
    if (cls_tokens > 1) throw ConfigError("at most one class token is supported");
  }
};

struct AdapterParams {
  LinearParams down;               // d -> d_hat
  std::vector<DwConvParams> conv;  // on d_hat channels; empty for vanilla
  LinearParams up;                 // d_hat -> d

  static AdapterParams zeros(const LkaConfig& cfg) {
    cfg.validate_shapes();
    AdapterParams p{LinearParams::zeros(cfg.d, cfg.d_hat), {}, LinearParams::zeros(cfg.d_hat, cfg.d)};
    for (auto [k, dil] : cfg.conv_layers()) p.conv.push_back(DwConvParams::zeros(cfg.d_hat, k, dil));
    return p;
  }

  // Every parameter tensor with its local dotted name.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out{{"down.weight", down.weight}, {"down.bias", down.bias}};
    for (std::size_t i = 0; i < conv.size(); ++i) {
      out.emplace_back("conv." + std::to_string(i) + ".weight", conv[i].weight);
      out.emplace_back("conv." + std::to_string(i) + ".bias", conv[i].bias);
    }
    out.emplace_back("up.weight", up.weight);
    out.emplace_back("up.bias", up.bias);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }
};

// Closed-form parameter count:
//   LKA:     2·d·d̂ + (k²+2)·d̂ + d
//   vanilla: 2·d·d̂ + d̂ + d
// The stacked recipe carries three 3×3 kernels and three conv biases.
inline std::uint64_t adapter_param_count(const LkaConfig& cfg) {
  cfg.validate_shapes();
  const std::uint64_t d = cfg.d, dh = cfg.d_hat;
  const std::uint64_t base = 2 * d * dh + d;
  if (cfg.vanilla()) return base + dh;
  switch (cfg.recipe) {
    case Recipe::cw_single: {
      const std::uint64_t k = *cfg.kernel;
      return base + (k * k + 2) * dh;
    }
    case Recipe::dilated: return base + (9 + 2) * dh;
    case Recipe::cw_stacked: return base + (3 * 9 + 3 + 1) * dh;
  }
  return 0;
}

// Applies the configured conv stack to spatial tokens [B, H·W, d̂].
inline Tensor lka_conv(const Tensor& h, const std::vector<DwConvParams>& conv, const LkaConfig& cfg) {
  if (h.rank() != 3) throw DimensionError("lka_conv: expected [B,T,d_hat], got " + shape_str(h.shape()));
  if (h.dim(1) != cfg.spatial_tokens())
    throw GridError("lka_conv: " + std::to_string(h.dim(1)) + " tokens do not fill a " +
                    std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " grid");
  if (cfg.vanilla() || conv.empty()) return h;
  const auto B = h.dim(0), C = h.dim(2);
  Tensor x = permute(reshape(h, {B, cfg.grid_h, cfg.grid_w, C}), {0, 3, 1, 2});
  for (const auto& layer : conv) x = dwconv2d(x, layer);
  return reshape(permute(x, {0, 2, 3, 1}), {B, cfg.spatial_tokens(), C});
}

// W_up·GeLU(LKA-Conv(W_down·x)) (+ x when `residual`). Class tokens skip the
// convolution in bottleneck space.
inline Tensor adapter_forward(const Tensor& x, const AdapterParams& p, const LkaConfig& cfg, bool residual = true) {
  if (x.rank() != 3 || x.dim(2) != cfg.d)
    throw DimensionError("adapter: expected [B,T," + std::to_string(cfg.d) + "], got " + shape_str(x.shape()));
  if (x.dim(1) != cfg.sequence_length())
    throw GridError("adapter: sequence of " + std::to_string(x.dim(1)) + " tokens does not match grid " +
                    std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " + " +
                    std::to_string(cfg.cls_tokens) + " class token(s)");
  Tensor h = linear(x, p.down);
  if (!cfg.vanilla()) {
    if (cfg.cls_tokens == 0) {
      h = lka_conv(h, p.conv, cfg);
    } else {
      const auto T = x.dim(1);
      Tensor cls = narrow(h, 1, 0, cfg.cls_tokens);
      Tensor spatial = lka_conv(narrow(h, 1, cfg.cls_tokens, T - cfg.cls_tokens), p.conv, cfg);
      h = concat({cls, spatial}, 1);
    }
  }
  Tensor u = linear(gelu(h), p.up);
  return residual ? add(x, u) : u;
}

// Kaiming-uniform down-projection and conv kernels, zero biases, zero
// up-projection: the adapter starts as the identity map.
inline AdapterParams init_adapter(const LkaConfig& cfg, std::uint64_t seed) {
  AdapterParams p = AdapterParams::zeros(cfg);
  Rng rng(seed);
  fill_uniform(p.down.weight, rng, kaiming_bound(cfg.d));
  for (auto& c : p.conv) fill_uniform(c.weight, rng, kaiming_bound(c.kernel() * c.kernel()));
  return p;
}

}  // namespace lka
