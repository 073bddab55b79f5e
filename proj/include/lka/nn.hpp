// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Neural layers built from the tape primitives: linear projection, depthwise
// (channel-wise) convolution, layer normalization, multi-head self-attention
// and the transformer MLP.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "lka/ops.hpp"
#include "lka/rng.hpp"

namespace lka {

// Rounds to the nearest float so that f32 storage is lossless.
inline double snap_to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void snap_to_f32(Tensor& t) {
  for (auto& v : t.data()) v = snap_to_f32(v);
}

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  snap_to_f32(t);
}

// He/Kaiming uniform bound for a ReLU-family gain.
inline double kaiming_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static LinearParams zeros(std::size_t in, std::size_t out) {
    return {Tensor::zeros({in, out}), Tensor::zeros({out})};
  }
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  std::size_t numel() const { return weight.numel() + bias.numel(); }
};

struct DwConvParams {
  Tensor weight;  // [channels, k, k]
  Tensor bias;    // [channels]
  std::size_t dilation = 1;

  static DwConvParams zeros(std::size_t channels, std::size_t k, std::size_t dilation = 1) {
    if (k % 2 == 0) throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(k));
    return {Tensor::zeros({channels, k, k}), Tensor::zeros({channels}), dilation};
  }
  std::size_t kernel() const { return weight.dim(1); }
  std::size_t numel() const { return weight.numel() + bias.numel(); }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNormParams identity(std::size_t d, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ConfigError("layernorm epsilon must be positive");
    return {Tensor::full({d}, 1.0), Tensor::zeros({d}), eps};
  }
  std::size_t numel() const { return gamma.numel() + beta.numel(); }
};

struct MsaParams {
  LinearParams query, key, value, proj;
  std::size_t heads = 1;

  static MsaParams zeros(std::size_t d, std::size_t heads) {
    if (heads == 0 || d % heads != 0)
      throw ConfigError("attention: embed dim " + std::to_string(d) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    return {LinearParams::zeros(d, d), LinearParams::zeros(d, d), LinearParams::zeros(d, d),
            LinearParams::zeros(d, d), heads};
  }
  std::size_t numel() const { return query.numel() + key.numel() + value.numel() + proj.numel(); }
};

struct MlpParams {
  LinearParams fc1;  // d -> r·d
  LinearParams fc2;  // r·d -> d

  static MlpParams zeros(std::size_t d, std::size_t ratio) {
    return {LinearParams::zeros(d, ratio * d), LinearParams::zeros(ratio * d, d)};
  }
  std::size_t numel() const { return fc1.numel() + fc2.numel(); }
};

inline Tensor linear(const Tensor& x, const LinearParams& p) { return affine(x, p.weight, p.bias); }

inline Tensor dwconv2d(const Tensor& x, const DwConvParams& p) {
  return depthwise_conv2d(x, p.weight, p.bias, p.dilation);
}

inline Tensor layernorm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gamma, p.beta, p.eps); }

namespace detail {

// [B,T,d] -> [B·heads, T, d/heads]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const auto B = x.dim(0), T = x.dim(1), hd = x.dim(2) / heads;
  return reshape(permute(reshape(x, {B, T, heads, hd}), {0, 2, 1, 3}), {B * heads, T, hd});
}

inline void check_msa_input(const Tensor& x, const MsaParams& p) {
  if (x.rank() != 3) throw DimensionError("msa: expected [B,T,d], got " + shape_str(x.shape()));
  const auto d = x.dim(2);
  if (p.heads == 0 || d % p.heads != 0)
    throw ConfigError("msa: embed dim " + std::to_string(d) + " is not divisible by " + std::to_string(p.heads) +
                      " heads");
}

}  // namespace detail

// Softmax attention weights [B, heads, T, T].
inline Tensor attention_weights(const Tensor& x, const MsaParams& p) {
  detail::check_msa_input(x, p);
  const auto B = x.dim(0), T = x.dim(1), hd = x.dim(2) / p.heads;
  Tensor q = detail::split_heads(linear(x, p.query), p.heads);
  Tensor kt = permute(detail::split_heads(linear(x, p.key), p.heads), {0, 2, 1});
  Tensor a = softmax_last(scale(bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(hd))));
  return reshape(a, {B, p.heads, T, T});
}

inline Tensor msa(const Tensor& x, const MsaParams& p) {
  detail::check_msa_input(x, p);
  const auto B = x.dim(0), T = x.dim(1), d = x.dim(2), hd = d / p.heads;
  Tensor q = detail::split_heads(linear(x, p.query), p.heads);
  Tensor kt = permute(detail::split_heads(linear(x, p.key), p.heads), {0, 2, 1});
  Tensor v = detail::split_heads(linear(x, p.value), p.heads);
  Tensor a = softmax_last(scale(bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(hd))));
  Tensor ctx = bmm(a, v);  // [B·h, T, hd]
  ctx = reshape(permute(reshape(ctx, {B, p.heads, T, hd}), {0, 2, 1, 3}), {B, T, d});
  return linear(ctx, p.proj);
}

inline Tensor mlp(const Tensor& x, const MlpParams& p) { return linear(gelu(linear(x, p.fc1)), p.fc2); }

}  // namespace lka
