// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale ViT backbone with two adapters per block, three placement
// strategies and the trainable/frozen parameter registry.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lka/adapter.hpp"

namespace lka {

enum class Placement {
  parallel_a,    // adapters beside MSA and MLP, fed by the shared LN output
  seq_before_b,  // adapter on the sub-layer output, before its residual add
  seq_after_c,   // adapter after the residual add
};

enum class Mode { lka_tuning, linear_probe, full_ft };

inline std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::parallel_a: return "parallel_a";
    case Placement::seq_before_b: return "seq_before_b";
    case Placement::seq_after_c: return "seq_after_c";
  }
  return "?";
}

inline Placement parse_placement(std::string_view s) {
  if (s == "parallel_a" || s == "a") return Placement::parallel_a;
  if (s == "seq_before_b" || s == "b") return Placement::seq_before_b;
  if (s == "seq_after_c" || s == "c") return Placement::seq_after_c;
  throw ConfigError("unknown placement '" + std::string(s) + "' (expected parallel_a, seq_before_b or seq_after_c)");
}

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::lka_tuning: return "lka_tuning";
    case Mode::linear_probe: return "linear_probe";
    case Mode::full_ft: return "full_ft";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "lka_tuning") return Mode::lka_tuning;
  if (s == "linear_probe") return Mode::linear_probe;
  if (s == "full_ft") return Mode::full_ft;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected lka_tuning, linear_probe or full_ft)");
}

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 2;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 4;
  std::size_t cls_tokens = 0;
  Placement placement = Placement::parallel_a;
  Mode mode = Mode::lka_tuning;
  bool adapters = true;  // false: plain backbone, no adapter parameters at all
  std::size_t bottleneck = 8;
  std::optional<std::size_t> kernel = 7;  // nullopt: vanilla adapter
  Recipe recipe = Recipe::cw_single;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid() + cls_tokens; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  LkaConfig lka() const {
    return LkaConfig{embed_dim, bottleneck, kernel, recipe, grid(), grid(), cls_tokens};
  }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image size " + std::to_string(image_size) + " is not a multiple of patch size " +
                        std::to_string(patch_size));
    if (channels == 0 || embed_dim == 0 || depth == 0 || mlp_ratio == 0)
      throw ConfigError("channels, embed_dim, depth and mlp_ratio must be positive");
    if (classes < 2) throw ConfigError("need at least two classes");
    if (heads == 0 || embed_dim % heads != 0)
      throw ConfigError("embed dim " + std::to_string(embed_dim) + " is not divisible by " + std::to_string(heads) +
                        " heads");
    if (cls_tokens > 1) throw ConfigError("cls_tokens must be 0 or 1");
    if (adapters) lka().validate();
  }
};

struct BlockParams {
  LayerNormParams ln1, ln2;
  MsaParams msa;
  MlpParams mlp;
  std::optional<AdapterParams> adapter_msa, adapter_ffn;
};

enum class ParamGroup { backbone, adapters, head };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
  bool trainable;
};

// Parameter tensors are shared handles: copying a Model aliases its weights.
struct Model {
  ModelConfig cfg;
  LinearParams patch_embed;  // [C·p·p, d]
  Tensor pos_embed;          // [T, d]
  Tensor cls_token;          // [1, d] when cfg.cls_tokens == 1
  std::vector<BlockParams> blocks;
  LayerNormParams norm;
  LinearParams head;
  std::vector<NamedParameter> registry;

  const NamedParameter& param(std::string_view name) const {
    auto it = std::find_if(registry.begin(), registry.end(), [&](const auto& p) { return p.name == name; });
    if (it == registry.end()) throw ContractError("no parameter named '" + std::string(name) + "'");
    return *it;
  }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : registry) n += p.tensor.numel();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Tensor block_forward(const Tensor& x, const BlockParams& bp, Placement placement, const LkaConfig& lka) {
  if (!bp.adapter_msa || !bp.adapter_ffn) {
    Tensor y = add(x, msa(layernorm(x, bp.ln1), bp.msa));
    return add(y, mlp(layernorm(y, bp.ln2), bp.mlp));
  }
  const auto& a1 = *bp.adapter_msa;
  const auto& a2 = *bp.adapter_ffn;
  switch (placement) {
    case Placement::parallel_a: {
      // The adapter branch runs without its own residual; the block keeps its
      // identity skip.
      Tensor n1 = layernorm(x, bp.ln1);
      Tensor y = add(add(x, msa(n1, bp.msa)), adapter_forward(n1, a1, lka, false));
      Tensor n2 = layernorm(y, bp.ln2);
      return add(add(y, mlp(n2, bp.mlp)), adapter_forward(n2, a2, lka, false));
    }
    case Placement::seq_before_b: {
      Tensor y = add(x, adapter_forward(msa(layernorm(x, bp.ln1), bp.msa), a1, lka));
      return add(y, adapter_forward(mlp(layernorm(y, bp.ln2), bp.mlp), a2, lka));
    }
    case Placement::seq_after_c: {
      Tensor y = adapter_forward(add(x, msa(layernorm(x, bp.ln1), bp.msa)), a1, lka);
      return adapter_forward(add(y, mlp(layernorm(y, bp.ln2), bp.mlp)), a2, lka);
    }
  }
  throw ConfigError("unknown placement");
}

// [B,C,S,S] -> [B, (S/p)², C·p·p], patches in row-major grid order.
inline Tensor patchify(const Tensor& images, std::size_t patch) {
  const auto B = images.dim(0), C = images.dim(1), S = images.dim(2), g = S / patch;
  Tensor x = reshape(images, {B, C, g, patch, g, patch});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  return reshape(x, {B, g * g, C * patch * patch});
}

// Token sequence after the last block, before the final norm.
inline Tensor forward_features(const Model& m, const Tensor& images) {
  const auto& c = m.cfg;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size)
    throw DimensionError("model expects [B," + std::to_string(c.channels) + "," + std::to_string(c.image_size) +
                         "," + std::to_string(c.image_size) + "] images, got " + shape_str(images.shape()));
  const auto B = images.dim(0);
  Tensor x = linear(patchify(images, c.patch_size), m.patch_embed);
  if (c.cls_tokens > 0) {
    Tensor cls = add_broadcast(Tensor::zeros({B, 1, c.embed_dim}), m.cls_token);
    x = concat({cls, x}, 1);
  }
  x = add_broadcast(x, m.pos_embed);
  const auto lka = c.lka();
  for (const auto& bp : m.blocks) x = block_forward(x, bp, c.placement, lka);
  return x;
}

// Logits [B, classes]: blocks, final norm, mean over spatial tokens, head.
inline Tensor model_forward(const Model& m, const Tensor& images) {
  const auto& c = m.cfg;
  Tensor x = layernorm(forward_features(m, images), m.norm);
  Tensor spatial = c.cls_tokens > 0 ? narrow(x, 1, c.cls_tokens, c.grid() * c.grid()) : x;
  return linear(mean_axis(spatial, 1), m.head);
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct ModelSeeds {
  std::uint64_t backbone = 0;
  std::uint64_t adapters = 0;
};

namespace detail {

inline void fill_std(Tensor& t, Rng& rng, double std_dev) { fill_uniform(t, rng, std_dev * std::sqrt(3.0)); }

inline bool trainable_in(Mode mode, ParamGroup g) {
  switch (mode) {
    case Mode::full_ft: return true;
    case Mode::linear_probe: return g == ParamGroup::head;
    case Mode::lka_tuning: return g != ParamGroup::backbone;
  }
  return false;
}

inline void register_params(Model& m) {
  m.registry.clear();
  auto put = [&](std::string name, const Tensor& t, ParamGroup g) {
    m.registry.push_back({std::move(name), t, g, trainable_in(m.cfg.mode, g)});
  };
  auto add_linear = [&](const std::string& prefix, const LinearParams& p, ParamGroup g) {
    put(prefix + ".weight", p.weight, g);
    put(prefix + ".bias", p.bias, g);
  };
  auto add_ln = [&](const std::string& prefix, const LayerNormParams& p) {
    put(prefix + ".gamma", p.gamma, ParamGroup::backbone);
    put(prefix + ".beta", p.beta, ParamGroup::backbone);
  };
  add_linear("embed.proj", m.patch_embed, ParamGroup::backbone);
  put("embed.pos", m.pos_embed, ParamGroup::backbone);
  if (m.cfg.cls_tokens > 0) put("embed.cls", m.cls_token, ParamGroup::backbone);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& b = m.blocks[i];
    const std::string pre = "blocks." + std::to_string(i);
    add_ln(pre + ".ln1", b.ln1);
    add_linear(pre + ".attn.query", b.msa.query, ParamGroup::backbone);
    add_linear(pre + ".attn.key", b.msa.key, ParamGroup::backbone);
    add_linear(pre + ".attn.value", b.msa.value, ParamGroup::backbone);
    add_linear(pre + ".attn.proj", b.msa.proj, ParamGroup::backbone);
    add_ln(pre + ".ln2", b.ln2);
    add_linear(pre + ".mlp.fc1", b.mlp.fc1, ParamGroup::backbone);
    add_linear(pre + ".mlp.fc2", b.mlp.fc2, ParamGroup::backbone);
    if (b.adapter_msa)
      for (const auto& [n, t] : b.adapter_msa->named()) put(pre + ".adapter_msa." + n, t, ParamGroup::adapters);
    if (b.adapter_ffn)
      for (const auto& [n, t] : b.adapter_ffn->named()) put(pre + ".adapter_ffn." + n, t, ParamGroup::adapters);
  }
  add_ln("norm", m.norm);
  add_linear("head", m.head, ParamGroup::head);
  for (auto& p : m.registry) p.tensor.set_requires_grad(p.trainable);
}

}  // namespace detail

// Backbone and head draw only from the backbone stream, each adapter from its
// own stream, so adding or removing adapters never perturbs backbone weights.
inline Model build_model(const ModelConfig& cfg, ModelSeeds seeds) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const auto d = cfg.embed_dim;
  Rng rng(derive_seed(seeds.backbone, 0x62616b65));
  constexpr double kStd = 0.02;

  m.patch_embed = LinearParams::zeros(cfg.patch_dim(), d);
  fill_uniform(m.patch_embed.weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  m.pos_embed = Tensor::zeros({cfg.tokens(), d});
  detail::fill_std(m.pos_embed, rng, kStd);
  if (cfg.cls_tokens > 0) {
    m.cls_token = Tensor::zeros({1, d});
    detail::fill_std(m.cls_token, rng, kStd);
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockParams b{LayerNormParams::identity(d), LayerNormParams::identity(d), MsaParams::zeros(d, cfg.heads),
                  MlpParams::zeros(d, cfg.mlp_ratio), std::nullopt, std::nullopt};
    for (auto* lp : {&b.msa.query, &b.msa.key, &b.msa.value, &b.msa.proj, &b.mlp.fc1, &b.mlp.fc2})
      detail::fill_std(lp->weight, rng, kStd);
    m.blocks.push_back(std::move(b));
  }
  m.norm = LayerNormParams::identity(d);
  m.head = LinearParams::zeros(d, cfg.classes);
  detail::fill_std(m.head.weight, rng, kStd);

  if (cfg.adapters) {
    const auto lka = cfg.lka();
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      m.blocks[i].adapter_msa = init_adapter(lka, derive_seed(seeds.adapters, 0x616470, 2 * i));
      m.blocks[i].adapter_ffn = init_adapter(lka, derive_seed(seeds.adapters, 0x616470, 2 * i + 1));
    }
  }
  detail::register_params(m);
  return m;
}

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return build_model(cfg, ModelSeeds{seed, seed}); }

inline std::vector<std::pair<std::string, Tensor>> trainable_params(const Model& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : m.registry)
    if (p.trainable) out.emplace_back(p.name, p.tensor);
  return out;
}

// Makes every parameter's values independent of `src` (same names, same data).
inline Model deep_copy(const Model& src) {
  Model m = build_model(src.cfg, ModelSeeds{});
  for (std::size_t i = 0; i < m.registry.size(); ++i) {
    auto dst = m.registry[i].tensor.data();
    auto from = src.registry[i].tensor.data();
    std::copy(from.begin(), from.end(), dst.begin());
  }
  return m;
}

}  // namespace lka
