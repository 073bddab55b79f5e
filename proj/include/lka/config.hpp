// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Plain `key = value` run configuration: parsing, overrides and the resolved
// echo written next to every output.

#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lka/model.hpp"
#include "lka/train.hpp"

namespace lka {

using KeyValues = std::map<std::string, std::string>;

// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// `key = value` per line; `#` starts a comment; blank lines are ignored.
inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" + std::string(line) + "'");
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    kv[std::string(key)] = std::string(value);
  }
  return kv;
}

inline std::string render_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// `key=value` as given on the command line.
inline std::pair<std::string, std::string> parse_assignment(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos || trim(s.substr(0, eq)).empty())
    throw ConfigError("expected key=value, got '" + std::string(s) + "'");
  return {std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1)))};
}

template <typename T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError("bad value for " + std::string(key) + ": '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  while (true) {
    const auto p = s.find(sep);
    auto item = trim(s.substr(0, p));
    if (!item.empty()) out.emplace_back(item);
    if (p == std::string_view::npos) break;
    s = s.substr(p + 1);
  }
  return out;
}

struct DataConfig {
  std::size_t samples = 2000;  // synthetic set size
  std::uint64_t seed = 0;      // generator seed
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  ModelConfig model;
  ModelSeeds seeds;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    if (data.samples < 5) throw ConfigError("data.samples must be at least 5");
  }
};

// Adapter kind as written in config text: lka, vanilla or none.
inline std::string adapter_kind(const ModelConfig& m) {
  if (!m.adapters) return "none";
  return m.kernel ? "lka" : "vanilla";
}

inline std::optional<std::size_t> parse_kernel(std::string_view s) {
  if (s == "none" || s == "vanilla") return std::nullopt;
  return parse_number<std::size_t>("kernel", s);
}

inline KeyValues to_key_values(const RunConfig& rc) {
  const auto& m = rc.model;
  const auto& t = rc.train;
  KeyValues kv;
  kv["model.image_size"] = std::to_string(m.image_size);
  kv["model.patch_size"] = std::to_string(m.patch_size);
  kv["model.channels"] = std::to_string(m.channels);
  kv["model.embed_dim"] = std::to_string(m.embed_dim);
  kv["model.depth"] = std::to_string(m.depth);
  kv["model.heads"] = std::to_string(m.heads);
  kv["model.mlp_ratio"] = std::to_string(m.mlp_ratio);
  kv["model.classes"] = std::to_string(m.classes);
  kv["model.cls_tokens"] = std::to_string(m.cls_tokens);
  kv["model.placement"] = std::string(to_string(m.placement));
  kv["model.mode"] = std::string(to_string(m.mode));
  kv["model.adapter"] = adapter_kind(m);
  kv["model.bottleneck"] = std::to_string(m.bottleneck);
  kv["model.kernel"] = m.kernel ? std::to_string(*m.kernel) : "none";
  kv["model.recipe"] = std::string(to_string(m.recipe));
  kv["model.seed"] = std::to_string(rc.seeds.backbone);
  kv["model.adapter_seed"] = std::to_string(rc.seeds.adapters);
  kv["train.epochs"] = std::to_string(t.epochs);
  kv["train.batch_size"] = std::to_string(t.batch_size);
  kv["train.lr_max"] = format_double(t.lr_max);
  kv["train.lr_min"] = format_double(t.lr_min);
  kv["train.warmup_frac"] = format_double(t.warmup_frac);
  kv["train.weight_decay"] = format_double(t.adam.weight_decay);
  kv["train.beta1"] = format_double(t.adam.beta1);
  kv["train.beta2"] = format_double(t.adam.beta2);
  kv["train.eps"] = format_double(t.adam.eps);
  kv["train.seed"] = std::to_string(t.seed);
  kv["data.samples"] = std::to_string(rc.data.samples);
  kv["data.seed"] = std::to_string(rc.data.seed);
  kv["data.split_seed"] = std::to_string(rc.data.split_seed);
  return kv;
}

inline void apply_key_value(RunConfig& rc, const std::string& key, const std::string& v) {
  auto& m = rc.model;
  auto& t = rc.train;
  auto size = [&] { return parse_number<std::size_t>(key, v); };
  auto u64 = [&] { return parse_number<std::uint64_t>(key, v); };
  auto real = [&] { return parse_number<double>(key, v); };
  try {
    if (key == "model.image_size") m.image_size = size();
    else if (key == "model.patch_size") m.patch_size = size();
    else if (key == "model.channels") m.channels = size();
    else if (key == "model.embed_dim") m.embed_dim = size();
    else if (key == "model.depth") m.depth = size();
    else if (key == "model.heads") m.heads = size();
    else if (key == "model.mlp_ratio") m.mlp_ratio = size();
    else if (key == "model.classes") m.classes = size();
    else if (key == "model.cls_tokens") m.cls_tokens = size();
    else if (key == "model.placement") m.placement = parse_placement(v);
    else if (key == "model.mode") m.mode = parse_mode(v);
    else if (key == "model.adapter") {
      if (v == "none") m.adapters = false;
      else if (v == "lka" || v == "vanilla") m.adapters = true;
      else throw ConfigError("model.adapter must be lka, vanilla or none, got '" + v + "'");
      if (v == "vanilla") m.kernel.reset();
      else if (v == "lka" && !m.kernel) throw ConfigError("model.adapter = lka needs a kernel size");
    } else if (key == "model.bottleneck") m.bottleneck = size();
    else if (key == "model.kernel") m.kernel = parse_kernel(v);
    else if (key == "model.recipe") m.recipe = parse_recipe(v);
    else if (key == "model.seed") rc.seeds.backbone = u64();
    else if (key == "model.adapter_seed") rc.seeds.adapters = u64();
    else if (key == "train.epochs") t.epochs = size();
    else if (key == "train.batch_size") t.batch_size = size();
    else if (key == "train.lr_max") t.lr_max = real();
    else if (key == "train.lr_min") t.lr_min = real();
    else if (key == "train.warmup_frac") t.warmup_frac = real();
    else if (key == "train.weight_decay") t.adam.weight_decay = real();
    else if (key == "train.beta1") t.adam.beta1 = real();
    else if (key == "train.beta2") t.adam.beta2 = real();
    else if (key == "train.eps") t.adam.eps = real();
    else if (key == "train.seed") t.seed = u64();
    else if (key == "data.samples") rc.data.samples = size();
    else if (key == "data.seed") rc.data.seed = u64();
    else if (key == "data.split_seed") rc.data.split_seed = u64();
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("bad value for " + key + ": " + e.what());
  }
}

// Applies keys in order. The adapter kind goes last so that `kernel` cannot
// silently re-enable an adapter switched to vanilla.
inline void apply_key_values(RunConfig& rc, const KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (k != "model.adapter") apply_key_value(rc, k, v);
  if (auto it = kv.find("model.adapter"); it != kv.end()) apply_key_value(rc, it->first, it->second);
}

inline RunConfig run_config_from(const KeyValues& kv) {
  RunConfig rc;
  apply_key_values(rc, kv);
  return rc;
}

inline std::string echo_config(const RunConfig& rc) { return render_key_values(to_key_values(rc)); }

}  // namespace lka
