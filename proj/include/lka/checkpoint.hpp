// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// LKCK checkpoints: parameter table, optimizer table, then a length-prefixed
// config echo so a checkpoint can rebuild its own model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lka/config.hpp"
#include "lka/io.hpp"
#include "lka/model.hpp"
#include "lka/optim.hpp"

namespace lka {

inline constexpr char kLkckMagic[4] = {'L', 'K', 'C', 'K'};
inline constexpr std::uint32_t kLkckVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const TensorEntry&) const = default;
};

struct CheckpointData {
  std::uint64_t step = 0;
  std::vector<TensorEntry> params;
  std::vector<TensorEntry> optimizer;
  std::string config;  // key = value text
};

namespace detail {

inline void write_table(io::ByteWriter& w, const std::vector<TensorEntry>& table) {
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& e : table) {
    if (e.name.size() > 0xffff) throw ContractError("tensor name too long: " + e.name.substr(0, 40) + "...");
    if (e.shape.size() > 0xff) throw ContractError("tensor rank too large for " + e.name);
    if (e.values.size() != shape_numel(e.shape)) throw ContractError("payload size mismatch for " + e.name);
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.text(e.name);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (auto ext : e.shape) w.u32(static_cast<std::uint32_t>(ext));
    for (float v : e.values) w.f32(v);
  }
}

inline std::vector<TensorEntry> read_table(io::ByteReader& r) {
  const std::uint32_t n = r.u32();
  std::vector<TensorEntry> table;
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorEntry e;
    e.name = r.text(r.u16());
    const std::uint8_t rank = r.u8();
    std::uint64_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      numel *= e.shape.back();
    }
    if (numel * 4 > r.remaining())
      throw LengthError("tensor '" + e.name + "' claims " + std::to_string(numel) + " values, only " +
                        std::to_string(r.remaining()) + " bytes left");
    e.values.resize(static_cast<std::size_t>(numel));
    for (auto& v : e.values) v = r.f32();
    table.push_back(std::move(e));
  }
  return table;
}

inline TensorEntry entry_of(std::string name, const Shape& shape, std::span<const double> data) {
  TensorEntry e{std::move(name), shape, {}};
  e.values.reserve(data.size());
  for (double v : data) e.values.push_back(static_cast<float>(v));
  return e;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& ck) {
  io::ByteWriter w;
  w.text(std::string_view(kLkckMagic, 4));
  w.u32(kLkckVersion);
  w.u64(ck.step);
  detail::write_table(w, ck.params);
  detail::write_table(w, ck.optimizer);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  w.text(ck.config);
  return w.take();
}

inline CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.text(4) != std::string_view(kLkckMagic, 4))
    throw FormatError("not an LKCK file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kLkckVersion) throw FormatError("unsupported LKCK version " + std::to_string(version));
  CheckpointData ck;
  ck.step = r.u64();
  ck.params = detail::read_table(r);
  ck.optimizer = detail::read_table(r);
  ck.config = r.text(r.u32());
  if (!r.at_end()) throw FormatError("trailing bytes after LKCK payload");
  return ck;
}

inline std::string moment_name(char which, const std::string& param) { return std::string("adam.") + which + "." + param; }

// Snapshot of the model and optimizer. Moments are listed for trainable
// parameters only, m then v, in registry order.
inline CheckpointData make_checkpoint(const Model& m, const AdamWState& opt, const std::string& config) {
  CheckpointData ck;
  ck.step = opt.step;
  ck.config = config;
  for (const auto& p : m.registry) ck.params.push_back(detail::entry_of(p.name, p.tensor.shape(), p.tensor.data()));
  if (!opt.m.empty()) {
    std::size_t i = 0;
    for (const auto& p : m.registry) {
      if (!p.trainable) continue;
      if (i >= opt.m.size()) throw ContractError("optimizer state has fewer tensors than trainable parameters");
      ck.optimizer.push_back(detail::entry_of(moment_name('m', p.name), p.tensor.shape(), opt.m[i]));
      ck.optimizer.push_back(detail::entry_of(moment_name('v', p.name), p.tensor.shape(), opt.v[i]));
      ++i;
    }
    if (i != opt.m.size()) throw ContractError("optimizer state has more tensors than trainable parameters");
  }
  return ck;
}

// Copies checkpoint values into `m` after checking every name and shape.
inline AdamWState load_into(Model& m, const CheckpointData& ck) {
  std::vector<std::string> offenders;
  auto find = [](const std::vector<TensorEntry>& t, const std::string& name) -> const TensorEntry* {
    for (const auto& e : t)
      if (e.name == name) return &e;
    return nullptr;
  };
  for (const auto& p : m.registry) {
    const auto* e = find(ck.params, p.name);
    if (!e)
      offenders.push_back(p.name + " (missing from checkpoint)");
    else if (e->shape != p.tensor.shape())
      offenders.push_back(p.name + " (checkpoint " + shape_str(e->shape) + ", model " + shape_str(p.tensor.shape()) +
                          ")");
  }
  for (const auto& e : ck.params) {
    bool known = false;
    for (const auto& p : m.registry) known = known || p.name == e.name;
    if (!known) offenders.push_back(e.name + " (not in model)");
  }
  if (!offenders.empty()) {
    std::string msg = "checkpoint does not fit the model; first offender: " + offenders.front();
    if (offenders.size() > 1) {
      msg += "; all offenders:";
      for (const auto& o : offenders) msg += " " + o + ";";
    }
    throw CompatibilityError(msg);
  }

  AdamWState opt;
  opt.step = ck.step;
  if (!ck.optimizer.empty()) {
    for (const auto& p : m.registry) {
      if (!p.trainable) continue;
      const auto* em = find(ck.optimizer, moment_name('m', p.name));
      const auto* ev = find(ck.optimizer, moment_name('v', p.name));
      if (!em || !ev || em->shape != p.tensor.shape() || ev->shape != p.tensor.shape())
        throw CompatibilityError("optimizer state does not fit the model; first offender: " + p.name);
      opt.m.emplace_back(em->values.begin(), em->values.end());
      opt.v.emplace_back(ev->values.begin(), ev->values.end());
    }
    if (ck.optimizer.size() != 2 * opt.m.size())
      throw CompatibilityError("optimizer table holds entries for parameters that are not trainable");
  }

  for (auto& p : m.registry) {
    const auto* e = find(ck.params, p.name);
    auto dst = p.tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(e->values[i]);
  }
  return opt;
}

struct LoadedCheckpoint {
  RunConfig config;
  Model model;
  AdamWState optimizer;
};

inline void save_checkpoint(const Model& m, const AdamWState& opt, const std::filesystem::path& path,
                            const std::string& config) {
  io::write_file(path, encode_checkpoint(make_checkpoint(m, opt, config)));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto ck = decode_checkpoint(io::read_file(path));
  LoadedCheckpoint out;
  out.config = run_config_from(parse_key_values(ck.config));
  out.model = build_model(out.config.model, out.config.seeds);
  out.optimizer = load_into(out.model, ck);
  return out;
}

}  // namespace lka
