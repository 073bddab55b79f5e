// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Effective receptive field maps and parameter accounting.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "lka/adapter.hpp"
#include "lka/config.hpp"
#include "lka/io.hpp"
#include "lka/model.hpp"
#include "lka/ops.hpp"
#include "lka/rng.hpp"

namespace lka {

struct ErfMap {
  std::size_t size = 0;        // S
  std::vector<double> matrix;  // S×S, row-major
  std::size_t num_images = 0;
  bool degenerate = false;

  double at(std::size_t r, std::size_t c) const { return matrix[r * size + c]; }
};

// Row/column of the token whose receptive field is measured; for even grids
// this is the upper-left of the four middle tokens.
inline std::size_t central_index(std::size_t n) { return (n + 1) / 2 - 1; }

// Normalizes by the max, or flags the map when everything is zero.
inline ErfMap make_erf_map(std::size_t size, std::vector<double> raw, std::size_t num_images) {
  ErfMap e{size, std::move(raw), num_images, false};
  const double mx = e.matrix.empty() ? 0.0 : *std::max_element(e.matrix.begin(), e.matrix.end());
  if (!(mx > 0.0)) {
    e.degenerate = true;
    std::fill(e.matrix.begin(), e.matrix.end(), 0.0);
  } else {
    for (auto& v : e.matrix) v /= mx;
  }
  return e;
}

// |d(sum of channels of the central token) / d(pixel)|, summed over input
// channels and images. Images go through in chunks; samples in a batch never
// interact, so one backward pass per chunk yields every per-image gradient.
inline ErfMap erf_map(const Model& model, const Tensor& images, std::size_t chunk = 8) {
  const auto& c = model.cfg;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size)
    throw DimensionError("erf_map: images " + shape_str(images.shape()) + " do not fit a model for " +
                         std::to_string(c.channels) + "x" + std::to_string(c.image_size) + "x" +
                         std::to_string(c.image_size) + " inputs");
  const std::size_t N = images.dim(0), C = c.channels, S = c.image_size, g = c.grid();
  if (N == 0) throw ContractError("erf_map needs at least one image");
  if (chunk == 0) chunk = 1;

  Model probe = deep_copy(model);
  for (auto& p : probe.registry) p.tensor.set_requires_grad(false);
  const std::size_t token = c.cls_tokens + central_index(g) * g + central_index(g);

  std::vector<double> acc(S * S, 0.0);
  for (std::size_t lo = 0; lo < N; lo += chunk) {
    const std::size_t n = std::min(chunk, N - lo);
    Tensor x = narrow(images, 0, lo, n).detach();
    x.set_requires_grad(true);
    Tape::current().clear();
    Tensor feats = forward_features(probe, x);
    backward(sum(narrow(feats, 1, token, 1)));
    auto grad = x.grad();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* src = grad.data() + (b * C + ch) * S * S;
        for (std::size_t i = 0; i < S * S; ++i) acc[i] += std::abs(src[i]);
      }
  }
  return make_erf_map(S, std::move(acc), N);
}

// (a/S)^2 for the smallest odd a whose centered square holds at least a
// fraction t of the total mass. Squares are clipped at the border.
inline double erf_area_ratio(const ErfMap& e, double t) {
  if (e.degenerate) throw ContractError("erf_area_ratio: degenerate (all-zero) map");
  if (!(t > 0.0 && t < 1.0)) throw ContractError("erf_area_ratio: threshold must lie in (0, 1)");
  const std::size_t S = e.size;
  if (S == 0 || e.matrix.size() != S * S) throw DimensionError("erf_area_ratio: malformed map");
  // 2-D prefix sums, (S+1)×(S+1)
  std::vector<double> P((S + 1) * (S + 1), 0.0);
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t col = 0; col < S; ++col)
      P[(r + 1) * (S + 1) + col + 1] =
          e.at(r, col) + P[r * (S + 1) + col + 1] + P[(r + 1) * (S + 1) + col] - P[r * (S + 1) + col];
  auto box = [&](std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1) {  // inclusive-exclusive
    return P[r1 * (S + 1) + c1] - P[r0 * (S + 1) + c1] - P[r1 * (S + 1) + c0] + P[r0 * (S + 1) + c0];
  };
  const double total = box(0, 0, S, S);
  const std::size_t ctr = central_index(S);
  for (std::size_t a = 1;; a += 2) {
    const std::size_t h = a / 2;
    const std::size_t lo = ctr >= h ? ctr - h : 0, hi = std::min(S, ctr + h + 1);
    if (box(lo, lo, hi, hi) >= t * total || (lo == 0 && hi == S)) {
      const double side = static_cast<double>(std::min(a, S)) / static_cast<double>(S);
      return side * side;
    }
  }
}

// Overwrites every adapter up-projection with uniform values in
// [-bound, bound], so freshly built adapters stop being identities.
inline void perturb_adapters(Model& m, std::uint64_t seed, double bound) {
  Rng rng(derive_seed(seed, 0x70657274));
  for (auto& b : m.blocks)
    for (auto* a : {&b.adapter_msa, &b.adapter_ffn})
      if (*a) fill_uniform((*a)->up.weight, rng, bound);
}

struct PgmImage {
  std::size_t width = 0, height = 0, maxval = 0;
  std::vector<std::uint16_t> samples;
};

inline std::vector<std::uint16_t> quantize_erf(const ErfMap& e) {
  std::vector<std::uint16_t> q(e.matrix.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = static_cast<std::uint16_t>(std::lround(std::clamp(e.matrix[i], 0.0, 1.0) * 65535.0));
  return q;
}

inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint16_t>& samples) {
  io::ByteWriter w;
  w.text("P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n65535\n");
  for (auto s : samples) {
    w.u8(static_cast<std::uint8_t>(s >> 8));
    w.u8(static_cast<std::uint8_t>(s & 0xff));
  }
  io::write_file(path, w.buffer());
}

// Binary P5 reader: 8-bit or big-endian 16-bit samples, `#` comments allowed.
inline PgmImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw FormatError("truncated PGM header in '" + path.string() + "'");
    return t;
  };
  if (token() != "P5") throw FormatError("'" + path.string() + "' is not a binary PGM");
  PgmImage img;
  img.width = parse_number<std::size_t>("width", token());
  img.height = parse_number<std::size_t>("height", token());
  img.maxval = parse_number<std::size_t>("maxval", token());
  if (img.maxval == 0 || img.maxval > 65535) throw FormatError("bad PGM maxval");
  ++pos;  // single whitespace before the raster
  const std::size_t bps = img.maxval > 255 ? 2 : 1, n = img.width * img.height;
  if (bytes.size() < pos + n * bps) throw LengthError("PGM raster truncated in '" + path.string() + "'");
  img.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.samples[i] = bps == 2 ? static_cast<std::uint16_t>(bytes[pos + 2 * i] << 8 | bytes[pos + 2 * i + 1])
                              : bytes[pos + i];
  return img;
}

inline constexpr double kErfThresholds[3] = {0.2, 0.5, 0.99};

inline std::string erf_metrics_csv(const ErfMap& e) {
  std::string out = "threshold,area_ratio\n";
  for (double t : kErfThresholds) out += format_double(t) + "," + format_double(erf_area_ratio(e, t)) + "\n";
  return out;
}

// Writes the map as a 16-bit PGM and the area ratios as CSV.
inline void export_erf(const ErfMap& e, const std::filesystem::path& pgm_path,
                       const std::filesystem::path& csv_path) {
  const auto csv = erf_metrics_csv(e);  // rejects degenerate maps before touching the disk
  write_pgm(pgm_path, e.size, e.size, quantize_erf(e));
  io::write_text(csv_path, csv);
}

inline void export_erf(const ErfMap& e, const std::filesystem::path& pgm_path) {
  auto csv = pgm_path;
  csv.replace_extension(".csv");
  export_erf(e, pgm_path, csv);
}

struct GroupCount {
  std::size_t trainable = 0, frozen = 0;
  std::size_t total() const { return trainable + frozen; }
};

struct ParamReport {
  GroupCount backbone, adapters, head;
  std::size_t total = 0;                  // registry total
  std::size_t adapter_modules = 0;
  std::uint64_t per_adapter_formula = 0;  // closed form, one adapter
  std::uint64_t adapters_formula = 0;     // closed form times module count
  bool match = true;

  std::size_t trainable() const { return backbone.trainable + adapters.trainable + head.trainable; }
};

inline ParamReport param_report(const Model& m) {
  ParamReport r;
  for (const auto& p : m.registry) {
    GroupCount& g = p.group == ParamGroup::backbone ? r.backbone : p.group == ParamGroup::adapters ? r.adapters : r.head;
    (p.trainable ? g.trainable : g.frozen) += p.tensor.numel();
    r.total += p.tensor.numel();
  }
  bool each_matches = true;
  for (const auto& b : m.blocks)
    for (const auto* a : {&b.adapter_msa, &b.adapter_ffn})
      if (*a) {
        ++r.adapter_modules;
        each_matches = each_matches && (*a)->numel() == adapter_param_count(m.cfg.lka());
      }
  if (r.adapter_modules > 0) r.per_adapter_formula = adapter_param_count(m.cfg.lka());
  r.adapters_formula = r.per_adapter_formula * r.adapter_modules;
  r.match = each_matches && r.adapters.total() == r.adapters_formula;
  return r;
}

inline std::string format_param_report(const ParamReport& r) {
  std::ostringstream os;
  auto row = [&](const std::string& name, const GroupCount& g) {
    os << name << std::string(12 - name.size(), ' ') << g.trainable << "\t" << g.frozen << "\t" << g.total() << "\n";
  };
  os << "group       trainable\tfrozen\ttotal\n";
  row("backbone", r.backbone);
  row("adapters", r.adapters);
  row("head", r.head);
  os << "total       " << r.trainable() << "\t" << r.total - r.trainable() << "\t" << r.total << "\n";
  os << "adapter modules: " << r.adapter_modules << "\n";
  os << "per-adapter (closed form): " << r.per_adapter_formula << "\n";
  os << "adapters (closed form): " << r.adapters_formula << "  enumerated: " << r.adapters.total() << "\n";
  os << "match=" << (r.match ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace lka
