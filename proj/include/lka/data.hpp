// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Image classification datasets: the LKDS binary format, the synthetic
// two-blob task, and the 80/20 split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lka/io.hpp"
#include "lka/rng.hpp"
#include "lka/tensor.hpp"

namespace lka {

inline constexpr char kLkdsMagic[4] = {'L', 'K', 'D', 'S'};
inline constexpr std::uint32_t kLkdsVersion = 1;

// Pixel records are stored interleaved (H, W, C) as in the file; images()
// hands them out as [n, C, H, W] reals in [0, 1].
struct Dataset {
  std::uint16_t channels = 1, height = 0, width = 0, classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;
  std::uint64_t split_seed = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(channels) * height * width;
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0)
      throw ValidationError("dataset image shape must be non-empty");
    if (pixels.size() != size() * image_bytes())
      throw LengthError("dataset holds " + std::to_string(pixels.size()) + " pixel bytes, expected " +
                        std::to_string(size() * image_bytes()));
    for (std::size_t i = 0; i < size(); ++i)
      if (labels[i] >= classes)
        throw ValidationError("label " + std::to_string(labels[i]) + " at record " + std::to_string(i) +
                              " is not below classes=" + std::to_string(classes));
    if (size() < classes)
      throw ValidationError("dataset has " + std::to_string(size()) + " samples but " + std::to_string(classes) +
                            " classes");
  }

  Tensor images(std::span<const std::size_t> idx) const {
    const std::size_t C = channels, H = height, W = width, hw = H * W;
    std::vector<double> out(idx.size() * C * hw);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      if (idx[n] >= size()) throw ContractError("sample index " + std::to_string(idx[n]) + " out of range");
      const std::uint8_t* src = pixels.data() + idx[n] * image_bytes();
      double* dst = out.data() + n * C * hw;
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < C; ++c) dst[c * hw + p] = src[p * C + c] / 255.0;
    }
    return Tensor({idx.size(), C, H, W}, std::move(out));
  }

  Tensor images() const { return images(all_indices()); }

  std::vector<std::size_t> label_values(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.classes = classes;
    out.split_seed = split_seed;
    out.labels.reserve(idx.size());
    out.pixels.reserve(idx.size() * image_bytes());
    for (std::size_t i : idx) {
      out.labels.push_back(labels.at(i));
      auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * image_bytes());
      out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(image_bytes()));
    }
    return out;
  }
};

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  io::ByteWriter w;
  w.text(std::string_view(kLkdsMagic, 4));
  w.u32(kLkdsVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u16(ds.channels);
  w.u16(ds.height);
  w.u16(ds.width);
  w.u16(ds.classes);
  const std::size_t rec = ds.image_bytes();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u16(ds.labels[i]);
    w.bytes(std::span(ds.pixels).subspan(i * rec, rec));
  }
  return w.take();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.text(4) != std::string_view(kLkdsMagic, 4))
    throw FormatError("not an LKDS file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kLkdsVersion) throw FormatError("unsupported LKDS version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  Dataset ds;
  ds.channels = r.u16();
  ds.height = r.u16();
  ds.width = r.u16();
  ds.classes = r.u16();
  const std::size_t rec = ds.image_bytes();
  if (r.remaining() < static_cast<std::uint64_t>(n) * (rec + 2))
    throw LengthError("LKDS header claims " + std::to_string(n) + " records of " + std::to_string(rec + 2) +
                      " bytes but only " + std::to_string(r.remaining()) + " bytes follow");
  ds.labels.reserve(n);
  ds.pixels.reserve(static_cast<std::size_t>(n) * rec);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels.push_back(r.u16());
    auto px = r.bytes(rec);
    ds.pixels.insert(ds.pixels.end(), px.begin(), px.end());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after LKDS payload");
  ds.validate();
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

struct BlobPair {
  double x1, y1, x2, y2;
};

// Two Gaussian blobs, one per channel, at least S/2 apart. The label is the
// quadrant of blob 2 seen from blob 1: bit 0 set when it lies to the left,
// bit 1 when it lies above. With classes=2 only the left/right bit is used.
inline Dataset gen_longrange(std::uint64_t seed, std::size_t n, std::size_t S, std::size_t classes = 4,
                             std::vector<BlobPair>* centers = nullptr) {
  if (S < 32) throw ContractError("gen_longrange needs S >= 32, got " + std::to_string(S));
  if (classes != 2 && classes != 4) throw ContractError("gen_longrange supports 2 or 4 classes");
  if (S > 65535) throw ContractError("image size does not fit the LKDS header");
  Dataset ds;
  ds.channels = 2;
  ds.height = ds.width = static_cast<std::uint16_t>(S);
  ds.classes = static_cast<std::uint16_t>(classes);
  ds.labels.reserve(n);
  ds.pixels.resize(n * ds.image_bytes());
  if (centers) centers->clear();

  Rng rng(derive_seed(seed, 0x626c6f62));
  const double s = static_cast<double>(S);
  const double sigma = s / 16.0, lo = s / 8.0, hi = s - s / 8.0, min_dist = s / 2.0;
  std::vector<double> gx(S), gy(S);
  for (std::size_t i = 0; i < n; ++i) {
    BlobPair b{};
    do {
      b.x1 = rng.uniform(lo, hi);
      b.y1 = rng.uniform(lo, hi);
      b.x2 = rng.uniform(lo, hi);
      b.y2 = rng.uniform(lo, hi);
    } while (std::hypot(b.x2 - b.x1, b.y2 - b.y1) < min_dist);
    std::size_t label = b.x2 < b.x1 ? 1 : 0;
    if (classes == 4 && b.y2 < b.y1) label += 2;
    ds.labels.push_back(static_cast<std::uint16_t>(label));
    if (centers) centers->push_back(b);

    std::uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
    for (int blob = 0; blob < 2; ++blob) {
      const double cx = blob == 0 ? b.x1 : b.x2, cy = blob == 0 ? b.y1 : b.y2;
      for (std::size_t u = 0; u < S; ++u) {
        const double du = static_cast<double>(u) + 0.5;
        gx[u] = std::exp(-(du - cx) * (du - cx) / (2 * sigma * sigma));
        gy[u] = std::exp(-(du - cy) * (du - cy) / (2 * sigma * sigma));
      }
      for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c < S; ++c)
          img[(r * S + c) * 2 + static_cast<std::size_t>(blob)] =
              static_cast<std::uint8_t>(std::lround(255.0 * gy[r] * gx[c]));
    }
  }
  return ds;
}

struct SplitIndices {
  std::vector<std::size_t> train, test;
};

inline SplitIndices split_indices(std::size_t n, std::uint64_t seed) {
  if (n < 5) throw ContractError("split_80_20 needs at least 5 samples, got " + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x73706c74));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  const std::size_t n_train = n * 4 / 5;
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  return s;
}

// Subsets skip the N >= classes check, which applies to whole datasets.
inline std::pair<Dataset, Dataset> split_80_20(const Dataset& ds, std::uint64_t seed) {
  auto idx = split_indices(ds.size(), seed);
  auto train = ds.subset(idx.train), test = ds.subset(idx.test);
  train.split_seed = test.split_seed = seed;
  return {std::move(train), std::move(test)};
}

}  // namespace lka
