// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op computes its forward value eagerly and,
// when an input is tracked, records the vector-Jacobian product on the tape.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lka/tensor.hpp"

namespace lka {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

inline ConstMat cmat(std::span<const double> s, std::size_t r, std::size_t c) {
  return ConstMat(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMat mmat(std::span<double> s, std::size_t r, std::size_t c) {
  return MutMat(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void accumulate(Tensor t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// C[m,p] = A[m,n] · B[n,p]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const auto m = a.dim(0), n = a.dim(1), p = b.dim(1);
  Tensor out = Tensor::uninitialized({m, p});
  detail::mmat(out.data(), m, p).noalias() = detail::cmat(a.data(), m, n) * detail::cmat(b.data(), n, p);
  detail::record(out, detail::any_tracked({&a, &b}), [a, b, m, n, p](std::span<const double> g) mutable {
    auto dc = detail::cmat(g, m, p);
    if (a.requires_grad())
      detail::mmat(a.grad_buffer(), m, n).noalias() += dc * detail::cmat(b.data(), n, p).transpose();
    if (b.requires_grad())
      detail::mmat(b.grad_buffer(), n, p).noalias() += detail::cmat(a.data(), m, n).transpose() * dc;
  });
  return out;
}

// Batched product: [N,m,n] · [N,n,p] -> [N,m,p]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const auto batch = a.dim(0), m = a.dim(1), n = a.dim(2), p = b.dim(2);
  Tensor out = Tensor::uninitialized({batch, m, p});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::mmat(out.data().subspan(i * m * p, m * p), m, p).noalias() =
        detail::cmat(a.data().subspan(i * m * n, m * n), m, n) *
        detail::cmat(b.data().subspan(i * n * p, n * p), n, p);
  }
  detail::record(out, detail::any_tracked({&a, &b}),
                 [a, b, batch, m, n, p](std::span<const double> g) mutable {
                   for (std::size_t i = 0; i < batch; ++i) {
                     auto dc = detail::cmat(g.subspan(i * m * p, m * p), m, p);
                     if (a.requires_grad())
                       detail::mmat(a.grad_buffer().subspan(i * m * n, m * n), m, n).noalias() +=
                           dc * detail::cmat(b.data().subspan(i * n * p, n * p), n, p).transpose();
                     if (b.requires_grad())
                       detail::mmat(b.grad_buffer().subspan(i * n * p, n * p), n, p).noalias() +=
                           detail::cmat(a.data().subspan(i * m * n, m * n), m, n).transpose() * dc;
                   }
                 });
  return out;
}

// y = x·W + b over the last axis of x; W is [in,out], b is [out].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(1))
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  const auto in = w.dim(0), outd = w.dim(1), rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = outd;
  Tensor out = Tensor::uninitialized(os);
  auto y = detail::mmat(out.data(), rows, outd);
  y.noalias() = detail::cmat(x.data(), rows, in) * detail::cmat(w.data(), in, outd);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), static_cast<Eigen::Index>(outd));
  detail::record(out, detail::any_tracked({&x, &w, &b}),
                 [x, w, b, in, outd, rows](std::span<const double> g) mutable {
                   auto dy = detail::cmat(g, rows, outd);
                   if (x.requires_grad())
                     detail::mmat(x.grad_buffer(), rows, in).noalias() +=
                         dy * detail::cmat(w.data(), in, outd).transpose();
                   if (w.requires_grad())
                     detail::mmat(w.grad_buffer(), in, outd).noalias() +=
                         detail::cmat(x.data(), rows, in).transpose() * dy;
                   if (b.requires_grad())
                     Eigen::Map<Eigen::RowVectorXd>(b.grad_buffer().data(), static_cast<Eigen::Index>(outd)) +=
                         dy.colwise().sum();
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.clone();
  auto o = out.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
  detail::record(out, detail::any_tracked({&a, &b}), [a, b](std::span<const double> g) {
    detail::accumulate(a, g);
    detail::accumulate(b, g);
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.clone();
  auto o = out.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= y[i];
  detail::record(out, detail::any_tracked({&a, &b}), [a, b](std::span<const double> g) mutable {
    detail::accumulate(a, g);
    if (b.requires_grad()) {
      auto d = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.clone();
  auto o = out.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= y[i];
  detail::record(out, detail::any_tracked({&a, &b}), [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto d = a.grad_buffer();
      auto v = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * v[i];
    }
    if (b.requires_grad()) {
      auto d = b.grad_buffer();
      auto v = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * v[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a.clone();
  for (auto& v : out.data()) v *= s;
  detail::record(out, detail::any_tracked({&a}), [a, s](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
  return out;
}

// x + y where y's shape is a trailing suffix of x's shape (bias, position table).
inline Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin()))
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const auto period = y.numel();
  Tensor out = x.clone();
  auto o = out.data();
  auto v = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i % period];
  detail::record(out, detail::any_tracked({&x, &y}), [x, y, period](std::span<const double> g) mutable {
    detail::accumulate(x, g);
    if (y.requires_grad()) {
      auto d = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i % period] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record(out, detail::any_tracked({&a}), [a](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (auto& v : d) v += g[0];
  });
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Mean over one axis; the axis is removed from the result.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw DimensionError("mean_axis: axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const auto n = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor out = Tensor::zeros(os);
  auto o = out.data();
  auto x = a.data();
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t p = 0; p < outer; ++p)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t q = 0; q < inner; ++q) o[p * inner + q] += x[(p * n + k) * inner + q];
  for (auto& v : o) v *= inv;
  detail::record(out, detail::any_tracked({&a}), [a, outer, inner, n, inv](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (std::size_t p = 0; p < outer; ++p)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t q = 0; q < inner; ++q) d[(p * n + k) * inner + q] += g[p * inner + q] * inv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), Buffer(a.data().begin(), a.data().end()));
  detail::record(out, detail::any_tracked({&a}), [a](std::span<const double> g) { detail::accumulate(a, g); });
  return out;
}

// out.shape[i] = in.shape[perm[i]]
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: rank mismatch for " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  Shape os(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || seen[perm[i]]) throw DimensionError("permute: invalid permutation");
    seen[perm[i]] = true;
    os[i] = s[perm[i]];
  }
  const auto in_st = detail::strides_of(s);
  std::vector<std::size_t> src_st(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_st[i] = in_st[perm[i]];

  // When the last axis stays in place, whole rows move together; the offsets
  // then index rows of `run` contiguous elements instead of single values.
  const std::size_t run = perm.back() == s.size() - 1 ? s.back() : 1;
  const std::size_t outer_rank = run > 1 ? os.size() - 1 : os.size();
  const std::size_t blocks = a.numel() / run;
  auto offsets = std::make_shared<std::vector<std::size_t>>(blocks);
  std::vector<std::size_t> idx(outer_rank, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < blocks; ++flat) {
    (*offsets)[flat] = off;
    for (std::size_t d = outer_rank; d-- > 0;) {
      ++idx[d];
      off += src_st[d];
      if (idx[d] < os[d]) break;
      off -= src_st[d] * os[d];
      idx[d] = 0;
    }
  }
  Tensor out = Tensor::uninitialized(os);
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < blocks; ++i)
    std::copy_n(x.data() + (*offsets)[i], run, o.data() + i * run);
  detail::record(out, detail::any_tracked({&a}), [a, offsets, run, blocks](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (std::size_t i = 0; i < blocks; ++i) {
      double* dst = d.data() + (*offsets)[i];
      const double* src = g.data() + i * run;
      for (std::size_t j = 0; j < run; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// Slice [start, start+len) along `axis`.
inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& s = a.shape();
  if (axis >= s.size() || len == 0 || start + len > s[axis])
    throw DimensionError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const auto n = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor out = Tensor::uninitialized(os);
  auto o = out.data();
  auto x = a.data();
  for (std::size_t p = 0; p < outer; ++p)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((p * n + start) * inner), len * inner,
                o.begin() + static_cast<std::ptrdiff_t>(p * len * inner));
  detail::record(out, detail::any_tracked({&a}), [a, outer, inner, n, start, len](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (std::size_t p = 0; p < outer; ++p)
      for (std::size_t q = 0; q < len * inner; ++q) d[(p * n + start) * inner + q] += g[p * len * inner + q];
  });
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  bool tracked = false;
  for (const auto& t : parts) {
    const auto& s = t.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    total += s[axis];
    tracked = tracked || detail::any_tracked({&t});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape os = s0;
  os[axis] = total;
  Tensor out = Tensor::uninitialized(os);
  auto o = out.data();
  std::size_t at = 0;
  for (const auto& t : parts) {
    const auto n = t.dim(axis);
    auto x = t.data();
    for (std::size_t p = 0; p < outer; ++p)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(p * n * inner), n * inner,
                  o.begin() + static_cast<std::ptrdiff_t>((p * total + at) * inner));
    at += n;
  }
  detail::record(out, tracked, [parts, axis, outer, inner, total](std::span<const double> g) mutable {
    std::size_t at = 0;
    for (auto& t : parts) {
      const auto n = t.dim(axis);
      if (t.requires_grad()) {
        auto d = t.grad_buffer();
        for (std::size_t p = 0; p < outer; ++p)
          for (std::size_t q = 0; q < n * inner; ++q) d[p * n * inner + q] += g[(p * total + at) * inner + q];
      }
      at += n;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Exact GeLU: x·Φ(x) with Φ the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
  Tensor out = a.clone();
  const bool tracked = detail::any_tracked({&a});
  auto slope = std::make_shared<Buffer>(tracked ? a.numel() : 0);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = o[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    o[i] = x * cdf;
    if (tracked) (*slope)[i] = cdf + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  }
  detail::record(out, tracked, [a, slope](std::span<const double> g) mutable {
    auto d = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*slope)[i];
  });
  return out;
}

// Softmax over the last axis, max-shifted.
inline Tensor softmax_last(const Tensor& a) {
  const auto n = a.shape().back();
  const auto rows = a.numel() / n;
  Tensor out = a.clone();
  auto y = detail::mmat(out.data(), rows, n);
  const Eigen::VectorXd mx = y.rowwise().maxCoeff();
  y.colwise() -= mx;
  y = y.array().exp().matrix();
  const Eigen::VectorXd z = y.rowwise().sum();
  y.array().colwise() /= z.array();
  auto yh = out.handle();
  detail::record(out, detail::any_tracked({&a}), [a, yh, n, rows](std::span<const double> g) mutable {
    auto p = detail::cmat(yh->data, rows, n);
    auto dy = detail::cmat(g, rows, n);
    Eigen::VectorXd dot = (dy.array() * p.array()).rowwise().sum();
    detail::mmat(a.grad_buffer(), rows, n).array() += p.array() * (dy.array().colwise() - dot.array());
  });
  return out;
}

// Per-row normalization over the last axis (population variance), then gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()));
  const auto rows = x.numel() / d;
  Tensor out = Tensor::uninitialized(x.shape());
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(rows);
  auto xs = x.data();
  auto o = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xs[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xs[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xs[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      o[r * d + j] = h * gm[j] + bt[j];
    }
  }
  detail::record(out, detail::any_tracked({&x, &gamma, &beta}),
                 [x, gamma, beta, xhat, inv_std, d, rows](std::span<const double> g) mutable {
                   auto gm = gamma.data();
                   if (gamma.requires_grad() || beta.requires_grad()) {
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) {
                         if (gamma.requires_grad()) gamma.grad_buffer()[j] += g[r * d + j] * (*xhat)[r * d + j];
                         if (beta.requires_grad()) beta.grad_buffer()[j] += g[r * d + j];
                       }
                   }
                   if (!x.requires_grad()) return;
                   auto dx = x.grad_buffer();
                   const double invd = 1.0 / static_cast<double>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dh = g[r * d + j] * gm[j];
                       m1 += dh;
                       m2 += dh * (*xhat)[r * d + j];
                     }
                     m1 *= invd;
                     m2 *= invd;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dh = g[r * d + j] * gm[j];
                       dx[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Depthwise convolution
// ---------------------------------------------------------------------------

// Per-channel cross-correlation, stride 1, zero "same" padding of
// (k-1)·dilation/2. x: [B,C,H,W], weight: [C,k,k], bias: [C].
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t dilation) {
  if (x.rank() != 4) throw DimensionError("dwconv2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (weight.rank() != 3 || weight.dim(1) != weight.dim(2))
    throw DimensionError("dwconv2d: weight must be [C,k,k], got " + shape_str(weight.shape()));
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = weight.dim(1);
  if (k % 2 == 0) throw ConfigError("dwconv2d: kernel size must be odd, got " + std::to_string(k));
  if (dilation == 0) throw ConfigError("dwconv2d: dilation must be >= 1");
  if (weight.dim(0) != C || bias.numel() != C)
    throw DimensionError("dwconv2d: " + std::to_string(C) + " input channels vs weight " +
                         shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));

  // Tap (u,v) reads x at offset (du,dv); `Tap` holds the output window where
  // that read stays inside the image.
  struct Tap {
    std::size_t widx, i0, i1, j0, j1;
    std::ptrdiff_t du, dv;
  };
  std::vector<Tap> taps;
  const auto r = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  for (std::size_t u = 0; u < k; ++u)
    for (std::size_t v = 0; v < k; ++v) {
      const auto du = (static_cast<std::ptrdiff_t>(u) - r) * static_cast<std::ptrdiff_t>(dilation);
      const auto dv = (static_cast<std::ptrdiff_t>(v) - r) * static_cast<std::ptrdiff_t>(dilation);
      const auto i0 = std::max<std::ptrdiff_t>(0, -du), i1 = std::min(Hs, Hs - du);
      const auto j0 = std::max<std::ptrdiff_t>(0, -dv), j1 = std::min(Ws, Ws - dv);
      if (i0 >= i1 || j0 >= j1) continue;
      taps.push_back({u * k + v, static_cast<std::size_t>(i0), static_cast<std::size_t>(i1),
                      static_cast<std::size_t>(j0), static_cast<std::size_t>(j1), du, dv});
    }

  Tensor out = Tensor::uninitialized(x.shape());
  {
    auto o = out.data();
    auto xs = x.data();
    auto ws = weight.data();
    auto bs = bias.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const auto plane = (b * C + c) * H * W;
        double* op = &o[plane];
        const double* xp = &xs[plane];
        std::fill(op, op + H * W, bs[c]);
        for (const auto& t : taps) {
          const double w = ws[c * k * k + t.widx];
          for (std::size_t i = t.i0; i < t.i1; ++i) {
            const double* src = xp + static_cast<std::ptrdiff_t>(i * W) + t.du * Ws + t.dv;
            double* dst = op + i * W;
            for (std::size_t j = t.j0; j < t.j1; ++j) dst[j] += w * src[j];
          }
        }
      }
  }
  detail::record(out, detail::any_tracked({&x, &weight, &bias}),
                 [x, weight, bias, taps, B, C, H, W, k, Ws](std::span<const double> g) mutable {
                   auto xs = x.data();
                   auto ws = weight.data();
                   std::span<double> dx, dw, db;
                   if (x.requires_grad()) dx = x.grad_buffer();
                   if (weight.requires_grad()) dw = weight.grad_buffer();
                   if (bias.requires_grad()) db = bias.grad_buffer();
                   for (std::size_t b = 0; b < B; ++b)
                     for (std::size_t c = 0; c < C; ++c) {
                       const auto plane = (b * C + c) * H * W;
                       const double* gp = &g[plane];
                       if (!db.empty())
                         for (std::size_t i = 0; i < H * W; ++i) db[c] += gp[i];
                       for (const auto& t : taps) {
                         const auto wi = c * k * k + t.widx;
                         const auto shift = t.du * Ws + t.dv;
                         double acc = 0.0;
                         for (std::size_t i = t.i0; i < t.i1; ++i) {
                           const double* gr = gp + i * W;
                           const auto base = static_cast<std::ptrdiff_t>(plane + i * W) + shift;
                           if (!dx.empty()) {
                             double* dr = &dx[static_cast<std::size_t>(base)];
                             const double w = ws[wi];
                             for (std::size_t j = t.j0; j < t.j1; ++j) dr[j] += w * gr[j];
                           }
                           if (!dw.empty()) {
                             const double* xr = &xs[static_cast<std::size_t>(base)];
                             for (std::size_t j = t.j0; j < t.j1; ++j) acc += xr[j] * gr[j];
                           }
                         }
                         if (!dw.empty()) dw[wi] += acc;
                       }
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean cross-entropy of raw logits [B,K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const auto B = logits.dim(0), K = logits.dim(1);
  auto z = logits.data();
  auto probs = std::make_shared<Buffer>(B * K);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw ValidationError("cross_entropy: label out of range");
    const double mx = *std::max_element(z.begin() + static_cast<std::ptrdiff_t>(b * K),
                                        z.begin() + static_cast<std::ptrdiff_t>((b + 1) * K));
    double s = 0.0;
    for (std::size_t c = 0; c < K; ++c) s += ((*probs)[b * K + c] = std::exp(z[b * K + c] - mx));
    for (std::size_t c = 0; c < K; ++c) (*probs)[b * K + c] /= s;
    loss += (mx + std::log(s)) - z[b * K + labels[b]];
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(B));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  detail::record(out, detail::any_tracked({&logits}), [logits, probs, lab, B, K](std::span<const double> g) mutable {
    auto d = logits.grad_buffer();
    const double s = g[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < K; ++c)
        d[b * K + c] += s * ((*probs)[b * K + c] - (c == lab[b] ? 1.0 : 0.0));
  });
  return out;
}

}  // namespace lka
