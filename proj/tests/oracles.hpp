// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop reference implementations. They work on plain vectors and never
// touch the tape, Eigen, or the library's layout helpers.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

// erf by its Maclaurin series; accurate to ~1e-15 for |z| <= 3.
inline double erf_series(double z) {
  double term = z, sum = z;
  for (int n = 1; n < 80; ++n) {
    term *= -z * z / n;
    sum += term / (2 * n + 1);
  }
  return 2.0 / std::sqrt(std::numbers::pi) * sum;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + erf_series(x / std::numbers::sqrt2)); }

// [m,n]·[n,p]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t n, std::size_t p) {
  Vec c(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += a[i * n + k] * b[k * p + j];
      c[i * p + j] = s;
    }
  return c;
}

// rows of x[rows,in] times w[in,out] plus b[out]
inline Vec linear(const Vec& x, const Vec& w, const Vec& b, std::size_t rows, std::size_t in, std::size_t out) {
  Vec y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

// x[B,C,H,W], w[C,k,k], b[C]; zero padding, stride 1, dilation `dil`.
inline Vec dwconv(const Vec& x, const Vec& w, const Vec& b, std::size_t B, std::size_t C, std::size_t H,
                  std::size_t W, std::size_t k, std::size_t dil) {
  Vec y(B * C * H * W);
  const long r = static_cast<long>(k / 2);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (long i = 0; i < static_cast<long>(H); ++i)
        for (long j = 0; j < static_cast<long>(W); ++j) {
          double s = b[c];
          for (long u = -r; u <= r; ++u)
            for (long v = -r; v <= r; ++v) {
              const long ii = i + u * static_cast<long>(dil), jj = j + v * static_cast<long>(dil);
              if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
              s += w[(c * k + static_cast<std::size_t>(u + r)) * k + static_cast<std::size_t>(v + r)] *
                   x[((n * C + c) * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)];
            }
          y[((n * C + c) * H + static_cast<std::size_t>(i)) * W + static_cast<std::size_t>(j)] = s;
        }
  return y;
}

inline Vec layernorm(const Vec& x, const Vec& g, const Vec& b, std::size_t rows, std::size_t d, double eps) {
  Vec y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
    var /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (x[r * d + j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

struct Lin {
  Vec w, b;
};

// x[B,T,d]; per-head softmax attention with 1/sqrt(hd) scaling.
inline Vec msa(const Vec& x, const Lin& q, const Lin& k, const Lin& v, const Lin& o, std::size_t B, std::size_t T,
               std::size_t d, std::size_t heads) {
  const std::size_t hd = d / heads;
  Vec Q = linear(x, q.w, q.b, B * T, d, d), K = linear(x, k.w, k.b, B * T, d, d), V = linear(x, v.w, v.b, B * T, d, d);
  Vec ctx(B * T * d, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        Vec s(T);
        double mx = -1e300;
        for (std::size_t j = 0; j < T; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += Q[(n * T + i) * d + h * hd + e] * K[(n * T + j) * d + h * hd + e];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t e = 0; e < hd; ++e) ctx[(n * T + i) * d + h * hd + e] += s[j] / z * V[(n * T + j) * d + h * hd + e];
      }
  return linear(ctx, o.w, o.b, B * T, d, d);
}

inline Vec mlp(const Vec& x, const Lin& fc1, const Lin& fc2, std::size_t rows, std::size_t d, std::size_t hidden) {
  Vec h = linear(x, fc1.w, fc1.b, rows, d, hidden);
  for (auto& e : h) e = gelu(e);
  return linear(h, fc2.w, fc2.b, rows, hidden, d);
}

struct Conv {
  Vec w, b;
  std::size_t k, dil;
};

// Adapter on x[B,T,d] with an H×W grid after `cls` leading tokens.
inline Vec adapter(const Vec& x, const Lin& down, const std::vector<Conv>& convs, const Lin& up, std::size_t B,
                   std::size_t T, std::size_t d, std::size_t dh, std::size_t H, std::size_t W, std::size_t cls,
                   bool residual) {
  Vec h = linear(x, down.w, down.b, B * T, d, dh);
  if (!convs.empty()) {
    for (const auto& c : convs) {
      // gather [B,dh,H,W] from token rows
      Vec img(B * dh * H * W);
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t ch = 0; ch < dh; ++ch)
          for (std::size_t t = 0; t < H * W; ++t) img[(n * dh + ch) * H * W + t] = h[(n * T + cls + t) * dh + ch];
      Vec out = dwconv(img, c.w, c.b, B, dh, H, W, c.k, c.dil);
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t ch = 0; ch < dh; ++ch)
          for (std::size_t t = 0; t < H * W; ++t) h[(n * T + cls + t) * dh + ch] = out[(n * dh + ch) * H * W + t];
    }
  }
  for (auto& e : h) e = gelu(e);
  Vec y = linear(h, up.w, up.b, B * T, dh, d);
  if (residual)
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  return y;
}

}  // namespace oracle
