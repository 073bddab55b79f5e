// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <utility>

#include "cases.hpp"
#include "lka/gradcheck.hpp"
#include "lka/nn.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace lka;
using testutil::probe;
using testutil::random_tensor;
using testutil::values;

TEST(Linear, IdentityWeightPassesInputThrough) {
  Tensor x = random_tensor({2, 3, 4}, 1);
  LinearParams p = LinearParams::zeros(4, 4);
  for (std::size_t i = 0; i < 4; ++i) p.weight.data()[i * 4 + i] = 1.0;
  EXPECT_TRUE(bit_equal(linear(x, p), x));
}

TEST(Linear, AddsBias) {
  LinearParams p{Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, {2, 3})};
  Tensor y = linear(Tensor({1, 2}, {1, 1}), p);
  EXPECT_EQ(values(y), (std::vector<double>{3, 4}));
}

TEST(Linear, MatchesTripleLoop) {
  Tensor x = random_tensor({5, 4}, 0);
  auto p = cases::rand_linear(4, 2, 0);
  auto ref = oracle::linear(values(x), values(p.weight), values(p.bias), 5, 4, 2);
  EXPECT_LE(cases::max_abs_diff(linear(x, p), ref), 1e-12);
}

TEST(Linear, RejectsExtentMismatch) {
  EXPECT_THROW(linear(Tensor::zeros({2, 3}), LinearParams::zeros(4, 2)), DimensionError);
}

TEST(DwConv, OnesKernelCountsValidTaps) {
  DwConvParams p = DwConvParams::zeros(1, 3);
  for (auto& w : p.weight.data()) w = 1.0;
  Tensor y = dwconv2d(Tensor::full({1, 1, 3, 3}, 1.0), p);
  EXPECT_EQ(y[4], 9.0);  // center
  EXPECT_EQ(y[0], 4.0);  // corner
  EXPECT_EQ(y[1], 6.0);  // edge
}

TEST(DwConv, EvenKernelIsConfigError) { EXPECT_THROW(DwConvParams::zeros(2, 4), ConfigError); }

TEST(DwConv, PreservesSpatialShape) {
  auto p = cases::rand_conv(3, 7, 2, 5);
  Tensor y = dwconv2d(random_tensor({2, 3, 4, 6}, 4), p);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 4, 6}));
}

TEST(DwConv, MatchesQuintupleLoop) {
  Tensor x = random_tensor({1, 2, 5, 5}, 0);
  auto p = cases::rand_conv(2, 7, 1, 1);
  auto ref = oracle::dwconv(values(x), values(p.weight), values(p.bias), 1, 2, 5, 5, 7, 1);
  EXPECT_LE(cases::max_abs_diff(dwconv2d(x, p), ref), 1e-12);
}

// Input-gradient support of one output pixel, as (row, col) offsets.
static std::set<std::pair<long, long>> taps(std::size_t k, std::size_t dil, std::size_t H, std::size_t W, long r,
                                            long c) {
  Tensor x = random_tensor({1, 1, H, W}, 3, -1, 1, true);
  auto p = cases::rand_conv(1, k, dil, 7);
  for (auto& w : p.weight.data())
    if (w == 0.0) w = 0.25;
  Tensor y = dwconv2d(x, p);
  backward(sum(narrow(narrow(y, 2, static_cast<std::size_t>(r), 1), 3, static_cast<std::size_t>(c), 1)));
  std::set<std::pair<long, long>> out;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      if (x.grad()[i * W + j] != 0.0) out.insert({static_cast<long>(i) - r, static_cast<long>(j) - c});
  return out;
}

TEST(DwConv, DilatedThreeByThreeFootprint) {
  auto t = taps(3, 3, 11, 11, 5, 5);
  std::set<std::pair<long, long>> expected;
  for (long u : {-3, 0, 3})
    for (long v : {-3, 0, 3}) expected.insert({u, v});
  EXPECT_EQ(t, expected);
}

class TapCount : public ::testing::TestWithParam<std::pair<std::size_t, std::size_t>> {};

TEST_P(TapCount, InteriorPixelHasKSquaredTaps) {
  const auto [k, dil] = GetParam();
  const long reach = static_cast<long>(dil * (k - 1) / 2);
  const std::size_t side = static_cast<std::size_t>(2 * reach + 3);
  auto t = taps(k, dil, side, side, reach + 1, reach + 1);
  EXPECT_EQ(t.size(), k * k);
  for (auto [u, v] : t) {
    EXPECT_EQ(u % static_cast<long>(dil), 0);
    EXPECT_EQ(v % static_cast<long>(dil), 0);
    EXPECT_LE(std::abs(u), reach);
    EXPECT_LE(std::abs(v), reach);
  }
}

INSTANTIATE_TEST_SUITE_P(KernelsAndDilations, TapCount,
                         ::testing::Values(std::pair<std::size_t, std::size_t>{1, 1}, std::pair<std::size_t, std::size_t>{3, 1},
                                           std::pair<std::size_t, std::size_t>{3, 2}, std::pair<std::size_t, std::size_t>{5, 1},
                                           std::pair<std::size_t, std::size_t>{7, 1}, std::pair<std::size_t, std::size_t>{5, 3}));

TEST(DwConv, BorderClipsTaps) {
  auto t = taps(3, 1, 4, 4, 0, 0);
  EXPECT_EQ(t.size(), 4u);
}

TEST(DwConv, NeverMixesChannels) {
  Tensor x = random_tensor({1, 3, 5, 5}, 8, -1, 1, true);
  auto p = cases::rand_conv(3, 5, 1, 9);
  Tensor y = dwconv2d(x, p);
  backward(sum(narrow(y, 1, 1, 1)));  // output channel 1 only
  for (std::size_t c : {0u, 2u})
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(x.grad()[c * 25 + i], 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < 25; ++i) mass += std::abs(x.grad()[25 + i]);
  EXPECT_GT(mass, 0.0);
}

TEST(Gelu, KnownValues) {
  Tensor y = gelu(Tensor({3}, {0.0, 1.0, -1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.841345, 1e-6);
  EXPECT_NEAR(y[2], -0.158655, 1e-6);
}

TEST(Gelu, MatchesErfSeries) {
  Tensor x = random_tensor({50}, 2, -3, 3);
  Tensor y = gelu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], oracle::gelu(x[i]), 1e-14);
}

TEST(LayerNorm, StandardizesToken) {
  Tensor y = layernorm(Tensor({1, 3}, {1, 2, 3}), LayerNormParams::identity(3));
  const double mean = (y[0] + y[1] + y[2]) / 3;
  const double var = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3 - mean * mean;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 2e-5);  // eps shrinks the variance slightly
}

TEST(LayerNorm, ConstantTokenGivesBeta) {
  auto p = LayerNormParams::identity(3);
  p.beta = Tensor({3}, {0.5, -1, 2});
  Tensor y = layernorm(Tensor({1, 3}, {5, 5, 5}), p);
  EXPECT_EQ(values(y), values(p.beta));
}

TEST(LayerNorm, RejectsBadEpsilon) { EXPECT_THROW(LayerNormParams::identity(4, 0.0), ConfigError); }

class LayerNormProperty : public ::testing::TestWithParam<int> {};

// Output variance is var/(var+eps), so the 1e-6 band needs var >= eps·1e6:
// spread tokens at eps=1e-5, and any tokens at a smaller eps.
TEST_P(LayerNormProperty, NonConstantTokensAreStandardized) {
  const std::size_t d = 8 + static_cast<std::size_t>(GetParam()) * 4;
  for (auto [range, eps] : {std::pair{20.0, 1e-5}, std::pair{1.0, 1e-9}}) {
    Tensor x = random_tensor({6, d}, static_cast<std::uint64_t>(GetParam()) + 40, -range, range);
    Tensor y = layernorm(x, LayerNormParams::identity(d, eps));
    for (std::size_t r = 0; r < 6; ++r) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += y[r * d + j];
      mu /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) var += (y[r * d + j] - mu) * (y[r * d + j] - mu);
      var /= static_cast<double>(d);
      EXPECT_LE(std::abs(mu), 1e-9);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Widths, LayerNormProperty, ::testing::Range(0, 6));

TEST(LayerNorm, MatchesScalarLoop) {
  Tensor x = random_tensor({2, 3, 8}, 0, -2, 2);
  auto p = cases::rand_ln(8, 1);
  EXPECT_LE(cases::max_abs_diff(layernorm(x, p), oracle::layernorm(values(x), values(p.gamma), values(p.beta), 6, 8,
                                                                    p.eps)),
            1e-12);
}

TEST(Msa, AttentionRowsSumToOne) {
  Tensor a = attention_weights(random_tensor({2, 5, 6}, 1), cases::rand_msa(6, 3, 2));
  ASSERT_EQ(a.shape(), (Shape{2, 3, 5, 5}));
  for (std::size_t r = 0; r < a.numel() / 5; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += a[r * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Msa, SingleTokenAttendsToItself) {
  Tensor x = random_tensor({1, 1, 4}, 3);
  auto p = cases::rand_msa(4, 2, 4);
  Tensor a = attention_weights(x, p);
  for (double v : a.data()) EXPECT_EQ(v, 1.0);
  Tensor expected = linear(linear(x, p.value), p.proj);
  EXPECT_LE(cases::max_abs_diff(msa(x, p), values(expected)), 1e-15);
}

TEST(Msa, MatchesScalarLoop) {
  Tensor x = random_tensor({1, 4, 4}, 0);
  auto p = cases::rand_msa(4, 2, 1);
  auto ref = oracle::msa(values(x), cases::lin(p.query), cases::lin(p.key), cases::lin(p.value), cases::lin(p.proj), 1, 4,
                         4, 2);
  EXPECT_LE(cases::max_abs_diff(msa(x, p), ref), 1e-12);
}

TEST(Msa, IndivisibleHeadsIsConfigError) {
  EXPECT_THROW(MsaParams::zeros(6, 4), ConfigError);
  auto p = cases::rand_msa(6, 2, 1);
  p.heads = 4;
  EXPECT_THROW(msa(random_tensor({1, 2, 6}, 1), p), ConfigError);
}

TEST(Mlp, ZeroWeightsGiveBiasChain) {
  auto p = MlpParams::zeros(3, 2);
  p.fc1.bias = Tensor({6}, {1, -1, 0.5, 0, 2, -2});
  p.fc2.bias = Tensor({3}, {0.1, 0.2, 0.3});
  Tensor y = mlp(random_tensor({1, 2, 3}, 5), p);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[t * 3 + j], p.fc2.bias[j]);
}

TEST(Mlp, ParameterCount) { EXPECT_EQ(MlpParams::zeros(4, 4).numel(), 148u); }

TEST(Mlp, MatchesComposedOracles) {
  Tensor x = random_tensor({2, 3, 4}, 0);
  auto p = cases::rand_mlp(4, 2, 1);
  auto ref = oracle::mlp(values(x), cases::lin(p.fc1), cases::lin(p.fc2), 6, 4, 8);
  EXPECT_LE(cases::max_abs_diff(mlp(x, p), ref), 1e-12);
}

TEST(Layout, PermuteKeepingLastAxisMatchesIndexFormula) {
  Tensor x = random_tensor({2, 3, 4, 5}, 11);
  Tensor y = permute(x, {0, 2, 1, 3});
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 5}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t e = 0; e < 5; ++e)
          EXPECT_EQ(y[((a * 4 + b) * 3 + c) * 5 + e], x[((a * 3 + c) * 4 + b) * 5 + e]);
}

TEST(Layout, PermuteGradientsBothPaths) {
  Tensor x = random_tensor({2, 3, 4}, 12);
  EXPECT_LE(finite_diff_check([](const Tensor& t) { return probe(permute(t, {1, 0, 2})); }, x, 1e-5), 1e-8);
  EXPECT_LE(finite_diff_check([](const Tensor& t) { return probe(permute(t, {2, 0, 1})); }, x, 1e-5), 1e-8);
}

// Every layer, adapter recipe and placement against central differences.
class LayerGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LayerGradients, WithinTolerance) {
  static const auto all = cases::all_gradient_cases();
  const auto& c = all.at(GetParam());
  SCOPED_TRACE(c.name);
  EXPECT_LE(c.run(), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Cases, LayerGradients, ::testing::Range<std::size_t>(0, cases::all_gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           std::string n = cases::all_gradient_cases()[info.param].name;
                           for (auto& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });

class OracleEquivalence : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OracleEquivalence, WithinTolerance) {
  static const auto all = cases::oracle_cases();
  const auto& c = all.at(GetParam());
  SCOPED_TRACE(c.name);
  EXPECT_LE(c.run(), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Cases, OracleEquivalence, ::testing::Range<std::size_t>(0, cases::oracle_cases().size()));
