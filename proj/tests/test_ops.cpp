#include <gtest/gtest.h>

#include <cmath>

#include "lmunet/ops.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace lmunet;
using oracle::max_rel_err;

namespace {

const Tensor<double>* const kNone = nullptr;

Tensor<double> t(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

Shape random_spatial(std::mt19937_64& rng, std::size_t rank, std::size_t lo, std::size_t hi) {
  Shape s(rank);
  for (auto& e : s) e = oracle::pick(rng, lo, hi);
  return s;
}

Shape with_channels(std::size_t c, const Shape& spatial) {
  Shape s{c};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

}  // namespace

TEST(Linear, IdentityWeight) {
  auto y = ops::linear(t({2}, {1, 2}), t({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(y.buffer(), (std::vector<double>{1, 2}));
}

TEST(Linear, DotPlusBias) {
  auto b = t({1}, {1});
  auto y = ops::linear(t({2}, {1, 1}), t({1, 2}, {2, 3}), &b);
  EXPECT_DOUBLE_EQ(y.item(), 6.0);
}

TEST(Linear, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rows = oracle::pick(rng, 1, 6), cin = oracle::pick(rng, 1, 7), cout = oracle::pick(rng, 1, 5);
    auto x = oracle::randn({rows, cin}, rng), w = oracle::randn({cout, cin}, rng), b = oracle::randn({cout}, rng);
    EXPECT_LT(max_rel_err(ops::linear(x, w, &b), oracle::linear(x, w, &b)), 1e-6);
  }
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  try {
    ops::linear(Tensor<double>({4, 5}), Tensor<double>({3, 4}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("(4, 5)"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("(3, 4)"), std::string::npos) << e.what();
  }
}

TEST(DwConv, ConstantFieldInteriorIsNineC) {
  Tensor<double> x({1, 5, 5}, 2.5), k({1, 3, 3}, 1.0);
  auto y = ops::dwconv(x, k, kNone, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 5, 5}));
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j) EXPECT_DOUBLE_EQ(y[i * 5 + j], 22.5);
  EXPECT_DOUBLE_EQ(y[0], 10.0);  // corner sees 4 taps
}

TEST(DwConv, DiracKernelIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = oracle::randn({3, 4, 5, 2}, rng);
  Tensor<double> k({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k[c * 27 + 13] = 1;
  EXPECT_EQ(ops::dwconv(x, k, kNone, 1, 1), x);
}

TEST(DwConv, MatchesSlidingWindow) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const auto rank = oracle::pick(rng, 1, 3);
    const auto C = oracle::pick(rng, 1, 3);
    const auto ks = random_spatial(rng, rank, 1, 3);
    Shape sp(rank);
    for (std::size_t d = 0; d < rank; ++d) sp[d] = ks[d] + oracle::pick(rng, 0, 4);
    const auto stride = oracle::pick(rng, 1, 2), pad = oracle::pick(rng, 0, 1);
    auto x = oracle::randn(with_channels(C, sp), rng), k = oracle::randn(with_channels(C, ks), rng);
    auto b = oracle::randn({C}, rng);
    EXPECT_LT(max_rel_err(ops::dwconv(x, k, &b, stride, pad), oracle::conv_generic(x, k, &b, stride, pad, true)),
              1e-6);
  }
}

TEST(DwConv, KernelLargerThanPaddedInput) {
  EXPECT_THROW(ops::dwconv(Tensor<double>({1, 2, 2}), Tensor<double>({1, 5, 5}), kNone, 1, 1), DimensionError);
}

TEST(Conv, MatchesSlidingWindow) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto rank = oracle::pick(rng, 2, 3);
    const auto cin = oracle::pick(rng, 1, 3), cout = oracle::pick(rng, 1, 3);
    const auto sp = random_spatial(rng, rank, 2, 5);
    auto x = oracle::randn(with_channels(cin, sp), rng);
    Shape ws{cout, cin};
    ws.insert(ws.end(), rank, 3);
    auto w = oracle::randn(ws, rng), b = oracle::randn({cout}, rng);
    EXPECT_LT(max_rel_err(ops::conv(x, w, &b, 1), oracle::conv_generic(x, w, &b, 1, 1, false)), 1e-6);
  }
}

TEST(Pointwise, IdentityAndChannelSum) {
  std::mt19937_64 rng(5);
  auto x = oracle::randn({2, 3, 3}, rng);
  EXPECT_EQ(ops::pointwise_conv(x, t({2, 2}, {1, 0, 0, 1})), x);
  auto s = ops::pointwise_conv(x, t({1, 2}, {1, 1}));
  for (std::size_t p = 0; p < 9; ++p) EXPECT_DOUBLE_EQ(s[p], x[p] + x[9 + p]);
}

TEST(Pointwise, MatchesPerSiteLinear) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto cin = oracle::pick(rng, 1, 5), cout = oracle::pick(rng, 1, 5);
    auto x = oracle::randn(with_channels(cin, random_spatial(rng, oracle::pick(rng, 1, 3), 1, 4)), rng);
    auto w = oracle::randn({cout, cin}, rng), b = oracle::randn({cout}, rng);
    EXPECT_LT(max_rel_err(ops::pointwise_conv(x, w, &b), oracle::pointwise(x, w, &b)), 1e-6);
  }
  EXPECT_THROW(ops::pointwise_conv(Tensor<double>({3, 2, 2}), Tensor<double>({2, 2})), DimensionError);
}

TEST(CausalConv, OutputAtTDependsOnlyOnPast) {
  std::mt19937_64 rng(7);
  auto x = oracle::randn({9, 3}, rng), k = oracle::randn({3, 4}, rng);
  auto y = ops::causal_conv1d(x, k, kNone);
  EXPECT_LT(max_rel_err(y, oracle::causal_conv(x, k, nullptr)), 1e-6);
  x[8 * 3 + 1] += 5;  // perturb the last step only
  auto y2 = ops::causal_conv1d(x, k, kNone);
  for (std::size_t i = 0; i < 8 * 3; ++i) EXPECT_EQ(y[i], y2[i]);
}

TEST(LayerNorm, ConstantSliceGivesZeros) {
  Tensor<double> g({4}, 1.0), b({4}, 0.0);
  auto y = ops::layernorm(Tensor<double>({2, 4}, 3.0), g, b, 1e-5);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitSliceUnchanged) {
  Tensor<double> g({2}, 1.0), b({2}, 0.0);
  auto y = ops::layernorm(t({2}, {1, -1}), g, b, 1e-12);
  EXPECT_NEAR(y[0], 1.0, 1e-9);
  EXPECT_NEAR(y[1], -1.0, 1e-9);
}

TEST(LayerNorm, MatchesDirectFormulaAndMoments) {
  std::mt19937_64 rng(8);
  auto x = oracle::randn({3, 8}, rng, 4.0), g = oracle::randn({8}, rng), b = oracle::randn({8}, rng);
  EXPECT_LT(max_rel_err(ops::layernorm(x, g, b, 1e-5), oracle::layernorm(x, g, b, 1e-5)), 1e-6);
  auto y = ops::layernorm(x, Tensor<double>({8}, 1.0), Tensor<double>({8}, 0.0), 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mu += y[r * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y[r * 8 + c] - mu) * (y[r * 8 + c] - mu) / 8;
    EXPECT_LT(std::abs(mu), 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(LayerNorm, NonPositiveEpsilon) {
  Tensor<double> g({2}, 1.0), b({2}, 0.0);
  EXPECT_THROW(ops::layernorm(Tensor<double>({1, 2}), g, b, 0.0), ParameterError);
  EXPECT_THROW(ops::layernorm(Tensor<double>({1, 2}), g, b, -1.0), ParameterError);
}

TEST(Activation, ClosedForms) {
  using ops::Activation;
  EXPECT_EQ(ops::activation(Activation::SiLU, t({1}, {0})).item(), 0.0);
  EXPECT_EQ(ops::activation(Activation::ReLU, t({1}, {-2})).item(), 0.0);
  EXPECT_NEAR(ops::activation(Activation::SiLU, t({1}, {1})).item(), 0.731059, 1e-6);
  auto sm = ops::activation(Activation::SoftmaxChannel, t({2, 1}, {0, 0}));
  EXPECT_DOUBLE_EQ(sm[0], 0.5);
  EXPECT_DOUBLE_EQ(sm[1], 0.5);
}

TEST(Activation, SoftplusIsOverflowSafe) {
  auto y = ops::activation(ops::Activation::Softplus, t({3}, {800, -800, 0}));
  EXPECT_DOUBLE_EQ(y[0], 800.0);
  EXPECT_GE(y[1], 0.0);
  EXPECT_LT(y[1], 1e-300);
  EXPECT_NEAR(y[2], std::log(2.0), 1e-15);
  auto f = ops::activation(ops::Activation::Softplus, Tensor<float>({1}, 100.0f));
  EXPECT_TRUE(std::isfinite(f[0]));
}

TEST(Activation, MatchOracles) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = oracle::randn(with_channels(oracle::pick(rng, 1, 5), random_spatial(rng, 2, 1, 4)), rng, 3.0);
    EXPECT_LT(max_rel_err(ops::activation(ops::Activation::SiLU, x), oracle::map(x, oracle::silu)), 1e-6);
    EXPECT_LT(max_rel_err(ops::activation(ops::Activation::ReLU, x), oracle::map(x, oracle::relu)), 1e-6);
    EXPECT_LT(max_rel_err(ops::activation(ops::Activation::Softplus, x), oracle::map(x, oracle::softplus)), 1e-6);
    auto sm = ops::activation(ops::Activation::SoftmaxChannel, x);
    EXPECT_LT(max_rel_err(sm, oracle::softmax_channel(x)), 1e-6);
    const std::size_t C = x.dim(0), S = x.numel() / C;
    for (std::size_t s = 0; s < S; ++s) {
      double total = 0;
      for (std::size_t c = 0; c < C; ++c) total += sm[c * S + s];
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxRows, RowsSumToOne) {
  std::mt19937_64 rng(10);
  auto x = oracle::randn({4, 7}, rng, 5.0);
  auto y = ops::softmax_rows(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) total += y[r * 7 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(MaxPool, Examples) {
  EXPECT_EQ(ops::maxpool2(t({1, 2, 2}, {1, 2, 3, 4})).item(), 4.0);
  auto c = ops::maxpool2(Tensor<double>({2, 4, 6}, 1.5));
  EXPECT_EQ(c, Tensor<double>({2, 2, 3}, 1.5));
  EXPECT_THROW(ops::maxpool2(Tensor<double>({1, 3, 4})), DimensionError);
}

TEST(MaxPool, MatchesWindowScanExactly) {
  std::mt19937_64 rng(11);
  auto x = oracle::randn({4, 8, 8}, rng);
  EXPECT_EQ(ops::maxpool2(x), oracle::maxpool2(x));
  auto x3 = oracle::randn({2, 4, 6, 2}, rng);
  EXPECT_EQ(ops::maxpool2(x3), oracle::maxpool2(x3));
}

TEST(Upsample, ConstantAndShape) {
  auto y = ops::upsample2x(Tensor<double>({3, 4, 4}, 7.0));
  EXPECT_EQ(y, Tensor<double>({3, 8, 8}, 7.0));
  EXPECT_EQ(ops::upsample2x(Tensor<double>({1, 2, 3, 4})).shape(), (Shape{1, 4, 6, 8}));
}

TEST(Upsample, TwoByTwoFormula) {
  auto x = t({1, 2, 2}, {1, 2, 3, 4});
  auto y = ops::upsample2x(x);
  // first row of the 4x4 output: clamped, 1/4, 3/4, clamped along w; h clamped
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.25);
  EXPECT_DOUBLE_EQ(y[2], 1.75);
  EXPECT_DOUBLE_EQ(y[3], 2.0);
  EXPECT_LT(max_rel_err(y, oracle::upsample2x(x)), 1e-6);
}

TEST(Upsample, MatchesFormulaOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = oracle::randn(with_channels(oracle::pick(rng, 1, 3), random_spatial(rng, oracle::pick(rng, 2, 3), 1, 5)),
                           rng);
    EXPECT_LT(max_rel_err(ops::upsample2x(x), oracle::upsample2x(x)), 1e-6);
  }
}

TEST(Upsample, UnsupportedRank) {
  EXPECT_THROW(ops::upsample2x(Tensor<double>({1, 4})), DimensionError);
  EXPECT_THROW(ops::upsample2x(Tensor<double>({1, 2, 2, 2, 2})), DimensionError);
}

TEST(Elementwise, Examples) {
  std::mt19937_64 rng(13);
  auto x = oracle::randn({3, 4}, rng);
  EXPECT_EQ(ops::hadamard(x, Tensor<double>({3, 4}, 1.0)), x);
  EXPECT_EQ(ops::add(x, Tensor<double>({3, 4}, 0.0)), x);
  auto s = ops::scale_by_channel_vector(t({2, 2}, {1, 2, 3, 4}), t({2}, {10, 100}));
  EXPECT_EQ(s.buffer(), (std::vector<double>{10, 200, 30, 400}));
  auto lead = ops::scale_by_channel_vector(t({2, 2}, {1, 2, 3, 4}), t({2}, {10, 100}), ops::ChannelAxis::Leading);
  EXPECT_EQ(lead.buffer(), (std::vector<double>{10, 20, 300, 400}));
  EXPECT_THROW(ops::add(x, Tensor<double>({4, 3})), DimensionError);
}

TEST(Reshape, FlattenRoundTripAndOrder) {
  std::mt19937_64 rng(14);
  auto x = oracle::randn({2, 2, 2}, rng);
  auto f = ops::flatten_spatial(x);
  EXPECT_EQ(f.shape(), (Shape{4, 2}));
  EXPECT_EQ(ops::unflatten_spatial(f, {2, 2}), x);
  auto big = oracle::randn({3, 4, 5}, rng);
  auto fb = ops::flatten_spatial(big);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t w = 0; w < 5; ++w) EXPECT_EQ(fb[(h * 5 + w) * 3 + c], big[(c * 4 + h) * 5 + w]);
  EXPECT_EQ(ops::flatten_spatial(Tensor<double>({32, 8, 8, 8})).dim(0), 512u);
  EXPECT_THROW(ops::unflatten_spatial(f, {3, 2}), DimensionError);
  EXPECT_EQ(ops::transpose_lc(ops::transpose_lc(f)), f);
}

TEST(Purity, ForwardCallsDoNotMutateInputs) {
  std::mt19937_64 rng(15);
  auto x = oracle::randn({2, 4, 4}, rng), k = oracle::randn({2, 3, 3}, rng);
  const auto xc = x, kc = k;
  (void)ops::dwconv(x, k, kNone, 1, 1);
  (void)ops::maxpool2(x);
  (void)ops::upsample2x(x);
  (void)ops::activation(ops::Activation::SoftmaxChannel, x);
  EXPECT_EQ(x, xc);
  EXPECT_EQ(k, kc);
}

TEST(Oracle, SharedCaseList) {
  std::mt19937_64 rng(77);
  for (auto& c : suite::oracle_cases(1e-12)) {
    double worst = 0;
    for (int i = 0; i < 20; ++i) worst = std::max(worst, c.trial(rng));
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}
