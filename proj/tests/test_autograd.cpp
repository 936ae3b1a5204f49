#include <gtest/gtest.h>

#include "lmunet/autograd.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace lmunet;
using ad::Var;
using Vars = std::vector<Var<double>>;

namespace {

constexpr double kTol = 1e-6;

void expect_fd(const oracle::VarFn& fn, const std::vector<Tensor<double>>& inputs, std::uint64_t seed = 0) {
  auto r = oracle::fd_check(fn, inputs, seed);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.worst, kTol);
}

}  // namespace

TEST(Backward, SquareAtThree) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(3));
  tape.backward(ad::sum(ad::hadamard(x, x)));
  EXPECT_DOUBLE_EQ(x.grad().item(), 6.0);
}

TEST(Backward, SumOfConstantsGivesZeroGrad) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, 1.0));
  auto c = Var<double>::constant(Tensor<double>({3}, 2.0));
  auto zero = Var<double>::constant(Tensor<double>({3}, 0.0));
  tape.backward(ad::sum(ad::add(ad::hadamard(x, zero), c)));
  for (auto g : x.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, LeafWithoutRequiresGradGetsNone) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  auto frozen = tape.leaf(Tensor<double>({2}, 3.0), false);
  tape.backward(ad::sum(ad::hadamard(x, frozen)));
  EXPECT_TRUE(frozen.grad().empty());
  EXPECT_EQ(x.grad().buffer(), (std::vector<double>{3, 3}));
}

TEST(Backward, NonScalarLossIsContractError) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(ad::silu(x)), ContractError);
}

TEST(Backward, ConsumedTapeIsStateError) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  auto loss = ad::sum(x);
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(loss), StateError);
}

TEST(Backward, FanOutAccumulates) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(2));
  auto y = ad::add(ad::hadamard(x, x), x);  // x^2 + x
  tape.backward(ad::sum(y));
  EXPECT_DOUBLE_EQ(x.grad().item(), 5.0);
}

TEST(Backward, InferenceRecordsNothing) {
  auto x = Var<double>::constant(Tensor<double>({2, 3}, 1.0));
  auto w = Var<double>::constant(Tensor<double>({4, 3}, 1.0));
  auto y = ad::linear(x, w);
  EXPECT_EQ(y.tape(), nullptr);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, TapeIsTopological) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2, 2}, 0.5));
  auto w = tape.leaf(Tensor<double>({2, 2}, 0.1));
  auto y = ad::sum(ad::silu(ad::linear(x, w)));
  ASSERT_EQ(tape.size(), 3u);
  EXPECT_EQ(tape.records()[0].op, "linear");
  EXPECT_EQ(tape.records()[2].output, y.node());
}

// ---- finite-difference checks -------------------------------------------------

TEST(Grad, SumSiluLinear) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    const auto r = oracle::pick(rng, 1, 5), ci = oracle::pick(rng, 1, 6), co = oracle::pick(rng, 1, 6);
    expect_fd([](const Vars& v) { return ad::sum(ad::silu(ad::linear(v[0], v[1], v[2]))); },
              {oracle::randn({r, ci}, rng), oracle::randn({co, ci}, rng), oracle::randn({co}, rng)}, trial);
  }
}

TEST(Grad, DwConv) {
  std::mt19937_64 rng(21);
  for (std::size_t rank = 1; rank <= 3; ++rank) {
    Shape xs{2}, ks{2};
    for (std::size_t d = 0; d < rank; ++d) {
      xs.push_back(oracle::pick(rng, 3, rank == 3 ? 4 : 6));
      ks.push_back(3);
    }
    for (std::size_t stride : {1, 2})
      expect_fd([stride](const Vars& v) { return ad::dwconv(v[0], v[1], v[2], stride, 1); },
                {oracle::randn(xs, rng), oracle::randn(ks, rng), oracle::randn({2}, rng)}, rank);
  }
}

TEST(Grad, Conv) {
  std::mt19937_64 rng(22);
  expect_fd([](const Vars& v) { return ad::conv(v[0], v[1], v[2], 1); },
            {oracle::randn({2, 4, 5}, rng), oracle::randn({3, 2, 3, 3}, rng), oracle::randn({3}, rng)});
  expect_fd([](const Vars& v) { return ad::conv(v[0], v[1], v[2], 1); },
            {oracle::randn({2, 3, 3, 3}, rng), oracle::randn({2, 2, 3, 3, 3}, rng), oracle::randn({2}, rng)});
}

TEST(Grad, PointwiseConv) {
  std::mt19937_64 rng(23);
  expect_fd([](const Vars& v) { return ad::pointwise_conv(v[0], v[1], v[2]); },
            {oracle::randn({3, 4, 2}, rng), oracle::randn({5, 3}, rng), oracle::randn({5}, rng)});
}

TEST(Grad, CausalConv) {
  std::mt19937_64 rng(24);
  expect_fd([](const Vars& v) { return ad::causal_conv1d(v[0], v[1], v[2]); },
            {oracle::randn({7, 3}, rng), oracle::randn({3, 4}, rng), oracle::randn({3}, rng)});
}

TEST(Grad, LayerNorm) {
  std::mt19937_64 rng(25);
  expect_fd([](const Vars& v) { return ad::layernorm(v[0], v[1], v[2], 1e-5); },
            {oracle::randn({4, 6}, rng), oracle::randn({6}, rng), oracle::randn({6}, rng)});
}

TEST(Grad, Activations) {
  std::mt19937_64 rng(26);
  for (auto kind : {ops::Activation::SiLU, ops::Activation::ReLU, ops::Activation::Softplus,
                    ops::Activation::SoftmaxChannel}) {
    expect_fd([kind](const Vars& v) { return ad::activation(kind, v[0]); }, {oracle::randn({3, 4, 2}, rng, 2.0)},
              int(kind));
  }
}

TEST(Grad, PoolUpsample) {
  std::mt19937_64 rng(27);
  expect_fd([](const Vars& v) { return ad::maxpool2(v[0]); }, {oracle::randn({2, 4, 6}, rng)});
  expect_fd([](const Vars& v) { return ad::maxpool2(v[0]); }, {oracle::randn({1, 4, 2, 4}, rng)});
  expect_fd([](const Vars& v) { return ad::upsample2x(v[0]); }, {oracle::randn({2, 3, 4}, rng)});
  expect_fd([](const Vars& v) { return ad::upsample2x(v[0]); }, {oracle::randn({1, 2, 3, 2}, rng)});
}

TEST(Grad, Elementwise) {
  std::mt19937_64 rng(28);
  expect_fd([](const Vars& v) { return ad::add(v[0], v[1]); }, {oracle::randn({3, 4}, rng), oracle::randn({3, 4}, rng)});
  expect_fd([](const Vars& v) { return ad::hadamard(v[0], v[1]); },
            {oracle::randn({3, 4}, rng), oracle::randn({3, 4}, rng)});
  expect_fd([](const Vars& v) { return ad::scale_by_channel_vector(v[0], v[1]); },
            {oracle::randn({5, 4}, rng), oracle::randn({4}, rng)});
  expect_fd([](const Vars& v) { return ad::scale_by_channel_vector(v[0], v[1], ops::ChannelAxis::Leading); },
            {oracle::randn({3, 2, 2}, rng), oracle::randn({3}, rng)});
}

TEST(Grad, ReshapesAndSlice) {
  std::mt19937_64 rng(29);
  expect_fd([](const Vars& v) { return ad::flatten_spatial(v[0]); }, {oracle::randn({3, 2, 4}, rng)});
  expect_fd([](const Vars& v) { return ad::unflatten_spatial(v[0], {2, 3}); }, {oracle::randn({6, 2}, rng)});
  expect_fd([](const Vars& v) { return ad::transpose_lc(v[0]); }, {oracle::randn({3, 5}, rng)});
  expect_fd([](const Vars& v) { return ad::slice_last(v[0], 1, 4); }, {oracle::randn({3, 5}, rng)});
  EXPECT_THROW(ad::slice_last(Var<double>::constant(Tensor<double>({2, 3})), 2, 5), DimensionError);
}

TEST(Grad, SharedCaseList) {
  for (auto& c : suite::gradient_cases(99)) {
    auto r = oracle::fd_check(c.fn, c.inputs, 5);
    EXPECT_LT(r.worst, kTol) << c.name;
  }
}
