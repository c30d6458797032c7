#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ddpgcn/tensor.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace ddpgcn;

namespace {

constexpr double kGradTol = 1e-4;

Tensor make(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

}  // namespace

class OpGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  for (auto& c : oracle::op_cases(GetParam())) {
    const auto r = oracle::check_gradients(c.loss, c.inputs);
    EXPECT_GT(r.checked, 0u) << c.name;
    EXPECT_LT(r.max_rel, kGradTol) << c.name << " max abs " << r.max_abs;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Values(1u, 2u, 3u));

TEST(Matmul, IdentityAndBroadcastModes) {
  Tape t;
  std::mt19937_64 rng(5);
  const Tensor a = oracle::random_tensor({2, 3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const auto y = matmul(t.constant(a), t.constant(eye));
  EXPECT_EQ(y.shape(), a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], a[i]);

  const auto b = matmul(t.constant(make({2, 2}, {1, 2, 3, 4})), t.constant(make({2, 1}, {5, 6})));
  EXPECT_DOUBLE_EQ(b.value()[0], 17.0);
  EXPECT_DOUBLE_EQ(b.value()[1], 39.0);
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), UsageError);
  EXPECT_THROW(matmul(t.constant(Tensor({2, 2, 3})), t.constant(Tensor({3, 3, 1}))), UsageError);
}

TEST(Relu, ClampsNegatives) {
  Tape t;
  const auto y = relu(t.constant(make({4}, {-1.0, 0.0, 0.5, 2.0})));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{0.0, 0.0, 0.5, 2.0}));
}

TEST(LayerNorm, ZeroMeanUnitVariancePerRow) {
  Tape t;
  std::mt19937_64 rng(8);
  const auto x = oracle::random_tensor({3, 7}, rng, -4.0, 9.0);
  const auto y = layer_norm(t.constant(x), t.constant(Tensor({7}, 1.0)), t.constant(Tensor({7}))).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 7; ++c) mean += y[r * 7 + c] / 7.0;
    for (std::size_t c = 0; c < 7; ++c) var += (y[r * 7 + c] - mean) * (y[r * 7 + c] - mean) / 7.0;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
  EXPECT_THROW(layer_norm(t.constant(x), t.constant(Tensor({6}, 1.0)), t.constant(Tensor({7}))), UsageError);
}

TEST(Reductions, MeanAndSumGradients) {
  Tape t;
  auto x = t.leaf(make({2, 2}, {1.0, -2.0, 3.0, 0.5}));
  t.backward(reduce_mean(x));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 0.25);

  Tape u;
  auto z = u.leaf(make({3}, {1.5, -2.0, 0.25}));
  u.backward(sum(hadamard(z, z)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(z.grad()[i], 2.0 * z.value()[i]);
}

TEST(Tape, BackwardRequiresScalarLoss) {
  Tape t;
  auto x = t.leaf(Tensor({3}, 1.0));
  EXPECT_THROW(t.backward(x), UsageError);
  Tape other;
  auto y = other.leaf(Tensor({2}));
  EXPECT_THROW(t.backward(sum(y)), UsageError);
  EXPECT_THROW(add(x, y), UsageError);
}

TEST(Tape, ShapeMismatchesThrow) {
  Tape t;
  EXPECT_THROW(add(t.constant(Tensor({2, 3})), t.constant(Tensor({2}))), UsageError);
  EXPECT_THROW(hadamard(t.constant(Tensor({3})), t.constant(Tensor({2, 3}))), UsageError);
  EXPECT_THROW(reshape(t.constant(Tensor({2, 3})), {4}), UsageError);
  EXPECT_THROW(permute(t.constant(Tensor({2, 3})), {0, 0}), UsageError);
  EXPECT_THROW(absolute_error(t.constant(Tensor({2})), t.constant(Tensor({3}))), UsageError);
  EXPECT_THROW(conv1d_time(t.constant(Tensor({1, 3, 2, 1})), t.constant(Tensor({4, 1, 1})), Padding::same),
               UsageError);
  EXPECT_THROW(conv1d_time(t.constant(Tensor({1, 3, 2, 2})), t.constant(Tensor({1, 1, 1}))), UsageError);
}

TEST(Tape, RepeatedPassesAreDeterministic) {
  std::mt19937_64 rng(21);
  const auto a = oracle::random_tensor({4, 6}, rng), b = oracle::random_tensor({6, 3}, rng);
  auto run = [&]() {
    Tape t;
    auto x = t.leaf(a), w = t.leaf(b);
    t.backward(reduce_mean(squared_error(relu(matmul(x, w)), t.constant(Tensor({4, 3}, 0.1)))));
    return std::pair{x.grad().vec(), w.grad().vec()};
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, ParameterGradientsAccumulateUntilZeroed) {
  Parameter p("w", make({2}, {1.0, 2.0}));
  zero_grads(std::span<Parameter>(&p, 1));
  for (int k = 0; k < 2; ++k) {
    Tape t;
    t.backward(sum(hadamard(t.param(p), t.constant(make({2}, {3.0, -1.0})))));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -2.0);
  zero_grads(std::span<Parameter>(&p, 1));
  EXPECT_DOUBLE_EQ(p.grad[0], 0.0);
}

TEST(Conv1dTime, WidthOneEqualsChannelMatmul) {
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor({2, 5, 3, 2}, rng), k = oracle::random_tensor({1, 2, 4}, rng);
  Tape t;
  const auto conv = conv1d_time(t.constant(x), t.constant(k), Padding::same).value();
  const auto mm = matmul(t.constant(x), t.constant(make({2, 4}, k.vec()))).value();
  ASSERT_EQ(conv.shape(), mm.shape());
  for (std::size_t i = 0; i < conv.size(); ++i) EXPECT_NEAR(conv[i], mm[i], 1e-12);
}

TEST(Conv1dTime, PaddingShapes) {
  Tape t;
  const auto x = t.constant(Tensor({1, 6, 2, 1}, 1.0));
  const auto k = t.constant(Tensor({3, 1, 2}, 1.0));
  EXPECT_EQ(conv1d_time(x, k, Padding::same).shape(), (Shape{1, 6, 2, 2}));
  EXPECT_EQ(conv1d_time(x, k, Padding::valid).shape(), (Shape{1, 4, 2, 2}));
  // interior steps see three ones, edges two under zero padding
  const auto v = conv1d_time(x, k, Padding::same).value();
  EXPECT_DOUBLE_EQ(v[0], 2.0);
  EXPECT_DOUBLE_EQ(v[2 * 2 * 2], 3.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p("w", make({1}, {2.0}));
  p.grad = make({1}, {4.0});
  adam_step(std::span<Parameter>(&p, 1), AdamOptions{.lr = 0.1});
  EXPECT_NEAR(p.value[0], 1.9, 1e-9);
}

TEST(Adam, ZeroGradientLeavesValue) {
  Parameter p("w", make({2}, {0.3, -0.7}));
  adam_step(std::span<Parameter>(&p, 1), AdamOptions{.lr = 0.5});
  EXPECT_DOUBLE_EQ(p.value[0], 0.3);
  EXPECT_DOUBLE_EQ(p.value[1], -0.7);
}

TEST(Adam, ConvergesOnQuadratic) {
  Parameter p("w", make({1}, {0.0}));
  for (int step = 0; step < 500; ++step) {
    zero_grads(std::span<Parameter>(&p, 1));
    Tape t;
    auto w = t.param(p);
    t.backward(sum(squared_error(w, t.constant(make({1}, {3.0})))));
    adam_step(std::span<Parameter>(&p, 1), AdamOptions{.lr = 0.05});
  }
  EXPECT_LT(std::abs(p.value[0] - 3.0), 1e-2);
}
