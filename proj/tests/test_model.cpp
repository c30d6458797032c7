#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ddpgcn/model.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace ddpgcn;

namespace {

constexpr double kEndToEndTol = 1e-3;

Tensor make(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

// by value: arguments may be references into a tape that grows while the other is evaluated
double max_diff(Tensor a, Tensor b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<Var> constants(Tape& t, const std::vector<Matrix>& ms) {
  std::vector<Var> out;
  for (const auto& m : ms) out.push_back(t.constant(to_tensor(m)));
  return out;
}

ModelConfig small_config(std::size_t n, SpatialBlockKind kind) {
  ModelConfig c;
  c.n_links = n;
  c.history = 4;
  c.horizon = 4;
  c.channels = {3, 3};
  c.spatial_block = kind;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(GraphConv, IdentityPropagationAndWeights) {
  std::mt19937_64 rng(1);
  const auto x = oracle::random_tensor({2, 3, 4, 2}, rng);
  Tape t;
  const auto y = graph_conv(t.constant(x), t.constant(to_tensor(Matrix::identity(4))),
                            t.constant(to_tensor(Matrix::identity(2))));
  EXPECT_EQ(max_diff(y.value(), x), 0.0);
}

TEST(GraphConv, HandExample) {
  Tape t;
  const auto y = graph_conv(t.constant(make({1, 1, 2, 1}, {1, 2})), t.constant(make({2, 2}, {1, 1, 0, 1})),
                            t.constant(make({1, 1}, {1})));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{3, 2}));
}

TEST(GraphConv, ZeroGraphIsPerNodeChannelMap) {
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor({1, 2, 3, 2}, rng), theta = oracle::random_tensor({2, 4}, rng);
  const WeightedAdjacency w{Matrix(3, 3), AdjacencyKind::distance};
  Tape t;
  const auto y = graph_conv(t.constant(x), t.constant(to_tensor(propagation_matrix(w))), t.constant(theta));
  const auto z = matmul(t.constant(x), t.constant(theta));
  EXPECT_LT(max_diff(y.value(), z.value()), 1e-15);
}

TEST(GraphConv, MatchesDenseFirstOrderOracle) {
  std::mt19937_64 rng(3);
  const auto w = oracle::random_adjacency(6, rng);
  const auto x = oracle::random_tensor({1, 1, 6, 1}, rng);
  Tape t;
  const auto y = graph_conv(t.constant(x), t.constant(to_tensor(propagation_matrix(w))),
                            t.constant(make({1, 1}, {0.7})));
  const auto ref = oracle::dense_first_order(w.values, x.vec(), 0.7);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-14);
}

TEST(GraphConv, ShapeErrors) {
  Tape t;
  EXPECT_THROW(graph_conv(t.constant(Tensor({1, 1, 3, 2})), t.constant(Tensor({4, 4})), t.constant(Tensor({2, 1}))),
               UsageError);
  EXPECT_THROW(graph_conv(t.constant(Tensor({1, 1, 3, 2})), t.constant(Tensor({3, 3})), t.constant(Tensor({3, 1}))),
               UsageError);
}

TEST(MultiGraphConv, SingleCancellationAndSum) {
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor({2, 2, 5, 3}, rng);
  const auto p1 = oracle::random_propagation(5, rng), p2 = oracle::random_propagation(5, rng);
  const auto th1 = oracle::random_tensor({3, 2}, rng), th2 = oracle::random_tensor({3, 2}, rng);
  Tensor neg = th1;
  for (auto& v : neg.data()) v = -v;
  Tape t;
  const auto xv = t.constant(x);
  const auto v1 = t.constant(to_tensor(p1)), v2 = t.constant(to_tensor(p2));
  const auto o1 = graph_conv(xv, v1, t.constant(th1)), o2 = graph_conv(xv, v2, t.constant(th2));

  std::vector<Var> one{v1}, one_theta{t.constant(th1)};
  EXPECT_EQ(max_diff(multi_graph_conv(xv, one, one_theta).value(), o1.value()), 0.0);

  std::vector<Var> dup{v1, v1}, dup_theta{t.constant(th1), t.constant(neg)};
  const Tensor cancelled = multi_graph_conv(xv, dup, dup_theta).value();
  for (double v : cancelled.data()) EXPECT_NEAR(v, 0.0, 1e-15);

  std::vector<Var> both{v1, v2}, both_theta{t.constant(th1), t.constant(th2)};
  const auto s = multi_graph_conv(xv, both, both_theta).value();
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], o1.value()[i] + o2.value()[i], 1e-15);

  std::vector<Var> none;
  EXPECT_THROW(multi_graph_conv(xv, none, none), UsageError);
  EXPECT_THROW(multi_graph_conv(xv, both, one_theta), UsageError);
}

struct FusedCase {
  std::size_t n;
  double density;
  bool compressed;
};

class FusedGraphConv : public ::testing::TestWithParam<FusedCase> {};

TEST_P(FusedGraphConv, MatchesSumOfGraphConvsInValueAndGradient) {
  const auto [n, density, compressed] = GetParam();
  std::mt19937_64 rng(5);
  std::vector<Matrix> ps{oracle::random_propagation(n, rng, density), Matrix::identity(n),
                         oracle::random_propagation(n, rng, density)};
  const PropagationSet set(ps);
  EXPECT_EQ(set.sparse_off_identity() != nullptr, compressed);
  const auto x = oracle::random_tensor({2, 3, n, 2}, rng);
  std::vector<Tensor> th;
  for (int k = 0; k < 3; ++k) th.push_back(oracle::random_tensor({2, 4}, rng));
  const auto w = oracle::random_tensor({2, 3, n, 4}, rng);

  auto run = [&](bool fused) {
    Tape t;
    auto xv = t.leaf(x);
    std::vector<Var> thetas;
    for (const auto& m : th) thetas.push_back(t.leaf(m));
    Var y = fused ? fused_graph_conv(xv, set, thetas) : multi_graph_conv(xv, constants(t, ps), thetas);
    t.backward(sum(hadamard(y, t.constant(w))));
    std::vector<Tensor> out{y.value(), xv.grad()};
    for (const auto& v : thetas) out.push_back(v.grad());
    return out;
  };
  const auto a = run(true), b = run(false);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_LT(max_diff(a[k], b[k]), 1e-12) << k;
}

INSTANTIATE_TEST_SUITE_P(Density, FusedGraphConv,
                         ::testing::Values(FusedCase{6, 0.5, false}, FusedCase{40, 0.05, true}));

TEST(ChebConv, OrderOneIsChannelMap) {
  std::mt19937_64 rng(6);
  const auto w = oracle::random_adjacency(5, rng);
  const auto x = oracle::random_tensor({1, 2, 5, 2}, rng), theta = oracle::random_tensor({2, 3}, rng);
  Tape t;
  std::vector<Var> thetas{t.constant(theta)};
  EXPECT_LT(max_diff(cheb_conv(t.constant(x), w, 1, thetas).value(), matmul(t.constant(x), t.constant(theta)).value()),
            1e-15);
}

TEST(ChebConv, ZeroGraphSumsWeights) {
  std::mt19937_64 rng(7);
  const WeightedAdjacency w{Matrix(4, 4), AdjacencyKind::distance};
  const auto lap = scaled_laplacian(w);
  EXPECT_LT(max_abs_diff(lap, Matrix::identity(4)), 1e-12);
  const auto x = oracle::random_tensor({1, 1, 4, 2}, rng);
  std::vector<Tensor> th;
  Tensor total({2, 2});
  for (int k = 0; k < 3; ++k) {
    th.push_back(oracle::random_tensor({2, 2}, rng));
    for (std::size_t i = 0; i < 4; ++i) total[i] += th.back()[i];
  }
  Tape t;
  std::vector<Var> thetas;
  for (const auto& m : th) thetas.push_back(t.constant(m));
  EXPECT_LT(max_diff(cheb_conv(t.constant(x), w, 3, thetas).value(), matmul(t.constant(x), t.constant(total)).value()),
            1e-12);
}

TEST(ChebConv, RecurrenceMatchesDirectPolynomial) {
  std::mt19937_64 rng(8);
  const auto w = oracle::random_adjacency(7, rng);
  const auto basis = chebyshev_basis(w, 3);
  const auto l = scaled_laplacian(w);
  EXPECT_LT(max_abs_diff(basis[0], Matrix::identity(7)), 1e-15);
  EXPECT_LT(max_abs_diff(basis[1], l), 1e-15);
  Matrix direct = matmul(l, l);
  for (auto& v : direct.data()) v *= 2.0;
  for (std::size_t i = 0; i < 7; ++i) direct(i, i) -= 1.0;
  EXPECT_LT(max_abs_diff(basis[2], direct), 1e-10);
}

TEST(ChebConv, HigherOrderWithZeroWeightsMatchesPrefix) {
  std::mt19937_64 rng(9);
  const auto w = oracle::random_adjacency(6, rng);
  const auto x = oracle::random_tensor({2, 1, 6, 2}, rng);
  std::vector<Tensor> th{oracle::random_tensor({2, 2}, rng), oracle::random_tensor({2, 2}, rng)};
  Tape t;
  std::vector<Var> two{t.constant(th[0]), t.constant(th[1])};
  std::vector<Var> three{two[0], two[1], t.constant(Tensor({2, 2}))};
  EXPECT_LT(max_diff(cheb_conv(t.constant(x), w, 2, two).value(), cheb_conv(t.constant(x), w, 3, three).value()),
            1e-13);
  EXPECT_THROW(cheb_conv(t.constant(x), w, 3, two), UsageError);
}

TEST(SpatialBlock, ParallelWithOnlyDistanceEqualsSingle) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::parallel, 3);
  auto single_cfg = s.config, parallel_cfg = s.config;
  single_cfg.spatial_block = SpatialBlockKind::single;
  parallel_cfg.groups = {ElementGroup::distance};
  DdpGcn single(single_cfg, s.elements), parallel(parallel_cfg, s.elements);
  EXPECT_EQ(max_diff(single.predict(s.x), parallel.predict(s.x)), 0.0);
}

TEST(SpatialBlock, StackedWithOneGroupIsConvReluNorm) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::stacked, 4);
  s.config.groups = {ElementGroup::direction};
  DdpGcn model(s.config, s.elements);
  std::mt19937_64 rng(40);
  const auto x = oracle::random_tensor({2, 4, 5, 2}, rng);
  Tape t;
  const auto out = model.spatial_forward(t, 0, t.constant(x)).value();
  std::vector<Var> thetas;
  for (std::size_t m = 0; m < 2; ++m)
    thetas.push_back(t.param(model.parameter(DdpGcn::theta_name(0, ElementGroup::direction, m))));
  const auto pre = multi_graph_conv(t.constant(x), constants(t, model.propagations(ElementGroup::direction)), thetas);
  EXPECT_LT(max_diff(out, oracle::plain_layer_norm(relu(pre).value())), 1e-12);
}

TEST(SpatialBlock, ParallelIsSumOfIndependentGroupOutputs) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::parallel, 5);
  DdpGcn model(s.config, s.elements);
  std::mt19937_64 rng(50);
  const auto x = oracle::random_tensor({2, 4, 5, 2}, rng);
  Tape t;
  const auto out = model.spatial_forward(t, 0, t.constant(x)).value();
  Tensor total(Shape{2, 4, 5, 2});
  for (auto g : kAllGroups) {
    const auto& props = model.propagations(g);
    std::vector<Var> thetas;
    for (std::size_t m = 0; m < props.size(); ++m) thetas.push_back(t.param(model.parameter(DdpGcn::theta_name(0, g, m))));
    const auto o = multi_graph_conv(t.constant(x), constants(t, props), thetas).value();
    for (std::size_t i = 0; i < o.size(); ++i) total[i] += o[i];
  }
  for (auto& v : total.data()) v = std::max(v, 0.0);
  EXPECT_LT(max_diff(out, oracle::plain_layer_norm(total)), 1e-12);
}

TEST(SpatialBlock, RemovedGroupDropsItsOperation) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::parallel, 6);
  s.config.groups = {ElementGroup::distance, ElementGroup::positional};
  DdpGcn removed(s.config, s.elements);
  EXPECT_FALSE(removed.has_parameter(DdpGcn::theta_name(0, ElementGroup::direction, 0)));
  EXPECT_TRUE(removed.propagations(ElementGroup::direction).empty());

  std::mt19937_64 rng(60);
  const auto x = oracle::random_tensor({1, 4, 5, 2}, rng);
  Tape t;
  const auto out = removed.spatial_forward(t, 0, t.constant(x)).value();
  const auto kept = add(removed.group_conv(t, 0, ElementGroup::distance, t.constant(x)),
                        removed.group_conv(t, 0, ElementGroup::positional, t.constant(x)));
  EXPECT_LT(max_diff(out, oracle::plain_layer_norm(relu(kept).value())), 1e-12);

  // zeroed matrices are not a removal: P = I keeps a per-node channel map
  auto zeroed = s.elements;
  for (auto& w : zeroed[ElementGroup::direction]) w.values = Matrix(5, 5);
  auto all = s.config;
  all.groups = {ElementGroup::distance, ElementGroup::direction, ElementGroup::positional};
  DdpGcn with_zero(all, zeroed);
  EXPECT_GT(max_diff(with_zero.predict(s.x), removed.predict(s.x)), 1e-6);

  s.config.groups.clear();
  EXPECT_THROW(DdpGcn(s.config, s.elements), ConfigError);
}

TEST(TemporalBlock, PreservesTimeLength) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::single, 7);
  DdpGcn model(s.config, s.elements);
  Tape t;
  EXPECT_EQ(model.temporal_forward(t, 0, t.constant(s.x)).shape(), (Shape{2, 4, 5, 2}));
  s.config.temporal_kernel = 5;
  EXPECT_THROW(DdpGcn(s.config, s.elements), ConfigError);
}

TEST(TemporalBlock, ConstantInputInteriorScaledByKernelSum) {
  Tape t;
  const auto x = t.constant(Tensor({1, 6, 3, 1}, 2.0));
  const auto y = conv1d_time(x, t.constant(make({3, 1, 1}, {0.5, 1.0, -0.25})), Padding::same).value();
  for (std::size_t step = 1; step < 5; ++step)
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(y[step * 3 + n], 2.0 * 1.25, 1e-15);
}

TEST(DdpGcnForward, ShapeContract) {
  std::mt19937_64 rng(8);
  GraphElementSet el;
  el[ElementGroup::distance] = {oracle::random_adjacency(40, rng, 0.1)};
  for (auto g : {ElementGroup::direction, ElementGroup::positional, ElementGroup::distance_partitioned})
    el[g] = {oracle::random_adjacency(40, rng, 0.1), oracle::random_adjacency(40, rng, 0.1)};
  ModelConfig c;
  c.n_links = 40;
  DdpGcn model(c, el);
  const auto x = oracle::random_tensor({8, 12, 40, 1}, rng);
  EXPECT_EQ(model.predict(x).shape(), (Shape{8, 12, 40, 1}));
  EXPECT_THROW(model.predict(oracle::random_tensor({8, 12, 39, 1}, rng)), UsageError);
  EXPECT_THROW(model.predict(oracle::random_tensor({8, 11, 40, 1}, rng)), UsageError);

  c.n_links = 41;
  EXPECT_THROW(DdpGcn(c, el), UsageError);
}

TEST(DdpGcnForward, ZeroOutputLayerGivesZeros) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::stacked, 9);
  DdpGcn model(s.config, s.elements);
  for (const char* name : {"out.time.weight", "out.time.bias"}) model.parameter(name).value.fill(0.0);
  const auto y = model.predict(s.x);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(DdpGcnForward, DeterministicForSeed) {
  auto s = oracle::tiny_model_setup(SpatialBlockKind::stacked, 10);
  DdpGcn a(s.config, s.elements), b(s.config, s.elements);
  EXPECT_EQ(a.predict(s.x).vec(), b.predict(s.x).vec());
  s.config.seed += 1;
  DdpGcn c(s.config, s.elements);
  EXPECT_NE(a.predict(s.x).vec(), c.predict(s.x).vec());
}

class EndToEndGradient : public ::testing::TestWithParam<SpatialBlockKind> {};

TEST_P(EndToEndGradient, MatchesCentralDifferences) {
  auto s = oracle::tiny_model_setup(GetParam(), 11);
  DdpGcn model(s.config, s.elements);
  const auto r = oracle::check_model_gradients(model, s.x, s.y);
  EXPECT_GT(r.checked, 50u);
  EXPECT_LT(r.max_rel, kEndToEndTol) << "max abs " << r.max_abs;
}

INSTANTIATE_TEST_SUITE_P(Blocks, EndToEndGradient,
                         ::testing::Values(SpatialBlockKind::single, SpatialBlockKind::parallel,
                                           SpatialBlockKind::stacked));

TEST(DdpGcnTraining, LossDecreasesOnFixedBatch) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = oracle::tiny_model_setup(SpatialBlockKind::stacked, seed);
    s.config.channels = {4, 4};
    DdpGcn model(s.config, s.elements);
    auto loss_value = [&](bool step) {
      zero_grads(model.parameters());
      Tape t;
      auto loss = reduce_mean(absolute_error(model.forward(t, t.constant(s.x)), t.constant(s.y)));
      if (step) {
        t.backward(loss);
        adam_step(model.parameters(), AdamOptions{.lr = 1e-2});
      }
      return loss.value().item();
    };
    const double first = loss_value(false);
    for (int k = 0; k < 50; ++k) loss_value(true);
    EXPECT_LT(loss_value(false), 0.8 * first) << "seed " << seed;
  }
}

TEST(ModelConfig, Validation) {
  auto c = small_config(5, SpatialBlockKind::stacked);
  EXPECT_NO_THROW(validate(c));
  auto bad = c;
  bad.channels = {};
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.stacked_order = {ElementGroup::distance, ElementGroup::distance, ElementGroup::positional,
                       ElementGroup::direction};
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.chebyshev = true;
  EXPECT_THROW(validate(bad), ConfigError);
  EXPECT_THROW(parse_spatial_block("diagonal"), ConfigError);
}
