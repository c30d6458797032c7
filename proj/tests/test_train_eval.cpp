#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ddpgcn/train_eval.hpp"
#include "support/fixtures.hpp"

using namespace ddpgcn;

namespace {

Tensor make(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

/// Weekly-periodic series starting Tuesday 2018-04-03: the value depends only
/// on (weekday, time of day, link), except for the overrides applied by callers.
SpeedSeries weekly_series(std::size_t days, std::size_t links) {
  SpeedSeries s;
  const auto start = make_timestamp(2018, 4, 3);
  const std::size_t rows = days * 288;
  s.values = Matrix(rows, links);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto ts = start + static_cast<std::int64_t>(r) * kIntervalMinutes;
    s.timestamps.push_back(ts);
    for (std::size_t i = 0; i < links; ++i)
      s.values(r, i) = 30.0 + weekday_of(ts) + std::sin(minute_of_day(ts) / 229.0) * 4.0 + 0.5 * i;
  }
  return s;
}

TrainOptions quick_options() {
  TrainOptions o;
  o.epochs = 4;
  o.lr = 3e-3;
  o.batch = 16;
  o.patience = 2;
  o.max_batches_per_epoch = 4;
  o.val_stride = 8;
  return o;
}

const fixture::Problem& small_problem() {
  static const fixture::Problem p = fixture::make_problem(3, 3, 7);
  return p;
}

}  // namespace

TEST(Metrics, PerfectAndShiftedPredictions) {
  std::mt19937_64 rng(1);
  Tensor truth(Shape{3, 12, 4});
  for (auto& v : truth.data()) v = std::uniform_real_distribution<double>(10, 60)(rng);
  const auto exact = compute_metrics(truth, truth);
  EXPECT_EQ(exact.aggregate.mae, 0.0);
  EXPECT_EQ(exact.aggregate.rmse, 0.0);
  EXPECT_EQ(exact.aggregate.mape, 0.0);

  Tensor shifted = truth;
  for (auto& v : shifted.data()) v += 1.0;
  const auto r = compute_metrics(shifted, truth);
  EXPECT_NEAR(r.aggregate.mae, 1.0, 1e-12);
  EXPECT_NEAR(r.aggregate.rmse, 1.0, 1e-12);
  for (std::size_t s : {6u, 9u, 12u}) EXPECT_NEAR(r.step(s).mae, 1.0, 1e-12);
}

TEST(Metrics, TwoEntryHandExample) {
  const auto r = compute_metrics(make({1, 1, 2}, {11, 18}), make({1, 1, 2}, {10, 20}), {1});
  EXPECT_DOUBLE_EQ(r.aggregate.mae, 1.5);
  EXPECT_NEAR(r.aggregate.rmse, std::sqrt(2.5), 1e-12);
  EXPECT_NEAR(r.aggregate.mape, 10.0, 1e-12);
}

TEST(Metrics, MapeFloorAndErrors) {
  const auto r = compute_metrics(make({1, 1, 3}, {2, 11, 5}), make({1, 1, 3}, {0.5, 10, 1.0}), {1});
  EXPECT_EQ(r.aggregate.mape_count, 1u);
  EXPECT_NEAR(r.aggregate.mape, 10.0, 1e-12);
  EXPECT_THROW(compute_metrics(Tensor({1, 2, 3}), Tensor({1, 2, 4}), {1}), UsageError);
  EXPECT_THROW(compute_metrics(Tensor({1, 2, 3}), Tensor({1, 2, 3}), {3}), UsageError);
  EXPECT_THROW(r.step(2), UsageError);
}

TEST(Metrics, AggregateConsistentWithSteps) {
  std::mt19937_64 rng(2);
  Tensor a(Shape{5, 12, 3}), b(Shape{5, 12, 3});
  for (auto& v : a.data()) v = std::uniform_real_distribution<double>(10, 60)(rng);
  for (auto& v : b.data()) v = std::uniform_real_distribution<double>(10, 60)(rng);
  const auto r = compute_metrics(a, b);
  double mae = 0.0, mse = 0.0;
  for (const auto& s : r.per_step) {
    mae += s.mae / 12.0;
    mse += s.rmse * s.rmse / 12.0;
  }
  EXPECT_NEAR(r.aggregate.mae, mae, 1e-12);
  EXPECT_NEAR(r.aggregate.rmse, std::sqrt(mse), 1e-12);
}

TEST(Metrics, NormalizedSpaceDiffersFromKmh) {
  const auto& p = small_problem();
  const auto truth = split_targets(p.data.test);
  Tensor pred = truth;
  std::mt19937_64 rng(3);
  for (auto& v : pred.data()) v += std::normal_distribution<double>(0.0, 2.0)(rng);
  const auto& st = p.data.series->stats;
  Tensor zp = pred, zt = truth;
  for (auto& v : zp.data()) v = (v - st.mean) / st.std;
  for (auto& v : zt.data()) v = (v - st.mean) / st.std;
  const double kmh = compute_metrics(pred, truth).aggregate.mae;
  const double z = compute_metrics(zp, zt).aggregate.mae;
  EXPECT_NEAR(z * st.std, kmh, 1e-9);
  EXPECT_GT(std::abs(z - kmh), 0.1);
}

TEST(HistoricalAverage, ConstantTrainingData) {
  auto s = weekly_series(21, 2);
  s.values = Matrix(s.rows(), 2, 26.3);
  for (std::size_t r = 4233; r < s.rows(); ++r) s.values(r, 0) = 50.0;  // outside training
  const auto d = split_and_window(s, 12, 12, SplitRatios{}, false);
  for (const auto* split : {&d.val, &d.test}) {
    const auto ha = historical_average(d, *split);
    for (double v : ha.data()) EXPECT_NEAR(v, 26.3, 1e-12);
  }
}

TEST(HistoricalAverage, MeanOfTwoMondays) {
  auto s = weekly_series(21, 1);
  s.values = Matrix(s.rows(), 1, 40.0);
  // Mondays fall on days 6, 13 (training) and 20 (test)
  s.values(6 * 288 + 96, 0) = 20.0;
  s.values(13 * 288 + 96, 0) = 30.0;
  const auto d = split_and_window(s, 12, 12, SplitRatios{}, false);
  ASSERT_LT(13u * 288 + 96, d.train.row_end);
  const auto ha = historical_average(d, d.test);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < d.test.size(); ++k)
    for (std::size_t t = 0; t < 12; ++t) {
      const auto ts = d.series->raw.timestamps[d.test.target_row(k, t)];
      const double v = ha[k * 12 + t];
      if (weekday_of(ts) == 0 && minute_of_day(ts) == 8 * 60) {
        EXPECT_DOUBLE_EQ(v, 25.0);
        ++hits;
      } else {
        EXPECT_DOUBLE_EQ(v, 40.0);
      }
    }
  EXPECT_GT(hits, 0u);
}

TEST(HistoricalAverage, PeriodicSeriesIsExactAndHorizonInvariant) {
  const auto s = weekly_series(28, 3);
  const auto d = split_and_window(s, 12, 12, SplitRatios{}, false);
  const auto ha = historical_average(d, d.test);
  EXPECT_LT(compute_metrics(ha, split_targets(d.test)).aggregate.mae, 1e-9);
  // window k at step t and window k+1 at step t-1 share a target instant
  const std::size_t n = 3;
  for (std::size_t k = 0; k + 1 < d.test.size(); k += 17)
    for (std::size_t t = 1; t < 12; ++t)
      for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(ha[(k * 12 + t) * n + i], ha[((k + 1) * 12 + t - 1) * n + i]);
}

TEST(HistoricalAverage, MissingKeyFallsBackToLinkMean) {
  // training covers Tuesday..Friday only; the test split holds unseen weekdays
  auto s = weekly_series(10, 2);
  const auto d = split_and_window(s, 12, 12, SplitRatios{0.4, 0.1, 0.5}, false);
  const auto stats0 = [&]() {
    double m = 0.0;
    for (std::size_t r = d.train.row_begin; r < d.train.row_end; ++r) m += d.series->raw.values(r, 0);
    return m / static_cast<double>(d.train.row_end - d.train.row_begin);
  }();
  const auto ha = historical_average(d, d.test);
  bool found = false;
  for (std::size_t k = 0; k < d.test.size() && !found; ++k) {
    const auto ts = d.series->raw.timestamps[d.test.target_row(k, 0)];
    if (weekday_of(ts) == 6) {
      EXPECT_NEAR(ha[k * 12 * 2], stats0, 1e-9);
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(Checkpoint, RoundTripAndMismatch) {
  const auto& p = small_problem();
  DdpGcn a(p.model(SpatialBlockKind::stacked), p.graphs.elements);
  fixture::TempDir dir("ddpgcn_ckpt_test");
  save_checkpoint(dir.path / "ck", a.parameters(), {{"note", "x"}});
  EXPECT_EQ(read_checkpoint_meta(dir.path / "ck").at("note"), "x");

  auto cfg = p.model(SpatialBlockKind::stacked);
  cfg.seed = 99;
  DdpGcn b(cfg, p.graphs.elements);
  const auto x = make_batch(p.data.test, std::vector<std::size_t>{0, 1}).first;
  EXPECT_NE(a.predict(x).vec(), b.predict(x).vec());
  load_checkpoint(dir.path / "ck", b.parameters());
  EXPECT_EQ(a.predict(x).vec(), b.predict(x).vec());

  DdpGcn single(p.model(SpatialBlockKind::single), p.graphs.elements);
  EXPECT_THROW(load_checkpoint(dir.path / "ck", single.parameters()), DataError);
  EXPECT_THROW(load_checkpoint(dir.path / "missing", single.parameters()), DataError);
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovingEpoch) {
  const auto& p = small_problem();
  DdpGcn model(p.model(SpatialBlockKind::single), p.graphs.elements);
  auto opt = quick_options();
  opt.epochs = 30;
  opt.patience = 0;
  opt.lr = 3e-2;
  const auto state = train(model, p.data, opt);
  ASSERT_FALSE(state.history.empty());
  for (std::size_t e = 0; e + 1 < state.history.size(); ++e) EXPECT_TRUE(state.history[e].improved) << e;
  if (state.history.size() < opt.epochs) {
    EXPECT_FALSE(state.history.back().improved);
    EXPECT_TRUE(state.stopped_early);
  }
}

TEST(Train, RestoresBestParametersAndWritesCheckpoint) {
  const auto& p = small_problem();
  DdpGcn model(p.model(SpatialBlockKind::parallel), p.graphs.elements);
  fixture::TempDir dir("ddpgcn_train_test");
  auto opt = quick_options();
  opt.checkpoint_dir = dir.path / "best";
  const auto state = train(model, p.data, opt);
  EXPECT_EQ(state.epoch, state.history.size());
  EXPECT_EQ(state.steps, state.epoch * opt.max_batches_per_epoch);
  const double best_val = compute_metrics(predict_split(model, p.data.val, opt.batch, opt.val_stride),
                                          split_targets_strided(p.data.val, opt.val_stride))
                              .aggregate.mae;
  EXPECT_NEAR(best_val, state.best_val_mae, 1e-9);
  EXPECT_EQ(read_checkpoint_meta(opt.checkpoint_dir).at("epoch"), state.best_epoch);
}

TEST(Train, SameSeedGivesIdenticalMetrics) {
  const auto& p = small_problem();
  auto run = [&]() {
    ExperimentRunner runner(p.graphs.elements, p.data, quick_options());
    return runner.run(p.model(SpatialBlockKind::stacked), 3).test;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.aggregate.mae, b.aggregate.mae);
  EXPECT_EQ(a.aggregate.rmse, b.aggregate.rmse);
  EXPECT_EQ(a.aggregate.mape, b.aggregate.mape);
}

TEST(Train, InvalidOptions) {
  const auto& p = small_problem();
  DdpGcn model(p.model(SpatialBlockKind::single), p.graphs.elements);
  auto opt = quick_options();
  opt.batch = 0;
  EXPECT_THROW(train(model, p.data, opt), ConfigError);
  opt = quick_options();
  opt.lr = 0.0;
  EXPECT_THROW(train(model, p.data, opt), ConfigError);
}

TEST(Train, DivergenceIsNumericError) {
  const auto& p = small_problem();
  DdpGcn model(p.model(SpatialBlockKind::single), p.graphs.elements);
  auto [x, y] = make_batch(p.data.train, std::vector<std::size_t>{0, 1});
  y[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_step(model, x, y, AdamOptions{}), NumericError);
}

TEST(Summarize, MeanAndPopulationStd) {
  MetricReport a, b;
  a.aggregate.mae = 1.0;
  b.aggregate.mae = 3.0;
  a.per_step = {a.aggregate};
  b.per_step = {b.aggregate};
  const auto s = summarize({a, b});
  EXPECT_DOUBLE_EQ(s.mean.aggregate.mae, 2.0);
  EXPECT_DOUBLE_EQ(s.std.aggregate.mae, 1.0);
  EXPECT_DOUBLE_EQ(s.mean.per_step[0].mae, 2.0);
  EXPECT_THROW(summarize({}), UsageError);
}

TEST(Studies, AblationRowsAndKhopLength) {
  const auto& p = small_problem();
  auto opt = quick_options();
  opt.epochs = 1;
  opt.max_batches_per_epoch = 1;
  ExperimentRunner runner(p.graphs.elements, p.data, opt);
  const auto base = p.model(SpatialBlockKind::stacked, {2, 2});

  const auto none = run_ablation(runner, base, {}, {0});
  ASSERT_EQ(none.size(), 1u);
  EXPECT_EQ(none[0].label, "None");

  const std::vector<ElementGroup> removals{ElementGroup::direction, ElementGroup::positional};
  const auto rows = run_ablation(runner, base, removals, {0, 1});
  ASSERT_EQ(rows.size(), removals.size() + 1);
  EXPECT_EQ(rows[1].label, "direction");
  EXPECT_EQ(rows[0].runs.size(), 2u);
  // the "None" row is served from the cache
  EXPECT_EQ(rows[0].runs[0].aggregate.mae, none[0].runs[0].aggregate.mae);

  auto single = base;
  single.spatial_block = SpatialBlockKind::single;
  EXPECT_THROW(run_ablation(runner, single, removals, {0}), ConfigError);
  auto lone = base;
  lone.groups = {ElementGroup::distance};
  EXPECT_THROW(run_ablation(runner, lone, {ElementGroup::distance}, {0}), ConfigError);

  const auto khop = run_khop_study(runner, base, {1, 2}, {0});
  ASSERT_EQ(khop.size(), 3u);  // one row per K plus the reference row
  EXPECT_EQ(khop[0].label, "ChebNet K=1");
  EXPECT_EQ(khop[2].label, "DDP-GCN(stacked)");
  EXPECT_THROW(run_khop_study(runner, base, {0}, {0}), ConfigError);

  const auto table = metrics_table_text("Removed Component", rows);
  EXPECT_NE(table.find("positional"), std::string::npos);
  EXPECT_NE(metrics_table_csv("Model", khop).find("ChebNet K=2"), std::string::npos);
}

TEST(Studies, ChebyshevOrderOneIsChannelMap) {
  const auto& p = small_problem();
  auto c = p.model(SpatialBlockKind::single);
  c.chebyshev = true;
  c.cheb_k = 1;
  DdpGcn model(c, p.graphs.elements);
  ASSERT_EQ(model.chebyshev_terms().size(), 1u);
  EXPECT_EQ(model.chebyshev_terms()[0], Matrix::identity(c.n_links));
}
