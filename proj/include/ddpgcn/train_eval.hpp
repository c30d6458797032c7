#pragma once

// Metrics, the Historical Average baseline, the training loop, checkpoints
// and the ablation / K-hop experiment harnesses.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddpgcn/data.hpp"
#include "ddpgcn/error.hpp"
#include "ddpgcn/graphs.hpp"
#include "ddpgcn/io.hpp"
#include "ddpgcn/model.hpp"
#include "ddpgcn/tensor.hpp"

namespace ddpgcn {

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kDefaultMapeFloor = 1.0;  // km/h
inline const std::vector<std::size_t> kDefaultReportSteps{6, 9, 12};

struct MetricValues {
  double mae = 0.0;   // km/h
  double mape = 0.0;  // percent
  double rmse = 0.0;  // km/h
  std::size_t count = 0;       // entries in MAE/RMSE
  std::size_t mape_count = 0;  // entries with truth above the MAPE floor
};

/// Metrics for every horizon step (index step-1) plus the aggregate over all
/// steps. `report_steps` (1-based) label the slices shown in tables.
struct MetricReport {
  std::vector<MetricValues> per_step;
  MetricValues aggregate;
  std::vector<std::size_t> report_steps;

  const MetricValues& step(std::size_t s) const {
    if (s == 0 || s > per_step.size()) throw UsageError("metric report has no horizon step " + std::to_string(s));
    return per_step[s - 1];
  }
};

/// `pred` and `truth` are (S,T,N) or (S,T,N,1) in km/h; axis 1 is the horizon.
inline MetricReport compute_metrics(const Tensor& pred, const Tensor& truth,
                                    const std::vector<std::size_t>& report_steps = kDefaultReportSteps,
                                    double mape_floor = kDefaultMapeFloor) {
  if (pred.shape() != truth.shape()) {
    throw UsageError("compute_metrics: shape mismatch " + to_string(pred.shape()) + " vs " +
                     to_string(truth.shape()));
  }
  const Shape& s = pred.shape();
  if (s.size() < 2 || pred.size() == 0) throw UsageError("compute_metrics: need (S,T,...) with data");
  const std::size_t samples = s[0], steps = s[1];
  const std::size_t inner = pred.size() / (samples * steps);
  for (auto st : report_steps)
    if (st == 0 || st > steps) throw UsageError("compute_metrics: report step " + std::to_string(st) + " out of range");

  struct Acc {
    double abs = 0.0, sq = 0.0, pct = 0.0;
    std::size_t n = 0, n_pct = 0;
  };
  std::vector<Acc> acc(steps);
  for (std::size_t i = 0; i < samples; ++i)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t idx = (i * steps + t) * inner + k;
        const double y = truth[idx], e = pred[idx] - y;
        Acc& a = acc[t];
        a.abs += std::abs(e);
        a.sq += e * e;
        ++a.n;
        if (y > mape_floor) {
          a.pct += std::abs(e) / y;
          ++a.n_pct;
        }
      }
  auto finish = [](const Acc& a) {
    MetricValues v;
    v.count = a.n;
    v.mape_count = a.n_pct;
    v.mae = a.abs / static_cast<double>(a.n);
    v.rmse = std::sqrt(a.sq / static_cast<double>(a.n));
    v.mape = a.n_pct ? 100.0 * a.pct / static_cast<double>(a.n_pct) : 0.0;
    return v;
  };
  MetricReport r;
  r.report_steps = report_steps;
  Acc total;
  for (const auto& a : acc) {
    r.per_step.push_back(finish(a));
    total.abs += a.abs;
    total.sq += a.sq;
    total.pct += a.pct;
    total.n += a.n;
    total.n_pct += a.n_pct;
  }
  r.aggregate = finish(total);
  return r;
}

// ---------------------------------------------------------------------------
// Forecast arrays

/// Ground-truth targets (S,T,N) in km/h for every window of a split.
inline Tensor split_targets(const WindowedDataset& d) {
  const std::size_t n = d.links();
  Tensor out(Shape{d.size(), d.horizon, n});
  const Matrix& raw = d.series->raw.values;
  for (std::size_t s = 0; s < d.size(); ++s)
    for (std::size_t t = 0; t < d.horizon; ++t)
      std::copy_n(raw.row(d.target_row(s, t)).data(), n, out.data().data() + (s * d.horizon + t) * n);
  return out;
}

/// HA forecast (S,T,N) in km/h: mean of training observations sharing the
/// target's (weekday, time of day, link); per-link training mean when the key
/// never occurs in training.
inline Tensor historical_average(const DatasetSplits& splits, const WindowedDataset& target) {
  const auto& series = *splits.series;
  const std::size_t n = series.raw.links();
  const std::size_t slots = 7 * 1440 / static_cast<std::size_t>(kIntervalMinutes);
  auto slot_of = [](std::int64_t ts) {
    return weekday_of(ts) * (1440 / kIntervalMinutes) + minute_of_day(ts) / kIntervalMinutes;
  };
  std::vector<double> sums(slots * n, 0.0);
  std::vector<std::size_t> counts(slots, 0);
  std::vector<double> link_mean(n, 0.0);
  const std::size_t begin = splits.train.row_begin, end = splits.train.row_end;
  if (end <= begin) throw DataError("historical average: empty training split");
  for (std::size_t r = begin; r < end; ++r) {
    const std::size_t slot = static_cast<std::size_t>(slot_of(series.raw.timestamps[r]));
    ++counts[slot];
    for (std::size_t i = 0; i < n; ++i) {
      sums[slot * n + i] += series.raw.values(r, i);
      link_mean[i] += series.raw.values(r, i);
    }
  }
  for (auto& m : link_mean) m /= static_cast<double>(end - begin);

  Tensor out(Shape{target.size(), target.horizon, n});
  for (std::size_t s = 0; s < target.size(); ++s)
    for (std::size_t t = 0; t < target.horizon; ++t) {
      const std::size_t slot = static_cast<std::size_t>(slot_of(series.raw.timestamps[target.target_row(s, t)]));
      double* dst = out.data().data() + (s * target.horizon + t) * n;
      for (std::size_t i = 0; i < n; ++i)
        dst[i] = counts[slot] ? sums[slot * n + i] / static_cast<double>(counts[slot]) : link_mean[i];
    }
  return out;
}

/// Model forecast (S,T,N) in km/h for every window of a split, evaluated in
/// fixed-size batches so repeated calls are bit-identical.
inline Tensor predict_split(DdpGcn& model, const WindowedDataset& d, std::size_t batch = 32,
                            std::size_t stride = 1) {
  if (batch == 0 || stride == 0) throw UsageError("predict_split: batch and stride must be positive");
  const std::size_t n = d.links();
  std::vector<std::size_t> samples;
  for (std::size_t s = 0; s < d.size(); s += stride) samples.push_back(s);
  Tensor out(Shape{samples.size(), d.horizon, n});
  const auto& stats = d.series->stats;
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += batch) {
    const std::size_t b1 = std::min(samples.size(), b0 + batch);
    const std::span<const std::size_t> idx(samples.data() + b0, b1 - b0);
    auto [x, y] = make_batch(d, idx);
    const Tensor p = model.predict(x);
    double* dst = out.data().data() + b0 * d.horizon * n;
    for (std::size_t k = 0; k < p.size(); ++k) dst[k] = p[k] * stats.std + stats.mean;
  }
  return out;
}

inline Tensor split_targets_strided(const WindowedDataset& d, std::size_t stride) {
  if (stride == 1) return split_targets(d);
  const Tensor all = split_targets(d);
  const std::size_t per = d.horizon * d.links();
  std::vector<double> out;
  std::size_t count = 0;
  for (std::size_t s = 0; s < d.size(); s += stride, ++count)
    out.insert(out.end(), all.data().begin() + static_cast<std::ptrdiff_t>(s * per),
               all.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * per));
  return Tensor(Shape{count, d.horizon, d.links()}, std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes `meta.json` (names, shapes, Adam step, extra fields) and one blob per parameter.
inline void save_checkpoint(const std::filesystem::path& dir, const std::vector<Parameter>& params,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta = extra;
  meta["format"] = "ddpgcn-checkpoint-v1";
  meta["parameters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const std::string file = "param_" + std::to_string(i) + ".bin";
    write_f64_blob(dir / file, p.value.data());
    meta["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape()}, {"step", p.step}, {"file", file}});
  }
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write checkpoint meta in " + dir.string());
  out << meta.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw DataError("checkpoint has no meta.json: " + dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint meta.json: " + std::string(e.what()));
  }
}

/// Loads values into `params`, matching by name and shape.
inline void load_checkpoint(const std::filesystem::path& dir, std::vector<Parameter>& params) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("format", "") != "ddpgcn-checkpoint-v1") throw DataError("unrecognized checkpoint format");
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : meta.at("parameters")) entries[e.at("name").get<std::string>()] = e;
  if (entries.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model has " +
                    std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second.at("shape").get<Shape>() != p.value.shape()) {
      throw DataError("checkpoint parameter '" + p.name + "' has a different shape");
    }
    auto values = read_f64_blob(dir / it->second.at("file").get<std::string>(), p.value.size());
    p.value = Tensor(p.value.shape(), std::move(values));
    p.step = it->second.at("step").get<std::int64_t>();
  }
}

// ---------------------------------------------------------------------------
// Training

enum class LossKind { mae, mse };

inline const char* to_string(LossKind k) { return k == LossKind::mae ? "mae" : "mse"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "mae") return LossKind::mae;
  if (s == "mse") return LossKind::mse;
  throw ConfigError("loss must be mae or mse, got '" + s + "'");
}

struct TrainOptions {
  std::size_t epochs = 100;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t patience = 10;
  LossKind loss = LossKind::mae;
  std::size_t max_batches_per_epoch = 0;  // 0 = full pass over the training windows
  std::size_t val_stride = 1;             // evaluate every k-th validation window
  std::uint64_t seed = 0;                 // shuffling
  std::filesystem::path checkpoint_dir;   // best parameters persisted here when set
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // normalized units
  double val_mae = 0.0;     // km/h
  bool improved = false;
};

struct TrainState {
  std::size_t epoch = 0;  // epochs run
  std::size_t steps = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::uint64_t seed = 0;
  std::vector<EpochLog> history;
};

inline Var loss_value(LossKind kind, const Var& pred, const Var& target) {
  return reduce_mean(kind == LossKind::mae ? absolute_error(pred, target) : squared_error(pred, target));
}

/// One Adam step on a batch; returns the batch loss.
inline double train_step(DdpGcn& model, const Tensor& x, const Tensor& y, const AdamOptions& adam,
                         LossKind kind = LossKind::mae) {
  Tape tape;
  const Var loss = loss_value(kind, model.forward(tape, tape.constant(x)), tape.constant(y));
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("training diverged: loss is " + std::to_string(value));
  zero_grads(model.parameters());
  tape.backward(loss);
  adam_step(model.parameters(), adam);
  return value;
}

/// Mini-batch Adam training with early stopping on validation MAE (km/h).
/// Training stops once the number of consecutive non-improving epochs
/// exceeds `patience`; the best parameters are restored at the end.
inline TrainState train(DdpGcn& model, const DatasetSplits& data, const TrainOptions& opt,
                        const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (opt.batch == 0) throw ConfigError("training batch size must be positive");
  if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (opt.val_stride == 0) throw ConfigError("val_stride must be positive");
  TrainState state;
  state.seed = opt.seed;
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Tensor val_truth = split_targets_strided(data.val, opt.val_stride);
  const AdamOptions adam{opt.lr};
  std::vector<Tensor> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t batches = (order.size() + opt.batch - 1) / opt.batch;
    if (opt.max_batches_per_epoch) batches = std::min(batches, opt.max_batches_per_epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * opt.batch, hi = std::min(order.size(), lo + opt.batch);
      auto [x, y] = make_batch(data.train, std::span<const std::size_t>(order.data() + lo, hi - lo));
      try {
        loss_sum += train_step(model, x, y, adam, opt.loss);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ")");
      }
      ++state.steps;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(batches);
    log.val_mae = compute_metrics(predict_split(model, data.val, opt.batch, opt.val_stride), val_truth)
                      .aggregate.mae;
    if (!std::isfinite(log.val_mae)) throw NumericError("validation MAE is not finite at epoch " + std::to_string(epoch));
    log.improved = log.val_mae < state.best_val_mae;
    state.epoch = epoch;
    if (log.improved) {
      state.best_val_mae = log.val_mae;
      state.best_epoch = epoch;
      since_best = 0;
      best.clear();
      for (const auto& p : model.parameters()) best.push_back(p.value);
      if (!opt.checkpoint_dir.empty()) {
        save_checkpoint(opt.checkpoint_dir, model.parameters(),
                        {{"epoch", epoch}, {"best_val_mae", log.val_mae}});
      }
    } else {
      ++since_best;
    }
    state.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!log.improved && since_best > opt.patience) {
      state.stopped_early = epoch < opt.epochs;
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) model.parameters()[i].value = best[i];
  return state;
}

// ---------------------------------------------------------------------------
// Experiments

struct RunResult {
  MetricReport test;
  TrainState state;
  double seconds = 0.0;
};

/// Mean and population standard deviation of metrics across repeats.
struct MetricSummary {
  MetricReport mean;
  MetricReport std;
  std::size_t repeats = 0;
};

inline MetricSummary summarize(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw UsageError("summarize: no reports");
  MetricSummary s;
  s.repeats = reports.size();
  s.mean = reports.front();
  s.std = reports.front();
  const double r = static_cast<double>(reports.size());
  auto fold = [&](auto get) {
    double m = 0.0, v = 0.0;
    for (const auto& rep : reports) m += get(rep);
    m /= r;
    for (const auto& rep : reports) v += (get(rep) - m) * (get(rep) - m);
    return std::pair{m, std::sqrt(v / r)};
  };
  auto apply = [&](auto select) {
    for (auto field : {&MetricValues::mae, &MetricValues::mape, &MetricValues::rmse}) {
      const auto [m, sd] = fold([&](const MetricReport& rep) { return select(rep).*field; });
      select(s.mean).*field = m;
      select(s.std).*field = sd;
    }
  };
  apply([](auto& rep) -> auto& { return rep.aggregate; });
  for (std::size_t t = 0; t < s.mean.per_step.size(); ++t)
    apply([t](auto& rep) -> auto& { return rep.per_step[t]; });
  return s;
}

/// Canonical text key of a model configuration (used for run caching and reports).
inline std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << to_string(c.spatial_block) << (c.chebyshev ? "+cheb" + std::to_string(c.cheb_k) : "") << " ch=";
  for (auto ch : c.channels) os << ch << ',';
  os << " kw=" << c.temporal_kernel << " T'=" << c.history << " T=" << c.horizon << " order=";
  for (auto g : c.stacked_order) os << to_string(g) << ',';
  os << " groups=";
  for (auto g : c.groups) os << to_string(g) << ',';
  os << " tf=" << c.temporal_first;
  return os.str();
}

/// Trains and tests models on one dataset and graph set, caching results by
/// (configuration, seed) so studies can share runs.
class ExperimentRunner {
 public:
  ExperimentRunner(const GraphElementSet& elements, const DatasetSplits& data, TrainOptions options)
      : elements_(elements), data_(data), options_(std::move(options)) {}

  using Listener = std::function<void(const ModelConfig&, std::uint64_t seed, const RunResult&)>;
  void set_listener(Listener l) { listener_ = std::move(l); }

  const RunResult& run(ModelConfig config, std::uint64_t seed) {
    config.seed = seed;
    config.n_links = elements_.n();
    const auto key = std::pair{describe(config), seed};
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    DdpGcn model(config, elements_);
    TrainOptions opt = options_;
    opt.seed = seed;
    opt.checkpoint_dir.clear();
    RunResult result;
    result.state = train(model, data_, opt);
    result.test = compute_metrics(predict_split(model, data_.test, opt.batch), split_targets(data_.test));
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto& stored = cache_.emplace(key, std::move(result)).first->second;
    if (listener_) listener_(config, seed, stored);
    return stored;
  }

  MetricSummary run_repeats(const ModelConfig& config, const std::vector<std::uint64_t>& seeds) {
    std::vector<MetricReport> reports;
    for (auto s : seeds) reports.push_back(run(config, s).test);
    return summarize(reports);
  }

  const DatasetSplits& data() const { return data_; }

 private:
  const GraphElementSet& elements_;
  const DatasetSplits& data_;
  TrainOptions options_;
  Listener listener_;
  std::map<std::pair<std::string, std::uint64_t>, RunResult> cache_;
};

struct StudyRow {
  std::string label;
  std::vector<MetricReport> runs;  // one per seed
  MetricSummary summary;
};

/// One row per removal setting: "None" first, then each removed group.
inline std::vector<StudyRow> run_ablation(ExperimentRunner& runner, const ModelConfig& base,
                                          const std::vector<ElementGroup>& removals,
                                          const std::vector<std::uint64_t>& seeds) {
  if (base.spatial_block == SpatialBlockKind::single) {
    throw ConfigError("ablation needs a parallel or stacked spatial block");
  }
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<std::pair<std::string, ModelConfig>> settings{{"None", base}};
  for (auto g : removals) {
    ModelConfig c = base;
    c.groups.erase(std::remove(c.groups.begin(), c.groups.end(), g), c.groups.end());
    if (c.groups.empty()) throw ConfigError(std::string("removing '") + to_string(g) + "' leaves no element group");
    settings.emplace_back(to_string(g), c);
  }
  std::vector<StudyRow> rows;
  for (auto& [label, cfg] : settings) {
    StudyRow row;
    row.label = label;
    for (auto s : seeds) row.runs.push_back(runner.run(cfg, s).test);
    row.summary = summarize(row.runs);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Distance-only Chebyshev models for each K, followed by the reference row
/// for `reference` (normally the stacked model).
inline std::vector<StudyRow> run_khop_study(ExperimentRunner& runner, const ModelConfig& reference,
                                            const std::vector<std::size_t>& ks,
                                            const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("K-hop study needs at least one seed");
  std::vector<StudyRow> rows;
  for (auto k : ks) {
    if (k < 1) throw ConfigError("K values must be >= 1");
    ModelConfig c = reference;
    c.spatial_block = SpatialBlockKind::single;
    c.chebyshev = true;
    c.cheb_k = k;
    StudyRow row;
    row.label = "ChebNet K=" + std::to_string(k);
    for (auto s : seeds) row.runs.push_back(runner.run(c, s).test);
    row.summary = summarize(row.runs);
    rows.push_back(std::move(row));
  }
  StudyRow ref;
  ref.label = std::string("DDP-GCN(") + to_string(reference.spatial_block) + ")";
  for (auto s : seeds) ref.runs.push_back(runner.run(reference, s).test);
  ref.summary = summarize(ref.runs);
  rows.push_back(std::move(ref));
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const MetricValues& v) {
  return {{"mae", v.mae}, {"mape", v.mape}, {"rmse", v.rmse}, {"count", v.count}, {"mape_count", v.mape_count}};
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t t = 0; t < r.per_step.size(); ++t) {
    auto j = to_json(r.per_step[t]);
    j["step"] = t + 1;
    j["minutes"] = (t + 1) * kIntervalMinutes;
    steps.push_back(j);
  }
  return {{"aggregate", to_json(r.aggregate)}, {"per_step", steps}, {"report_steps", r.report_steps}};
}

inline nlohmann::json to_json(const StudyRow& row) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : row.runs) runs.push_back(to_json(r));
  return {{"label", row.label},
          {"mean", to_json(row.summary.mean)},
          {"std", to_json(row.summary.std)},
          {"repeats", row.summary.repeats},
          {"runs", runs}};
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace detail

/// Wide CSV: one row per label, MAE/MAPE/RMSE at each report step and overall.
inline std::string metrics_table_csv(const std::string& first_column, const std::vector<StudyRow>& rows) {
  std::ostringstream os;
  os << first_column;
  if (rows.empty()) return os.str() + '\n';
  const auto& steps = rows.front().summary.mean.report_steps;
  for (auto s : steps) {
    const auto m = s * kIntervalMinutes;
    os << ",MAE@" << m << "min,MAPE@" << m << "min,RMSE@" << m << "min";
  }
  os << ",MAE,MAPE,RMSE,repeats\n";
  for (const auto& row : rows) {
    const auto& mean = row.summary.mean;
    os << row.label;
    for (auto s : steps)
      os << ',' << detail::fixed(mean.step(s).mae) << ',' << detail::fixed(mean.step(s).mape) << ','
         << detail::fixed(mean.step(s).rmse);
    os << ',' << detail::fixed(mean.aggregate.mae) << ',' << detail::fixed(mean.aggregate.mape) << ','
       << detail::fixed(mean.aggregate.rmse) << ',' << row.summary.repeats << '\n';
  }
  return os.str();
}

/// Plain-text table with mean ± std at the report steps.
inline std::string metrics_table_text(const std::string& first_column, const std::vector<StudyRow>& rows) {
  std::ostringstream os;
  if (rows.empty()) return {};
  const auto& steps = rows.front().summary.mean.report_steps;
  std::size_t width = first_column.size();
  for (const auto& r : rows) width = std::max(width, r.label.size());
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  os << pad(first_column, width);
  for (auto s : steps) {
    const auto label = std::to_string(s * kIntervalMinutes) + " min";
    os << " | " << pad(label + " MAE", 13) << ' ' << pad("MAPE(%)", 13) << ' ' << pad("RMSE", 13);
  }
  os << '\n';
  for (const auto& row : rows) {
    os << pad(row.label, width);
    for (auto s : steps) {
      const auto& m = row.summary.mean.step(s);
      const auto& d = row.summary.std.step(s);
      os << " | " << pad(detail::fixed(m.mae) + "±" + detail::fixed(d.mae), 14) << pad(detail::fixed(m.mape) + "±" + detail::fixed(d.mape), 14)
         << pad(detail::fixed(m.rmse) + "±" + detail::fixed(d.rmse), 14);
    }
    os << '\n';
  }
  return os.str();
}

/// Long-format CSV `label,repeat,step,minutes,metric,value` for plotting.
inline std::string metrics_long_csv(const std::vector<StudyRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "label,repeat,step,minutes,metric,value\n";
  for (const auto& row : rows)
    for (std::size_t r = 0; r < row.runs.size(); ++r)
      for (std::size_t t = 0; t < row.runs[r].per_step.size(); ++t) {
        const auto& v = row.runs[r].per_step[t];
        const std::size_t step = t + 1;
        for (auto [name, value] : {std::pair{"mae", v.mae}, {"mape", v.mape}, {"rmse", v.rmse}})
          os << row.label << ',' << r << ',' << step << ',' << step * kIntervalMinutes << ',' << name << ','
             << value << '\n';
      }
  return os.str();
}

}  // namespace ddpgcn
