#pragma once

// Speed-series ingestion, the synthetic grid generator, z-score
// normalization and calendar-aware splitting into sliding windows.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ddpgcn/error.hpp"
#include "ddpgcn/geometry.hpp"
#include "ddpgcn/matrix.hpp"
#include "ddpgcn/tensor.hpp"

namespace ddpgcn {

inline constexpr std::int64_t kIntervalMinutes = 5;

// ---------------------------------------------------------------------------
// Timestamps: minutes since 1970-01-01T00:00 (naive local time)

inline std::int64_t make_timestamp(int year, unsigned month, unsigned day, int hour = 0, int minute = 0) {
  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
  if (!ymd.ok()) throw DataError("invalid calendar date");
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 1440 + hour * 60 + minute;
}

/// Parses `YYYY-MM-DDTHH:MM[:SS]` (a space may replace `T`).
inline std::int64_t parse_timestamp(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  const int fields = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &consumed);
  if (fields < 6 || (sep != 'T' && sep != ' ')) throw DataError("bad timestamp '" + s + "'");
  std::string rest = s.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty()) {
    if (std::sscanf(rest.c_str(), ":%2d", &sec) != 1 || rest.size() != 3) {
      throw DataError("bad timestamp '" + s + "'");
    }
    if (sec != 0) throw DataError("timestamp '" + s + "' is not on a whole minute");
  }
  if (h < 0 || h > 23 || mi < 0 || mi > 59 || mo < 1 || mo > 12 || d < 1 || d > 31) {
    throw DataError("bad timestamp '" + s + "'");
  }
  return make_timestamp(y, static_cast<unsigned>(mo), static_cast<unsigned>(d), h, mi);
}

inline std::string format_timestamp(std::int64_t minutes) {
  using namespace std::chrono;
  const std::int64_t days = minutes >= 0 ? minutes / 1440 : -((-minutes + 1439) / 1440);
  const std::int64_t in_day = minutes - days * 1440;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(in_day / 60), static_cast<int>(in_day % 60));
  return buf;
}

/// 0 = Monday ... 6 = Sunday.
inline unsigned weekday_of(std::int64_t minutes) {
  using namespace std::chrono;
  const std::int64_t days = minutes >= 0 ? minutes / 1440 : -((-minutes + 1439) / 1440);
  return weekday{sys_days{std::chrono::days{days}}}.iso_encoding() - 1;
}

inline unsigned minute_of_day(std::int64_t minutes) {
  const std::int64_t m = minutes % 1440;
  return static_cast<unsigned>(m < 0 ? m + 1440 : m);
}

// ---------------------------------------------------------------------------
// Speed series

struct SpeedSeries {
  std::vector<std::int64_t> timestamps;  // minutes
  Matrix values;                         // rows = time, cols = links, km/h

  std::size_t rows() const { return values.rows(); }
  std::size_t links() const { return values.cols(); }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_speed(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError(where + ": missing or unparsable speed '" + s + "'");
  }
  if (!std::isfinite(v) || v < 0.0) throw DataError(where + ": speed must be finite and >= 0");
  return v;
}

}  // namespace detail

/// Checks uniform 5-minute spacing and value ranges.
inline void validate_series(const SpeedSeries& s) {
  if (s.timestamps.size() != s.rows()) throw DataError("speed series: timestamp/value row mismatch");
  for (std::size_t r = 1; r < s.timestamps.size(); ++r) {
    if (s.timestamps[r] - s.timestamps[r - 1] != kIntervalMinutes) {
      throw DataError("speed series row " + std::to_string(r) + ": timestamp " +
                      format_timestamp(s.timestamps[r]) + " is not 5 minutes after " +
                      format_timestamp(s.timestamps[r - 1]));
    }
  }
  for (double v : s.values.data())
    if (!std::isfinite(v) || v < 0.0) throw DataError("speed series: non-finite or negative value");
}

/// Reads `timestamp,link_0,...,link_{N-1}`. `expected_links` (when nonzero)
/// must match the column count.
inline SpeedSeries load_speeds(const std::string& path, std::size_t expected_links = 0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open speeds file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header.empty() || header[0] != "timestamp") throw DataError(path + ": first column must be 'timestamp'");
  const std::size_t n = header.size() - 1;
  for (std::size_t i = 0; i < n; ++i)
    if (header[i + 1] != "link_" + std::to_string(i)) {
      throw DataError(path + ": column " + std::to_string(i + 1) + " must be link_" + std::to_string(i));
    }
  if (expected_links != 0 && n != expected_links) {
    throw DataError(path + ": " + std::to_string(n) + " link columns but the link set has " +
                    std::to_string(expected_links));
  }
  SpeedSeries s;
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path + " data row " + std::to_string(row);
    if (cells.size() != n + 1) throw DataError(where + ": expected " + std::to_string(n + 1) + " columns");
    const auto ts = parse_timestamp(cells[0]);
    if (!s.timestamps.empty() && ts - s.timestamps.back() != kIntervalMinutes) {
      throw DataError(where + ": timestamp " + cells[0] + " breaks the uniform 5-minute spacing");
    }
    s.timestamps.push_back(ts);
    for (std::size_t i = 0; i < n; ++i) values.push_back(detail::parse_speed(cells[i + 1], where));
    ++row;
  }
  if (row == 0) throw DataError(path + ": no data rows");
  s.values = Matrix(row, n, std::move(values));
  return s;
}

inline void save_speeds(const std::string& path, const SpeedSeries& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write speeds file: " + path);
  out << "timestamp";
  for (std::size_t i = 0; i < s.links(); ++i) out << ",link_" << i;
  out << '\n';
  for (std::size_t r = 0; r < s.rows(); ++r) {
    out << format_timestamp(s.timestamps[r]);
    for (std::size_t i = 0; i < s.links(); ++i) out << ',' << detail::format_double(s.values(r, i));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic grid network

struct SyntheticSpec {
  std::size_t grid_rows = 6;  // intersections per column
  std::size_t grid_cols = 6;  // intersections per row
  double min_link_length = 300.0;  // meters
  double max_link_length = 600.0;
  double base_speed = 30.0;  // km/h
  double daily_amplitude = 5.0;
  double direction_effect = 6.0;
  double positional_effect = 3.0;
  double noise_std = 1.0;
  double signal_timescale = 24.0;  // AR(1) correlation time of group signals, in steps
  double propagation_lag = 2.0;    // steps of delay per link upstream of the group front
  std::size_t cells_per_side = 2;  // destination cells along each axis
  std::size_t days = 28;
  std::int64_t start = make_timestamp(2018, 4, 1);
  std::uint64_t seed = 0;
};

struct SyntheticData {
  LinkSet links;
  SpeedSeries speeds;
  std::vector<std::size_t> direction_group;    // direction quadrant 0..3
  std::vector<std::size_t> destination_cell;   // cell of the end point
};

/// Direction quadrant floor(angle / (pi/2)); axis-aligned links map to
/// 0 = +x, 1 = +y, 2 = -x, 3 = -y.
inline std::size_t direction_quadrant(const LinkVector& link) {
  const double a = link_direction(link, DirectionConvention::standard);
  return static_cast<std::size_t>(std::floor(a / (std::numbers::pi / 2.0) + 1e-9)) % 4;
}

/// Rectangular grid of two-way streets. Speed of link i at step t is
///   base + A sin(2 pi tod) + dir_effect * g_dir[q_i](t - lag_i)
///        + pos_effect * g_pos[cell_i](t) + noise,
/// where g_* are unit-variance AR(1) group signals, q_i the link's direction
/// group, cell_i the grid cell containing its end point, and lag_i grows by
/// `propagation_lag` per link upstream of the downstream grid edge (a
/// disturbance reaches the front of a street first). Values are clamped at 0.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.grid_rows < 2 || spec.grid_cols < 2) throw ConfigError("synthetic grid needs at least 2x2 intersections");
  if (!(spec.min_link_length > 0.0) || spec.max_link_length < spec.min_link_length) {
    throw ConfigError("synthetic link length range is invalid");
  }
  if (spec.direction_effect < 0.0 || spec.positional_effect < 0.0 || spec.daily_amplitude < 0.0 ||
      spec.noise_std < 0.0 || spec.propagation_lag < 0.0) {
    throw ConfigError("synthetic amplitudes and lag must be >= 0");
  }
  if (!(spec.signal_timescale > 0.0)) throw ConfigError("synthetic signal timescale must be positive");
  if (spec.days == 0) throw ConfigError("synthetic data needs at least one day");
  if (spec.cells_per_side == 0) throw ConfigError("cells_per_side must be positive");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> length_dist(spec.min_link_length, spec.max_link_length);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> xs{0.0}, ys{0.0};
  for (std::size_t c = 1; c < spec.grid_cols; ++c) xs.push_back(xs.back() + std::round(length_dist(rng)));
  for (std::size_t r = 1; r < spec.grid_rows; ++r) ys.push_back(ys.back() + std::round(length_dist(rng)));

  // position index counted from the downstream edge
  struct Raw {
    Point2 a, b;
    std::size_t upstream_steps;
  };
  std::vector<Raw> raw;
  const std::size_t cols = spec.grid_cols, rows = spec.grid_rows;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c + 1 < cols; ++c) {
      const Point2 p{xs[c], ys[r]}, q{xs[c + 1], ys[r]};
      raw.push_back({p, q, cols - 2 - c});  // eastbound: front is the last column
      raw.push_back({q, p, c});             // westbound: front is column 0
    }
  for (std::size_t c = 0; c < cols; ++c)
    for (std::size_t r = 0; r + 1 < rows; ++r) {
      const Point2 p{xs[c], ys[r]}, q{xs[c], ys[r + 1]};
      raw.push_back({p, q, rows - 2 - r});
      raw.push_back({q, p, r});
    }

  std::vector<LinkVector> links;
  for (std::size_t i = 0; i < raw.size(); ++i) links.push_back({i, raw[i].a, raw[i].b});
  SyntheticData out;
  out.links = make_link_set(std::move(links));

  const double width = xs.back(), height = ys.back();
  const std::size_t n = raw.size();
  std::vector<std::size_t> lag(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = out.links.links[i];
    out.direction_group.push_back(direction_quadrant(l));
    const auto cx = std::min<std::size_t>(spec.cells_per_side - 1,
                                          static_cast<std::size_t>(l.end.x / width * spec.cells_per_side));
    const auto cy = std::min<std::size_t>(spec.cells_per_side - 1,
                                          static_cast<std::size_t>(l.end.y / height * spec.cells_per_side));
    out.destination_cell.push_back(cy * spec.cells_per_side + cx);
    lag[i] = static_cast<std::size_t>(std::llround(spec.propagation_lag * static_cast<double>(raw[i].upstream_steps)));
  }
  const std::size_t max_lag = *std::max_element(lag.begin(), lag.end());

  const std::size_t steps = spec.days * 1440 / kIntervalMinutes;
  const std::size_t burn = max_lag + static_cast<std::size_t>(std::ceil(5.0 * spec.signal_timescale));
  const double phi = std::exp(-1.0 / spec.signal_timescale);
  const double innovation = std::sqrt(1.0 - phi * phi);
  auto ar_signal = [&](std::size_t len) {
    std::vector<double> g(len);
    double state = normal(rng);
    for (auto& v : g) {
      state = phi * state + innovation * normal(rng);
      v = state;
    }
    return g;
  };
  std::vector<std::vector<double>> g_dir, g_pos;
  for (std::size_t q = 0; q < 4; ++q) g_dir.push_back(ar_signal(steps + burn));
  const std::size_t cells = spec.cells_per_side * spec.cells_per_side;
  for (std::size_t c = 0; c < cells; ++c) g_pos.push_back(ar_signal(steps + burn));

  out.speeds.values = Matrix(steps, n);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::int64_t ts = spec.start + static_cast<std::int64_t>(t) * kIntervalMinutes;
    out.speeds.timestamps.push_back(ts);
    const double day_phase = static_cast<double>(minute_of_day(ts)) / 1440.0;
    const double daily = spec.daily_amplitude * std::sin(2.0 * std::numbers::pi * day_phase);
    for (std::size_t i = 0; i < n; ++i) {
      const double dir = g_dir[out.direction_group[i]][t + burn - lag[i]];
      const double pos = g_pos[out.destination_cell[i]][t + burn];
      double v = spec.base_speed + daily + spec.direction_effect * dir + spec.positional_effect * pos;
      if (spec.noise_std > 0.0) v += spec.noise_std * normal(rng);
      out.speeds.values(t, i) = std::max(0.0, v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormalizationStats {
  double mean = 0.0;  // km/h
  double std = 1.0;   // km/h
};

inline NormalizationStats compute_stats(const Matrix& values, std::size_t row_begin, std::size_t row_end) {
  if (row_end <= row_begin) throw DataError("normalization statistics need at least one row");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = row_begin; r < row_end; ++r)
    for (double v : values.row(r)) {
      sum += v;
      ++count;
    }
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (std::size_t r = row_begin; r < row_end; ++r)
    for (double v : values.row(r)) ss += (v - mean) * (v - mean);
  const double std = std::sqrt(ss / static_cast<double>(count));
  if (!(std > 0.0)) throw DataError("normalization: standard deviation is zero (constant series)");
  return {mean, std};
}

inline Matrix zscore(const Matrix& values, const NormalizationStats& stats) {
  if (!(stats.std > 0.0)) throw DataError("zscore: standard deviation must be positive");
  Matrix out = values;
  for (double& v : out.data()) v = (v - stats.mean) / stats.std;
  return out;
}

inline Matrix inverse_zscore(const Matrix& values, const NormalizationStats& stats) {
  if (!(stats.std > 0.0)) throw DataError("inverse_zscore: standard deviation must be positive");
  Matrix out = values;
  for (double& v : out.data()) v = v * stats.std + stats.mean;
  return out;
}

// ---------------------------------------------------------------------------
// Splitting and windowing

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// Normalized series after day exclusion, shared by the three splits.
struct PreparedSeries {
  SpeedSeries raw;     // km/h, weekend rows removed when requested
  Matrix normalized;   // z-scored with training statistics
  NormalizationStats stats;
};

/// Sliding windows (stride 1) of one split. Sample s covers rows
/// starts[s] .. starts[s] + history + horizon - 1 of the prepared series.
struct WindowedDataset {
  std::shared_ptr<const PreparedSeries> series;
  std::vector<std::size_t> starts;
  std::size_t history = 12;
  std::size_t horizon = 12;
  Split split = Split::train;
  std::size_t row_begin = 0;  // split row range in the prepared series
  std::size_t row_end = 0;

  std::size_t size() const { return starts.size(); }
  std::size_t links() const { return series->raw.links(); }
  std::size_t target_row(std::size_t sample, std::size_t step) const {
    return starts[sample] + history + step;
  }
};

struct DatasetSplits {
  std::shared_ptr<const PreparedSeries> series;
  WindowedDataset train, val, test;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

inline std::size_t weekend_row_count(const SpeedSeries& s) {
  std::size_t c = 0;
  for (auto ts : s.timestamps) c += weekday_of(ts) >= 5;
  return c;
}

/// Drops Saturday/Sunday rows when asked, splits the remaining rows in time
/// order by `ratios`, z-scores with training statistics and enumerates
/// windows that stay inside one split and one contiguous 5-minute run.
inline DatasetSplits split_and_window(const SpeedSeries& series, std::size_t history, std::size_t horizon,
                                      SplitRatios ratios = {}, bool exclude_weekends = true) {
  if (history == 0 || horizon == 0) throw ConfigError("history and horizon must be positive");
  if (ratios.train <= 0.0 || ratios.val < 0.0 || ratios.test < 0.0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  auto prepared = std::make_shared<PreparedSeries>();
  std::vector<double> kept;
  for (std::size_t r = 0; r < series.rows(); ++r) {
    if (exclude_weekends && weekday_of(series.timestamps[r]) >= 5) continue;
    prepared->raw.timestamps.push_back(series.timestamps[r]);
    kept.insert(kept.end(), series.values.row(r).begin(), series.values.row(r).end());
  }
  const std::size_t rows = prepared->raw.timestamps.size();
  if (rows == 0) throw DataError("no rows left after excluding weekends");
  prepared->raw.values = Matrix(rows, series.links(), std::move(kept));

  const double total = static_cast<double>(rows);
  const auto n_train = static_cast<std::size_t>(std::floor(ratios.train * total + 1e-9));
  const auto n_train_val =
      std::min(rows, static_cast<std::size_t>(std::floor((ratios.train + ratios.val) * total + 1e-9)));
  prepared->stats = compute_stats(prepared->raw.values, 0, n_train);
  prepared->normalized = zscore(prepared->raw.values, prepared->stats);

  DatasetSplits out;
  out.series = prepared;
  const std::size_t span = history + horizon;
  auto make = [&](Split split, std::size_t begin, std::size_t end) {
    WindowedDataset d;
    d.series = prepared;
    d.history = history;
    d.horizon = horizon;
    d.split = split;
    d.row_begin = begin;
    d.row_end = end;
    // run_start = first row of the current contiguous run
    std::size_t run_start = begin;
    for (std::size_t r = begin; r < end; ++r) {
      if (r > begin && prepared->raw.timestamps[r] - prepared->raw.timestamps[r - 1] != kIntervalMinutes) {
        run_start = r;
      }
      if (r + 1 >= run_start + span) d.starts.push_back(r + 1 - span);
    }
    if (d.starts.empty()) {
      throw DataError(std::string("split '") + to_string(split) + "' is too short for one window of " +
                      std::to_string(span) + " rows");
    }
    return d;
  };
  out.train = make(Split::train, 0, n_train);
  out.val = make(Split::val, n_train, n_train_val);
  out.test = make(Split::test, n_train_val, rows);
  return out;
}

/// Normalized model inputs (B,T',N,1) and targets (B,T,N,1) for the given samples.
inline std::pair<Tensor, Tensor> make_batch(const WindowedDataset& d, std::span<const std::size_t> samples) {
  const std::size_t n = d.links();
  const std::size_t b = samples.size();
  Tensor x(Shape{b, d.history, n, 1});
  Tensor y(Shape{b, d.horizon, n, 1});
  const Matrix& z = d.series->normalized;
  for (std::size_t s = 0; s < b; ++s) {
    const std::size_t start = d.starts.at(samples[s]);
    for (std::size_t t = 0; t < d.history; ++t)
      std::copy_n(z.row(start + t).data(), n, x.data().data() + (s * d.history + t) * n);
    for (std::size_t t = 0; t < d.horizon; ++t)
      std::copy_n(z.row(start + d.history + t).data(), n, y.data().data() + (s * d.horizon + t) * n);
  }
  return {std::move(x), std::move(y)};
}

}  // namespace ddpgcn
