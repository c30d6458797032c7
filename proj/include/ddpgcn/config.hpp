#pragma once

// Run configuration: one JSON document covering paths, synthetic data,
// graph construction, model, data split, training and studies. Parsing is
// strict (unknown keys are rejected) and serialization round-trips.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddpgcn/data.hpp"
#include "ddpgcn/error.hpp"
#include "ddpgcn/graph_bundle.hpp"
#include "ddpgcn/model.hpp"
#include "ddpgcn/train_eval.hpp"

namespace ddpgcn {

struct PathConfig {
  std::string geometry = "data/links.csv";
  std::string speeds = "data/speeds.csv";
  std::string output_dir = "out";
  std::string graphs;      // empty = <output_dir>/graphs
  std::string checkpoint;  // empty = <output_dir>/checkpoint

  std::filesystem::path graphs_dir() const {
    return graphs.empty() ? std::filesystem::path(output_dir) / "graphs" : std::filesystem::path(graphs);
  }
  std::filesystem::path checkpoint_dir() const {
    return checkpoint.empty() ? std::filesystem::path(output_dir) / "checkpoint" : std::filesystem::path(checkpoint);
  }
};

struct DataConfig {
  SplitRatios ratios;
  bool exclude_weekends = true;
};

struct StudyConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<ElementGroup> removals{kAllGroups.begin(), kAllGroups.end()};
  std::vector<std::size_t> k_values{1, 2, 3};
  std::vector<std::size_t> report_steps = kDefaultReportSteps;
  double mape_floor = kDefaultMapeFloor;
};

struct RunConfig {
  PathConfig paths;
  SyntheticSpec synthetic;
  GraphParams graph;
  ModelConfig model;  // n_links is taken from the link set
  DataConfig data;
  TrainOptions train;  // train.seed also seeds model initialization
  StudyConfig study;
};

namespace detail {

/// Throws ConfigError naming the first key of `j` not in `allowed`.
inline void reject_unknown(const nlohmann::json& j, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) {
      throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type: " + j.at(key).dump());
  }
}

inline std::vector<ElementGroup> parse_groups(const nlohmann::json& j, const std::string& key) {
  std::vector<ElementGroup> out;
  if (!j.is_array()) throw ConfigError("config key '" + key + "' must be a list of group names");
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a list of group names");
    out.push_back(parse_element_group(v.get<std::string>()));
  }
  return out;
}

inline nlohmann::json groups_json(const std::vector<ElementGroup>& gs) {
  nlohmann::json out = nlohmann::json::array();
  for (auto g : gs) out.push_back(to_string(g));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["paths"] = {{"geometry", c.paths.geometry},
                {"speeds", c.paths.speeds},
                {"output_dir", c.paths.output_dir},
                {"graphs", c.paths.graphs},
                {"checkpoint", c.paths.checkpoint}};
  const auto& s = c.synthetic;
  j["synthetic"] = {{"grid_rows", s.grid_rows},
                    {"grid_cols", s.grid_cols},
                    {"min_link_length", s.min_link_length},
                    {"max_link_length", s.max_link_length},
                    {"base_speed", s.base_speed},
                    {"daily_amplitude", s.daily_amplitude},
                    {"direction_effect", s.direction_effect},
                    {"positional_effect", s.positional_effect},
                    {"noise_std", s.noise_std},
                    {"signal_timescale", s.signal_timescale},
                    {"propagation_lag", s.propagation_lag},
                    {"cells_per_side", s.cells_per_side},
                    {"days", s.days},
                    {"start", format_timestamp(s.start)},
                    {"seed", s.seed}};
  const auto& g = c.graph;
  j["graph"] = {{"sigma", g.sigma},
                {"kappa", g.kappa},
                {"direction_filters", g.direction_filters},
                {"distance_filters", g.distance_filters},
                {"direction_centers", g.direction_centers},
                {"distance_centers", g.distance_centers},
                {"hybrid_mode", to_string(g.hybrid_mode)},
                {"direction_convention", to_string(g.direction_convention)},
                {"parallel_tol", g.parallel_tol},
                {"snap_tolerance", g.snap_tolerance},
                {"histogram_bins", g.histogram_bins}};
  const auto& m = c.model;
  j["model"] = {{"history", m.history},
                {"horizon", m.horizon},
                {"channels", m.channels},
                {"temporal_kernel", m.temporal_kernel},
                {"spatial_block", to_string(m.spatial_block)},
                {"stacked_order", detail::groups_json(m.stacked_order)},
                {"groups", detail::groups_json(m.groups)},
                {"chebyshev", m.chebyshev},
                {"cheb_k", m.cheb_k},
                {"temporal_first", m.temporal_first}};
  j["data"] = {{"train_ratio", c.data.ratios.train},
               {"val_ratio", c.data.ratios.val},
               {"test_ratio", c.data.ratios.test},
               {"exclude_weekends", c.data.exclude_weekends}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"lr", t.lr},
                {"batch", t.batch},
                {"patience", t.patience},
                {"loss", to_string(t.loss)},
                {"max_batches_per_epoch", t.max_batches_per_epoch},
                {"val_stride", t.val_stride},
                {"seed", t.seed}};
  j["study"] = {{"seeds", c.study.seeds},
                {"removals", detail::groups_json(c.study.removals)},
                {"k_values", c.study.k_values},
                {"report_steps", c.study.report_steps},
                {"mape_floor", c.study.mape_floor}};
  return j;
}

/// Strict parse over defaults: absent keys keep their default value.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, "", {"paths", "synthetic", "graph", "model", "data", "train", "study"});
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown(p, "paths", {"geometry", "speeds", "output_dir", "graphs", "checkpoint"});
    read(p, "geometry", c.paths.geometry, "paths");
    read(p, "speeds", c.paths.speeds, "paths");
    read(p, "output_dir", c.paths.output_dir, "paths");
    read(p, "graphs", c.paths.graphs, "paths");
    read(p, "checkpoint", c.paths.checkpoint, "paths");
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    auto& o = c.synthetic;
    reject_unknown(s, "synthetic",
                   {"grid_rows", "grid_cols", "min_link_length", "max_link_length", "base_speed", "daily_amplitude",
                    "direction_effect", "positional_effect", "noise_std", "signal_timescale", "propagation_lag",
                    "cells_per_side", "days", "start", "seed"});
    read(s, "grid_rows", o.grid_rows, "synthetic");
    read(s, "grid_cols", o.grid_cols, "synthetic");
    read(s, "min_link_length", o.min_link_length, "synthetic");
    read(s, "max_link_length", o.max_link_length, "synthetic");
    read(s, "base_speed", o.base_speed, "synthetic");
    read(s, "daily_amplitude", o.daily_amplitude, "synthetic");
    read(s, "direction_effect", o.direction_effect, "synthetic");
    read(s, "positional_effect", o.positional_effect, "synthetic");
    read(s, "noise_std", o.noise_std, "synthetic");
    read(s, "signal_timescale", o.signal_timescale, "synthetic");
    read(s, "propagation_lag", o.propagation_lag, "synthetic");
    read(s, "cells_per_side", o.cells_per_side, "synthetic");
    read(s, "days", o.days, "synthetic");
    read(s, "seed", o.seed, "synthetic");
    if (s.contains("start")) {
      std::string start;
      read(s, "start", start, "synthetic");
      try {
        o.start = parse_timestamp(start);
      } catch (const DataError& e) {
        throw ConfigError(std::string("synthetic.start: ") + e.what());
      }
    }
  }
  if (j.contains("graph")) {
    const auto& g = j["graph"];
    auto& o = c.graph;
    reject_unknown(g, "graph",
                   {"sigma", "kappa", "direction_filters", "distance_filters", "direction_centers", "distance_centers",
                    "hybrid_mode", "direction_convention", "parallel_tol", "snap_tolerance", "histogram_bins"});
    read(g, "sigma", o.sigma, "graph");
    read(g, "kappa", o.kappa, "graph");
    read(g, "direction_filters", o.direction_filters, "graph");
    read(g, "distance_filters", o.distance_filters, "graph");
    read(g, "direction_centers", o.direction_centers, "graph");
    read(g, "distance_centers", o.distance_centers, "graph");
    read(g, "parallel_tol", o.parallel_tol, "graph");
    read(g, "snap_tolerance", o.snap_tolerance, "graph");
    read(g, "histogram_bins", o.histogram_bins, "graph");
    std::string text;
    if (g.contains("hybrid_mode")) {
      read(g, "hybrid_mode", text, "graph");
      o.hybrid_mode = parse_hybrid_mode(text);
    }
    if (g.contains("direction_convention")) {
      read(g, "direction_convention", text, "graph");
      o.direction_convention = parse_direction_convention(text);
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    auto& o = c.model;
    reject_unknown(m, "model",
                   {"history", "horizon", "channels", "temporal_kernel", "spatial_block", "stacked_order", "groups",
                    "chebyshev", "cheb_k", "temporal_first"});
    read(m, "history", o.history, "model");
    read(m, "horizon", o.horizon, "model");
    read(m, "channels", o.channels, "model");
    read(m, "temporal_kernel", o.temporal_kernel, "model");
    read(m, "chebyshev", o.chebyshev, "model");
    read(m, "cheb_k", o.cheb_k, "model");
    read(m, "temporal_first", o.temporal_first, "model");
    if (m.contains("spatial_block")) {
      std::string text;
      read(m, "spatial_block", text, "model");
      o.spatial_block = parse_spatial_block(text);
    }
    if (m.contains("stacked_order")) o.stacked_order = detail::parse_groups(m["stacked_order"], "model.stacked_order");
    if (m.contains("groups")) o.groups = detail::parse_groups(m["groups"], "model.groups");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data", {"train_ratio", "val_ratio", "test_ratio", "exclude_weekends"});
    read(d, "train_ratio", c.data.ratios.train, "data");
    read(d, "val_ratio", c.data.ratios.val, "data");
    read(d, "test_ratio", c.data.ratios.test, "data");
    read(d, "exclude_weekends", c.data.exclude_weekends, "data");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    auto& o = c.train;
    reject_unknown(t, "train",
                   {"epochs", "lr", "batch", "patience", "loss", "max_batches_per_epoch", "val_stride", "seed"});
    read(t, "epochs", o.epochs, "train");
    read(t, "lr", o.lr, "train");
    read(t, "batch", o.batch, "train");
    read(t, "patience", o.patience, "train");
    read(t, "max_batches_per_epoch", o.max_batches_per_epoch, "train");
    read(t, "val_stride", o.val_stride, "train");
    read(t, "seed", o.seed, "train");
    if (t.contains("loss")) {
      std::string text;
      read(t, "loss", text, "train");
      o.loss = parse_loss(text);
    }
  }
  if (j.contains("study")) {
    const auto& s = j["study"];
    reject_unknown(s, "study", {"seeds", "removals", "k_values", "report_steps", "mape_floor"});
    read(s, "seeds", c.study.seeds, "study");
    read(s, "k_values", c.study.k_values, "study");
    read(s, "report_steps", c.study.report_steps, "study");
    read(s, "mape_floor", c.study.mape_floor, "study");
    if (s.contains("removals")) c.study.removals = detail::parse_groups(s["removals"], "study.removals");
  }
  return c;
}

/// Sets `dotted.key` in `j` to `text` parsed as JSON, or as a string when it
/// is not valid JSON. The key must already exist in the resolved document.
inline void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& text) {
  nlohmann::json::json_pointer ptr;
  std::size_t p = 0;
  while (p <= dotted.size()) {
    const auto q = std::min(dotted.find('.', p), dotted.size());
    ptr /= dotted.substr(p, q - p);
    p = q + 1;
  }
  if (!j.contains(ptr)) throw ConfigError("unknown config key '" + dotted + "'");
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  if (j[ptr].is_string() && !value.is_string()) value = text;
  j[ptr] = value;
}

inline nlohmann::json load_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Defaults, overlaid with the file (if any), overlaid with `key=value` overrides.
inline RunConfig resolve_config(const std::filesystem::path& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json j = to_json(RunConfig{});
  if (!file.empty()) {
    const auto user = load_config_json(file);
    run_config_from_json(user);  // strict key check against the user's document
    j.merge_patch(user);
  }
  for (const auto& [k, v] : overrides) apply_override(j, k, v);
  return run_config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

}  // namespace ddpgcn
