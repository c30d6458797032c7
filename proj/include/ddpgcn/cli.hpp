#pragma once

// Command-line front end: build-graphs, synth, train, eval, baseline,
// ablate, khop and validate over one JSON run configuration.
//
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
// failure. Any `--section.key value` pair overrides the configuration.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "ddpgcn/config.hpp"
#include "ddpgcn/data.hpp"
#include "ddpgcn/error.hpp"
#include "ddpgcn/geometry.hpp"
#include "ddpgcn/graph_bundle.hpp"
#include "ddpgcn/model.hpp"
#include "ddpgcn/train_eval.hpp"

namespace ddpgcn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

struct Invocation {
  std::string command;
  std::string config_file;
  std::optional<std::size_t> repeats;
  std::vector<std::pair<std::string, std::string>> overrides;
};

namespace detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Turns the unparsed `--section.key value` tokens into overrides.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() <= 2) throw ConfigError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("option '" + tok + "' needs a value");
      value = extras[++i];
    }
    if (key.find('.') == std::string::npos) throw ConfigError("unknown option '--" + key + "'");
    out.emplace_back(key, value);
  }
  return out;
}

inline RunConfig resolve(const Invocation& inv) {
  RunConfig c = resolve_config(inv.config_file, inv.overrides);
  if (inv.repeats) {
    if (*inv.repeats == 0) throw ConfigError("--repeats must be at least 1");
    c.study.seeds.clear();
    for (std::size_t r = 0; r < *inv.repeats; ++r) c.study.seeds.push_back(c.train.seed + r);
  }
  return c;
}

inline fs::path echo_config(const RunConfig& c, const std::string& command) {
  const fs::path path = fs::path(c.paths.output_dir) / ("resolved_config." + command + ".json");
  save_config(path, c);
  return path;
}

inline LinkSet load_links(const RunConfig& c) { return load_link_geometry(c.paths.geometry, c.graph.snap_tolerance); }

inline GraphBundle load_bundle_for(const RunConfig& c, std::size_t n_links) {
  GraphBundle b = load_graph_bundle(c.paths.graphs_dir());
  if (b.n() != n_links) {
    throw DataError("graph bundle has " + std::to_string(b.n()) + " nodes but the link set has " +
                    std::to_string(n_links) + " links; rerun build-graphs");
  }
  return b;
}

inline DatasetSplits load_splits(const RunConfig& c, std::size_t n_links) {
  const SpeedSeries speeds = load_speeds(c.paths.speeds, n_links);
  return split_and_window(speeds, c.model.history, c.model.horizon, c.data.ratios, c.data.exclude_weekends);
}

inline ModelConfig model_config(const RunConfig& c, std::size_t n_links, std::uint64_t seed) {
  ModelConfig m = c.model;
  m.n_links = n_links;
  m.seed = seed;
  return m;
}

inline nlohmann::json state_json(const TrainState& s) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : s.history)
    history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_mae", e.val_mae}, {"improved", e.improved}});
  return {{"epochs_run", s.epoch},
          {"steps", s.steps},
          {"best_epoch", s.best_epoch},
          {"best_val_mae", s.best_val_mae},
          {"stopped_early", s.stopped_early},
          {"seed", s.seed},
          {"history", history}};
}

inline StudyRow single_row(std::string label, std::vector<MetricReport> runs) {
  StudyRow row;
  row.label = std::move(label);
  row.runs = std::move(runs);
  row.summary = summarize(row.runs);
  return row;
}

inline void write_study(const fs::path& dir, const std::string& stem, const std::string& first_column,
                        const std::vector<StudyRow>& rows, const RunConfig& c, std::ostream& out) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  j["seeds"] = c.study.seeds;
  j["config"] = to_json(c);
  write_json(dir / (stem + ".json"), j);
  write_text(dir / (stem + ".csv"), metrics_table_csv(first_column, rows));
  write_text(dir / (stem + "_long.csv"), metrics_long_csv(rows));
  const std::string table = metrics_table_text(first_column, rows);
  write_text(dir / (stem + ".txt"), table);
  out << table;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_synth(const RunConfig& c, std::ostream& out) {
  const SyntheticData data = generate_synthetic(c.synthetic);
  for (const auto& p : {fs::path(c.paths.geometry), fs::path(c.paths.speeds)})
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_link_geometry(c.paths.geometry, data.links);
  save_speeds(c.paths.speeds, data.speeds);
  nlohmann::json spec = to_json(c)["synthetic"];
  spec["links"] = data.links.size();
  spec["rows"] = data.speeds.rows();
  spec["direction_group"] = data.direction_group;
  spec["destination_cell"] = data.destination_cell;
  write_json(fs::path(c.paths.speeds).parent_path() / "spec.json", spec);
  out << "synth: " << data.links.size() << " links, " << data.speeds.rows() << " rows -> " << c.paths.geometry
      << ", " << c.paths.speeds << '\n';
  return kExitOk;
}

inline int cmd_build_graphs(const RunConfig& c, std::ostream& out) {
  const LinkSet links = load_links(c);
  const GraphBundle b = build_graph_bundle(links, c.graph);
  save_graph_bundle(c.paths.graphs_dir(), b);
  std::size_t nonzero = 0;
  for (double v : b.distance.values.data()) nonzero += v != 0.0;
  const double density = static_cast<double>(nonzero) / static_cast<double>(b.n() * b.n());
  out << "build-graphs: n=" << b.n() << ", W_D density " << density << ", M="
      << b.direction_bank.size() << ", M'=" << b.distance_bank.size() << " -> " << c.paths.graphs_dir().string()
      << '\n';
  return kExitOk;
}

inline int cmd_validate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const GraphBundle b = load_graph_bundle(c.paths.graphs_dir());
  const auto issues = validate_graph_bundle(b);
  for (const auto& i : issues) err << "validate: " << i.what << '\n';
  out << "validate: " << c.paths.graphs_dir().string() << ": " << (issues.empty() ? "ok" : "FAILED") << " ("
      << issues.size() << " issues)\n";
  return issues.empty() ? kExitOk : kExitData;
}

/// Trains train.seed, or every study seed when `repeated`; only the
/// train.seed run is checkpointed.
inline int cmd_train(const RunConfig& c, bool repeated, std::ostream& out) {
  const LinkSet links = load_links(c);
  const GraphBundle bundle = load_bundle_for(c, links.size());
  const DatasetSplits data = load_splits(c, links.size());
  const fs::path out_dir(c.paths.output_dir);
  const std::vector<std::uint64_t> seeds = repeated ? c.study.seeds : std::vector<std::uint64_t>{c.train.seed};
  std::vector<MetricReport> reports;
  nlohmann::json runs = nlohmann::json::array();
  for (auto seed : seeds) {
    DdpGcn model(model_config(c, links.size(), seed), bundle.elements);
    TrainOptions opt = c.train;
    opt.seed = seed;
    const bool primary = seed == c.train.seed;
    if (primary) opt.checkpoint_dir = c.paths.checkpoint_dir();
    const TrainState state = train(model, data, opt, [&](const EpochLog& e) {
      out << "  seed " << seed << " epoch " << e.epoch << ": train loss " << e.train_loss << ", val MAE " << e.val_mae
          << (e.improved ? " *" : "") << '\n';
    });
    const MetricReport report = compute_metrics(predict_split(model, data.test, opt.batch), split_targets(data.test),
                                                c.study.report_steps, c.study.mape_floor);
    if (primary) {
      save_checkpoint(opt.checkpoint_dir, model.parameters(),
                      {{"config", to_json(c)}, {"seed", seed}, {"test_metrics", to_json(report)},
                       {"best_epoch", state.best_epoch}, {"best_val_mae", state.best_val_mae}});
    }
    reports.push_back(report);
    runs.push_back({{"seed", seed}, {"test", to_json(report)}, {"train", state_json(state)}});
  }
  const StudyRow row = single_row(std::string("DDP-GCN(") + to_string(c.model.spatial_block) + ")", reports);
  nlohmann::json j{{"command", "train"}, {"runs", runs}, {"mean", to_json(row.summary.mean)},
                   {"std", to_json(row.summary.std)}, {"seeds", seeds}, {"config", to_json(c)}};
  write_json(out_dir / "train_report.json", j);
  write_text(out_dir / "train_report.csv", metrics_table_csv("model", {row}));
  write_text(out_dir / "train_report_long.csv", metrics_long_csv({row}));
  const auto& m = row.summary.mean.aggregate;
  out << "train: test MAE " << m.mae << ", MAPE " << m.mape << "%, RMSE " << m.rmse << " over " << seeds.size()
      << " seed(s); checkpoint " << c.paths.checkpoint_dir().string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out) {
  const fs::path ckpt = c.paths.checkpoint_dir();
  const auto meta = read_checkpoint_meta(ckpt);
  if (!meta.contains("config")) throw DataError("checkpoint " + ckpt.string() + " carries no run configuration");
  // model, data and graph settings come from the run that produced the checkpoint
  RunConfig run = run_config_from_json(meta.at("config"));
  run.paths = c.paths;
  const std::uint64_t seed = meta.value("seed", run.train.seed);
  const LinkSet links = load_links(run);
  const GraphBundle bundle = load_bundle_for(run, links.size());
  const DatasetSplits data = load_splits(run, links.size());
  DdpGcn model(model_config(run, links.size(), seed), bundle.elements);
  load_checkpoint(ckpt, model.parameters());
  const MetricReport report = compute_metrics(predict_split(model, data.test, run.train.batch), split_targets(data.test),
                                              run.study.report_steps, run.study.mape_floor);
  const nlohmann::json got = to_json(report);
  const bool matches = meta.contains("test_metrics") && meta.at("test_metrics") == got;
  write_json(fs::path(c.paths.output_dir) / "eval_report.json",
             {{"command", "eval"}, {"checkpoint", ckpt.string()}, {"test", got}, {"matches_recorded", matches}});
  out << "eval: test MAE " << report.aggregate.mae << ", MAPE " << report.aggregate.mape << "%, RMSE "
      << report.aggregate.rmse << (meta.contains("test_metrics") ? (matches ? " (matches recorded)" : " (DIFFERS from recorded)") : "")
      << '\n';
  return kExitOk;
}

inline int cmd_baseline(const RunConfig& c, std::ostream& out) {
  const SpeedSeries speeds = load_speeds(c.paths.speeds);
  const DatasetSplits data =
      split_and_window(speeds, c.model.history, c.model.horizon, c.data.ratios, c.data.exclude_weekends);
  const MetricReport report = compute_metrics(historical_average(data, data.test), split_targets(data.test),
                                              c.study.report_steps, c.study.mape_floor);
  const StudyRow row = single_row("HA", {report});
  write_json(fs::path(c.paths.output_dir) / "baseline_report.json",
             {{"command", "baseline"}, {"test", to_json(report)}, {"config", to_json(c)}});
  write_text(fs::path(c.paths.output_dir) / "baseline_report.csv", metrics_table_csv("model", {row}));
  out << "baseline: HA test MAE " << report.aggregate.mae << ", MAPE " << report.aggregate.mape << "%, RMSE "
      << report.aggregate.rmse << '\n';
  return kExitOk;
}

template <class Study>
int run_study(const RunConfig& c, std::ostream& out, const std::string& stem, const std::string& first_column,
              Study study) {
  const LinkSet links = load_links(c);
  const GraphBundle bundle = load_bundle_for(c, links.size());
  const DatasetSplits data = load_splits(c, links.size());
  ExperimentRunner runner(bundle.elements, data, c.train);
  runner.set_listener([&](const ModelConfig& m, std::uint64_t seed, const RunResult& r) {
    out << "  " << describe(m) << " seed " << seed << ": test MAE " << r.test.aggregate.mae << " ("
        << r.state.epoch << " epochs, " << r.seconds << " s)\n";
  });
  const ModelConfig base = model_config(c, links.size(), c.train.seed);
  const auto rows = study(runner, base);
  write_study(c.paths.output_dir, stem, first_column, rows, c, out);
  out << stem << ": " << rows.size() << " rows x " << c.study.seeds.size() << " seed(s) -> "
      << (fs::path(c.paths.output_dir) / (stem + ".csv")).string() << '\n';
  return kExitOk;
}

inline int cmd_ablate(const RunConfig& c, std::ostream& out) {
  return run_study(c, out, "ablation", "Removed Component", [&](ExperimentRunner& r, const ModelConfig& base) {
    return run_ablation(r, base, c.study.removals, c.study.seeds);
  });
}

inline int cmd_khop(const RunConfig& c, std::ostream& out) {
  return run_study(c, out, "khop", "Model", [&](ExperimentRunner& r, const ModelConfig& base) {
    return run_khop_study(r, base, c.study.k_values, c.study.seeds);
  });
}

}  // namespace detail

inline const std::vector<std::pair<std::string, std::string>>& commands() {
  static const std::vector<std::pair<std::string, std::string>> list{
      {"synth", "generate a synthetic grid network and speed series"},
      {"build-graphs", "build the graph bundle from the link geometry"},
      {"validate", "check a graph bundle's invariants"},
      {"train", "train a model, persist the best checkpoint and a test report"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"baseline", "Historical Average test metrics"},
      {"ablate", "element-group ablation study"},
      {"khop", "K-polynomial Chebyshev comparison"},
  };
  return list;
}

/// Parses argv. Returns nullopt after printing help; throws ConfigError on bad usage.
inline std::optional<Invocation> parse(int argc, const char* const* argv, std::ostream& out) {
  CLI::App app{"DDP-GCN traffic speed forecasting toolkit"};
  app.name(argc > 0 ? std::filesystem::path(argv[0]).filename().string() : "ddpgcn");
  app.require_subcommand(1);
  Invocation inv;
  std::size_t repeats = 0;
  std::map<std::string, CLI::Option*> repeat_options;
  for (const auto& [name, help] : commands()) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config,-c", inv.config_file, "JSON run configuration");
    if (name == "train" || name == "ablate" || name == "khop") {
      repeat_options[name] = sub->add_option("--repeats,-r", repeats, "seeds train.seed .. train.seed+R-1");
    }
    sub->allow_extras();
    sub->footer("Any configuration value can be overridden with --section.key value, e.g. --train.epochs 5");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return std::nullopt;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return std::nullopt;
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what() + std::string("\n\n") + app.help());
  }
  for (auto* sub : app.get_subcommands()) {
    inv.command = sub->get_name();
    try {
      inv.overrides = detail::parse_overrides(sub->remaining());
    } catch (const ConfigError& e) {
      throw ConfigError(e.what() + std::string("\n\n") + sub->help());
    }
    const auto opt = repeat_options.find(inv.command);
    if (opt != repeat_options.end() && opt->second->count() > 0) inv.repeats = repeats;
  }
  return inv;
}

inline int run(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const RunConfig c = detail::resolve(inv);
  const auto echo = detail::echo_config(c, inv.command);
  out << "config: " << echo.string() << '\n';
  if (inv.command == "synth") return detail::cmd_synth(c, out);
  if (inv.command == "build-graphs") return detail::cmd_build_graphs(c, out);
  if (inv.command == "validate") return detail::cmd_validate(c, out, err);
  if (inv.command == "train") return detail::cmd_train(c, inv.repeats.has_value(), out);
  if (inv.command == "eval") return detail::cmd_eval(c, out);
  if (inv.command == "baseline") return detail::cmd_baseline(c, out);
  if (inv.command == "ablate") return detail::cmd_ablate(c, out);
  if (inv.command == "khop") return detail::cmd_khop(c, out);
  throw ConfigError("unknown command '" + inv.command + "'");
}

/// Entry point shared by the executable and the tests.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const auto inv = parse(argc, argv, out);
    if (!inv) return kExitOk;
    return run(*inv, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
}

}  // namespace ddpgcn::cli
