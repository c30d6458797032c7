#pragma once

// Small synthetic problems shared by the training tests and the acceptance run.

#include <filesystem>
#include <random>
#include <string>

#include "ddpgcn/data.hpp"
#include "ddpgcn/graph_bundle.hpp"
#include "ddpgcn/model.hpp"

namespace fixture {

struct Problem {
  ddpgcn::SyntheticData synthetic;
  ddpgcn::GraphBundle graphs;
  ddpgcn::DatasetSplits data;

  ddpgcn::ModelConfig model(ddpgcn::SpatialBlockKind kind, std::vector<std::size_t> channels = {4, 4}) const {
    ddpgcn::ModelConfig c;
    c.n_links = synthetic.links.size();
    c.history = data.train.history;
    c.horizon = data.train.horizon;
    c.channels = std::move(channels);
    c.spatial_block = kind;
    return c;
  }
};

/// Graph settings used throughout the tests: local distance kernel, fixed
/// filter centers and mask hybrids.
inline ddpgcn::GraphParams graph_params() {
  ddpgcn::GraphParams p;
  p.sigma = 300.0;
  p.kappa = 0.05;
  p.direction_centers = {0.0, 0.25, 0.5, 0.75};
  p.distance_centers = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
  p.hybrid_mode = ddpgcn::HybridMode::mask;
  return p;
}

inline Problem make_problem(std::size_t grid, std::size_t days, std::uint64_t seed, bool exclude_weekends = false,
                            std::size_t history = 12, std::size_t horizon = 12) {
  ddpgcn::SyntheticSpec spec;
  spec.grid_rows = grid;
  spec.grid_cols = grid;
  spec.days = days;
  spec.seed = seed;
  Problem p;
  p.synthetic = ddpgcn::generate_synthetic(spec);
  p.graphs = ddpgcn::build_graph_bundle(p.synthetic.links, graph_params());
  p.data = ddpgcn::split_and_window(p.synthetic.speeds, history, horizon, ddpgcn::SplitRatios{}, exclude_weekends);
  return p;
}

/// Random directed link chains whose lengths are whole meters.
struct RandomNetwork {
  std::vector<double> lengths;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::vector<std::size_t>> successors;
};

inline RandomNetwork random_network(std::size_t n, double p, std::mt19937_64& rng) {
  RandomNetwork net;
  std::uniform_int_distribution<int> len(50, 900);
  std::bernoulli_distribution edge(p);
  net.successors.resize(n);
  for (std::size_t i = 0; i < n; ++i) net.lengths.push_back(len(rng));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && edge(rng)) {
        net.edges.emplace_back(i, j);
        net.successors[i].push_back(j);
      }
  return net;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace fixture
