#pragma once

// Building, persisting and validating the full set of graph matrices for a
// link network. A bundle directory holds `meta.json` plus one dense
// row-major little-endian float64 blob per matrix.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddpgcn/error.hpp"
#include "ddpgcn/geometry.hpp"
#include "ddpgcn/graphs.hpp"
#include "ddpgcn/io.hpp"

namespace ddpgcn {

struct GraphParams {
  double sigma = 1000.0;  // meters
  double kappa = 0.0;
  std::size_t direction_filters = 4;  // M
  std::size_t distance_filters = 4;   // M'
  std::vector<double> direction_centers;  // normalized angle in [0,1); empty = histogram peaks
  std::vector<double> distance_centers;   // W_D value in [0,1]; empty = histogram peaks
  HybridMode hybrid_mode = HybridMode::value;
  DirectionConvention direction_convention = DirectionConvention::standard;
  double parallel_tol = kDefaultParallelTol;
  double snap_tolerance = kDefaultSnapTolerance;
  std::size_t histogram_bins = 360;
};

struct GraphBundle {
  GraphParams params;
  WeightedAdjacency distance;
  WeightedAdjacency direction;
  std::array<WeightedAdjacency, 4> positional;
  std::vector<WeightedAdjacency> direction_parts;  // t_m(W_theta)
  std::vector<WeightedAdjacency> distance_parts;   // t_m'(W_D)
  PartitionFilterBank direction_bank;
  PartitionFilterBank distance_bank;
  GraphElementSet elements;

  std::size_t n() const { return distance.n(); }
};

namespace detail {

inline std::vector<double> off_diagonal(const WeightedAdjacency& w) {
  std::vector<double> out;
  out.reserve(w.n() * w.n());
  for (std::size_t i = 0; i < w.n(); ++i)
    for (std::size_t j = 0; j < w.n(); ++j)
      if (i != j) out.push_back(w(i, j));
  return out;
}

inline std::optional<std::vector<double>> as_override(const std::vector<double>& c) {
  if (c.empty()) return std::nullopt;
  return c;
}

}  // namespace detail

/// Direction filter centers are detected from the histogram of normalized
/// link directions; distance centers from the off-diagonal W_D entries.
inline GraphBundle build_graph_bundle(const LinkSet& links, const GraphParams& params) {
  GraphBundle b;
  b.params = params;
  b.distance = build_distance_graph(path_distances(links), params.sigma, params.kappa);
  b.direction = build_direction_graph(links, params.direction_convention);
  b.positional = build_positional_graphs(links, params.parallel_tol);

  std::vector<double> directions;
  for (const auto& l : links.links) {
    double v = link_direction(l, params.direction_convention) / kTwoPi;
    directions.push_back(v >= 1.0 ? 0.0 : v);
  }
  b.direction_bank = make_filter_bank(directions, params.direction_filters, FilterDomain::circular,
                                      0.0, 1.0, detail::as_override(params.direction_centers),
                                      params.histogram_bins);
  const auto wd_values = detail::off_diagonal(b.distance);
  b.distance_bank = make_filter_bank(wd_values, params.distance_filters, FilterDomain::linear, 0.0,
                                     1.0, detail::as_override(params.distance_centers),
                                     params.histogram_bins);

  b.direction_parts = apply_partition(b.direction_bank, b.direction);
  b.distance_parts = apply_partition(b.distance_bank, b.distance);

  b.elements[ElementGroup::distance] = {b.distance};
  b.elements[ElementGroup::direction] =
      hybrid(b.distance, b.direction_bank, b.direction, params.hybrid_mode);
  b.elements[ElementGroup::positional] = hybrid(b.distance, b.positional);
  b.elements[ElementGroup::distance_partitioned] =
      hybrid(b.distance, b.distance_bank, b.distance, params.hybrid_mode);
  return b;
}

// ---------------------------------------------------------------------------
// Bundle directory

inline const char* to_string(HybridMode m) { return m == HybridMode::value ? "value" : "mask"; }
inline HybridMode parse_hybrid_mode(const std::string& s) {
  if (s == "value") return HybridMode::value;
  if (s == "mask") return HybridMode::mask;
  throw ConfigError("hybrid mode must be 'value' or 'mask', got '" + s + "'");
}
inline const char* to_string(DirectionConvention c) {
  return c == DirectionConvention::standard ? "standard" : "paper_eq2";
}
inline DirectionConvention parse_direction_convention(const std::string& s) {
  if (s == "standard") return DirectionConvention::standard;
  if (s == "paper_eq2") return DirectionConvention::paper_eq2;
  throw ConfigError("direction convention must be 'standard' or 'paper_eq2', got '" + s + "'");
}

namespace detail {

struct NamedMatrix {
  std::string name;
  const WeightedAdjacency* matrix;
};

inline std::vector<NamedMatrix> bundle_matrices(const GraphBundle& b) {
  std::vector<NamedMatrix> out{{"distance", &b.distance}, {"direction", &b.direction}};
  for (std::size_t k = 0; k < 4; ++k)
    out.push_back({"positional_" + std::to_string(k + 1), &b.positional[k]});
  for (std::size_t m = 0; m < b.direction_parts.size(); ++m)
    out.push_back({"direction_part_" + std::to_string(m + 1), &b.direction_parts[m]});
  for (std::size_t m = 0; m < b.distance_parts.size(); ++m)
    out.push_back({"distance_part_" + std::to_string(m + 1), &b.distance_parts[m]});
  for (auto g : kAllGroups) {
    const auto& list = b.elements[g];
    for (std::size_t m = 0; m < list.size(); ++m)
      out.push_back({std::string("element_") + to_string(g) + "_" + std::to_string(m + 1), &list[m]});
  }
  return out;
}

inline AdjacencyKind parse_kind(const std::string& s) {
  for (auto k : {AdjacencyKind::distance, AdjacencyKind::direction, AdjacencyKind::positional,
                 AdjacencyKind::hybrid, AdjacencyKind::partitioned})
    if (s == to_string(k)) return k;
  throw DataError("unknown adjacency kind '" + s + "'");
}

}  // namespace detail

inline void save_graph_bundle(const std::filesystem::path& dir, const GraphBundle& b) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["n"] = b.n();
  meta["sigma"] = b.params.sigma;
  meta["kappa"] = b.params.kappa;
  meta["hybrid_mode"] = to_string(b.params.hybrid_mode);
  meta["direction_convention"] = to_string(b.params.direction_convention);
  meta["parallel_tol"] = b.params.parallel_tol;
  meta["direction_centers"] = b.direction_bank.centers();
  meta["distance_centers"] = b.distance_bank.centers();
  nlohmann::json matrices = nlohmann::json::array();
  for (const auto& [name, m] : detail::bundle_matrices(b)) {
    const std::string file = name + ".bin";
    write_f64_blob(dir / file, m->values.data());
    matrices.push_back({{"name", name}, {"kind", to_string(m->kind)}, {"file", file}});
  }
  meta["matrices"] = matrices;
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

inline GraphBundle load_graph_bundle(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw DataError("graph bundle: missing " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("graph bundle meta.json: ") + e.what());
  }
  try {
    GraphBundle b;
    const std::size_t n = meta.at("n").get<std::size_t>();
    b.params.sigma = meta.at("sigma").get<double>();
    b.params.kappa = meta.at("kappa").get<double>();
    b.params.hybrid_mode = parse_hybrid_mode(meta.at("hybrid_mode").get<std::string>());
    b.params.direction_convention =
        parse_direction_convention(meta.at("direction_convention").get<std::string>());
    b.params.parallel_tol = meta.value("parallel_tol", kDefaultParallelTol);
    auto dir_centers = meta.at("direction_centers").get<std::vector<double>>();
    auto dist_centers = meta.at("distance_centers").get<std::vector<double>>();
    b.params.direction_centers = dir_centers;
    b.params.distance_centers = dist_centers;
    b.params.direction_filters = dir_centers.size();
    b.params.distance_filters = dist_centers.size();
    b.direction_bank = PartitionFilterBank::circular(dir_centers);
    b.distance_bank = PartitionFilterBank::linear(dist_centers);

    for (const auto& entry : meta.at("matrices")) {
      const auto name = entry.at("name").get<std::string>();
      WeightedAdjacency w{Matrix(n, n, read_f64_blob(dir / entry.at("file").get<std::string>(), n * n)),
                          detail::parse_kind(entry.at("kind").get<std::string>())};
      auto index_after = [&](const std::string& prefix) {
        return static_cast<std::size_t>(std::stoul(name.substr(prefix.size()))) - 1;
      };
      auto place = [&](std::vector<WeightedAdjacency>& list, std::size_t idx) {
        if (list.size() <= idx) list.resize(idx + 1);
        list[idx] = std::move(w);
      };
      if (name == "distance") {
        b.distance = std::move(w);
      } else if (name == "direction") {
        b.direction = std::move(w);
      } else if (name.rfind("positional_", 0) == 0) {
        const auto k = index_after("positional_");
        if (k >= 4) throw DataError("graph bundle: bad positional index in " + name);
        b.positional[k] = std::move(w);
      } else if (name.rfind("direction_part_", 0) == 0) {
        place(b.direction_parts, index_after("direction_part_"));
      } else if (name.rfind("distance_part_", 0) == 0) {
        place(b.distance_parts, index_after("distance_part_"));
      } else {
        bool matched = false;
        for (auto g : kAllGroups) {
          const std::string prefix = std::string("element_") + to_string(g) + "_";
          if (name.rfind(prefix, 0) == 0 && name.find_first_not_of("0123456789", prefix.size()) ==
                                                std::string::npos) {
            place(b.elements[g], index_after(prefix));
            matched = true;
            break;
          }
        }
        if (!matched) throw DataError("graph bundle: unknown matrix '" + name + "'");
      }
    }
    for (auto g : kAllGroups) {
      for (const auto& w : b.elements[g])
        if (w.n() != n) throw DataError(std::string("graph bundle: missing member of group ") + to_string(g));
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("graph bundle meta.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("graph bundle: ") + e.what());
  }
}

/// One failed invariant of a bundle.
struct ValidationIssue {
  std::string what;
};

/// Checks finiteness, value ranges, positional exclusivity, partition of
/// unity of both partitions and the hybrid products.
inline std::vector<ValidationIssue> validate_graph_bundle(const GraphBundle& b,
                                                          double tolerance = 1e-12) {
  std::vector<ValidationIssue> issues;
  const std::size_t n = b.n();
  auto fail = [&](std::string s) { issues.push_back({std::move(s)}); };
  auto check_shape = [&](const WeightedAdjacency& w, const std::string& name) {
    if (w.n() != n || w.values.cols() != n) {
      fail(name + ": shape mismatch");
      return false;
    }
    for (double v : w.values.data())
      if (!std::isfinite(v)) {
        fail(name + ": non-finite entry");
        return false;
      }
    return true;
  };
  if (!check_shape(b.distance, "distance") || !check_shape(b.direction, "direction")) return issues;
  for (std::size_t i = 0; i < n; ++i) {
    if (b.distance(i, i) != 0.0) fail("distance: nonzero diagonal at " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (b.distance(i, j) < 0.0 || b.distance(i, j) > 1.0) fail("distance: entry outside [0,1]");
      if (b.direction(i, j) < 0.0 || b.direction(i, j) >= 1.0) fail("direction: entry outside [0,1)");
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    if (!check_shape(b.positional[k], "positional")) return issues;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double v = b.positional[k](i, j);
        if (v != 0.0 && v != 1.0) fail("positional: non-binary entry");
        sum += v;
      }
      if (sum > 1.0) fail("positional: more than one class for a pair");
      if (i == j && sum != 0.0) fail("positional: nonzero diagonal");
    }
  auto check_partition = [&](const std::vector<WeightedAdjacency>& parts, const WeightedAdjacency& w,
                             const std::string& name) {
    if (parts.empty()) {
      fail(name + ": no partitions");
      return;
    }
    for (const auto& p : parts)
      if (!check_shape(p, name)) return;
    double worst = 0.0;
    for (std::size_t k = 0; k < w.values.size(); ++k) {
      double sum = 0.0;
      for (const auto& p : parts) sum += p.values.data()[k];
      worst = std::max(worst, std::abs(sum - w.values.data()[k]));
    }
    if (worst > tolerance) fail(name + ": partition of unity violated by " + std::to_string(worst));
  };
  check_partition(b.direction_parts, b.direction, "direction partitions");
  check_partition(b.distance_parts, b.distance, "distance partitions");

  auto check_hybrid = [&](ElementGroup g, const std::vector<WeightedAdjacency>& expected) {
    const auto& got = b.elements[g];
    if (got.size() != expected.size()) {
      fail(std::string("element group ") + to_string(g) + ": wrong member count");
      return;
    }
    for (std::size_t m = 0; m < got.size(); ++m) {
      if (!check_shape(got[m], to_string(g))) return;
      if (max_abs_diff(got[m].values, expected[m].values) > tolerance)
        fail(std::string("element group ") + to_string(g) + ": hybrid product mismatch");
    }
  };
  try {
    check_hybrid(ElementGroup::distance, {b.distance});
    check_hybrid(ElementGroup::direction,
                 hybrid(b.distance, b.direction_bank, b.direction, b.params.hybrid_mode));
    check_hybrid(ElementGroup::positional, hybrid(b.distance, b.positional));
    check_hybrid(ElementGroup::distance_partitioned,
                 hybrid(b.distance, b.distance_bank, b.distance, b.params.hybrid_mode));
  } catch (const Error& e) {
    fail(e.what());
  }
  return issues;
}

}  // namespace ddpgcn
