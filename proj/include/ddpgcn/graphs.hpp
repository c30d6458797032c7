#pragma once

// Weighted adjacency construction: distance, direction and positional
// relationship graphs, triangular partition filters, hybrid graph elements
// and the first-order propagation matrix I + D^-1 W.
//
// Orientation: entry (i, j) of every adjacency weights the influence of
// link j on link i.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddpgcn/error.hpp"
#include "ddpgcn/geometry.hpp"
#include "ddpgcn/matrix.hpp"

namespace ddpgcn {

enum class AdjacencyKind { distance, direction, positional, hybrid, partitioned };

inline const char* to_string(AdjacencyKind k) {
  switch (k) {
    case AdjacencyKind::distance: return "distance";
    case AdjacencyKind::direction: return "direction";
    case AdjacencyKind::positional: return "positional";
    case AdjacencyKind::hybrid: return "hybrid";
    case AdjacencyKind::partitioned: return "partitioned";
  }
  return "?";
}

struct WeightedAdjacency {
  Matrix values;
  AdjacencyKind kind = AdjacencyKind::distance;

  std::size_t n() const { return values.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return values(i, j); }
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Graph 1: on-path distance

/// All-pairs shortest on-path distances. An edge (a, b) of the connectivity
/// graph costs the average of the two link lengths; unreachable pairs are +inf.
inline Matrix path_distances(std::span<const double> lengths,
                             const std::vector<std::vector<std::size_t>>& successors) {
  const std::size_t n = lengths.size();
  if (successors.size() != n) throw UsageError("path_distances: successor list size mismatch");
  Matrix dist(n, n, kInf);
  using Entry = std::pair<double, std::size_t>;
  std::vector<char> done(n);
  for (std::size_t src = 0; src < n; ++src) {
    auto row = dist.row(src);
    std::fill(done.begin(), done.end(), 0);
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
    row[src] = 0.0;
    heap.emplace(0.0, src);
    while (!heap.empty()) {
      auto [d, a] = heap.top();
      heap.pop();
      if (done[a]) continue;
      done[a] = 1;
      for (std::size_t b : successors[a]) {
        const double nd = d + (lengths[a] + lengths[b]) / 2.0;
        if (nd < row[b]) {
          row[b] = nd;
          heap.emplace(nd, b);
        }
      }
    }
  }
  return dist;
}

inline Matrix path_distances(const LinkSet& links) {
  const auto lengths = links.lengths();
  return path_distances(lengths, links.successors());
}

/// Thresholded Gaussian kernel exp(-d^2 / sigma^2); zero on the diagonal,
/// below kappa, and for unreachable pairs.
inline WeightedAdjacency build_distance_graph(const Matrix& dist, double sigma, double kappa) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("distance graph: sigma must be positive, got " + std::to_string(sigma));
  }
  const std::size_t n = dist.rows();
  WeightedAdjacency w{Matrix(n, n), AdjacencyKind::distance};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || !std::isfinite(dist(i, j))) continue;
      const double d = dist(i, j);
      const double v = std::exp(-(d * d) / (sigma * sigma));
      if (v >= kappa) w.values(i, j) = v;
    }
  return w;
}

// ---------------------------------------------------------------------------
// Graph 2: direction

inline double normalized_direction_difference(double angle_i, double angle_j) {
  double v = wrap_angle(angle_i - angle_j) / kTwoPi;
  return v >= 1.0 ? 0.0 : v;
}

inline WeightedAdjacency build_direction_graph(
    const LinkSet& links, DirectionConvention convention = DirectionConvention::standard) {
  const std::size_t n = links.size();
  std::vector<double> angle(n);
  for (std::size_t i = 0; i < n; ++i) angle[i] = link_direction(links.links[i], convention);
  WeightedAdjacency w{Matrix(n, n), AdjacencyKind::direction};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) w.values(i, j) = normalized_direction_difference(angle[i], angle[j]);
  return w;
}

// ---------------------------------------------------------------------------
// Graph 3: positional relationship

inline std::array<WeightedAdjacency, 4> build_positional_graphs(
    const LinkSet& links, double parallel_tol = kDefaultParallelTol) {
  const std::size_t n = links.size();
  std::array<WeightedAdjacency, 4> out;
  for (auto& w : out) w = {Matrix(n, n), AdjacencyKind::positional};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto c = classify_positional(links.links[i], links.links[j], parallel_tol);
      if (c == PositionalClass::none) continue;
      out[static_cast<std::size_t>(c) - 1].values(i, j) = 1.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Partition filters

enum class FilterDomain { circular, linear };

/// M triangular hat functions over a circular domain [0, period) or a
/// linear interval [lo, hi]. Memberships sum to one everywhere.
class PartitionFilterBank {
 public:
  PartitionFilterBank() = default;
  PartitionFilterBank(std::vector<double> centers, FilterDomain domain, double lo, double hi)
      : centers_(std::move(centers)), domain_(domain), lo_(lo), hi_(hi) {
    if (centers_.empty()) throw ConfigError("partition filter bank needs at least one center");
    if (!(hi_ > lo_)) throw ConfigError("partition filter bank: empty domain");
    std::sort(centers_.begin(), centers_.end());
    for (std::size_t m = 0; m < centers_.size(); ++m) {
      if (!contains(centers_[m]) || (domain_ == FilterDomain::circular && centers_[m] >= hi_)) {
        throw ConfigError("partition filter center " + std::to_string(centers_[m]) +
                          " outside the filter domain");
      }
      if (m > 0 && centers_[m] == centers_[m - 1]) {
        throw ConfigError("partition filter centers must be distinct");
      }
    }
  }

  static PartitionFilterBank circular(std::vector<double> centers, double period = 1.0) {
    return PartitionFilterBank(std::move(centers), FilterDomain::circular, 0.0, period);
  }
  static PartitionFilterBank linear(std::vector<double> centers, double lo = 0.0, double hi = 1.0) {
    return PartitionFilterBank(std::move(centers), FilterDomain::linear, lo, hi);
  }

  std::size_t size() const { return centers_.size(); }
  const std::vector<double>& centers() const { return centers_; }
  FilterDomain domain() const { return domain_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  bool contains(double v) const {
    if (!std::isfinite(v)) return false;
    if (domain_ == FilterDomain::circular) return v >= lo_ && v < hi_;
    return v >= lo_ && v <= hi_;
  }

  /// Lambda_m(v) for every m.
  std::vector<double> memberships(double v) const {
    std::vector<double> out(centers_.size(), 0.0);
    const std::size_t m_count = centers_.size();
    if (m_count == 1) {
      out[0] = 1.0;
      return out;
    }
    if (domain_ == FilterDomain::linear) {
      if (v <= centers_.front()) {
        out.front() = 1.0;
        return out;
      }
      if (v >= centers_.back()) {
        out.back() = 1.0;
        return out;
      }
      const auto it = std::upper_bound(centers_.begin(), centers_.end(), v);
      const std::size_t right = static_cast<std::size_t>(it - centers_.begin());
      const std::size_t left = right - 1;
      const double a = (v - centers_[left]) / (centers_[right] - centers_[left]);
      out[left] = 1.0 - a;
      out[right] = a;
      return out;
    }
    const double period = hi_ - lo_;
    // left = last center <= v, wrapping to the final center when v precedes all.
    const auto it = std::upper_bound(centers_.begin(), centers_.end(), v);
    const std::size_t left =
        it == centers_.begin() ? m_count - 1 : static_cast<std::size_t>(it - centers_.begin()) - 1;
    const std::size_t right = (left + 1) % m_count;
    double gap = centers_[right] - centers_[left];
    if (gap <= 0.0) gap += period;
    double offset = v - centers_[left];
    if (offset < 0.0) offset += period;
    const double a = offset / gap;
    out[left] = 1.0 - a;
    out[right] = a;
    return out;
  }

 private:
  std::vector<double> centers_;
  FilterDomain domain_ = FilterDomain::circular;
  double lo_ = 0.0;
  double hi_ = 1.0;
};

/// Gaussian-smoothed histogram over bin centers of the domain.
inline std::vector<double> smoothed_histogram(std::span<const double> values, FilterDomain domain,
                                              double lo, double hi, std::size_t bins,
                                              double bandwidth) {
  const double span = hi - lo;
  std::vector<double> counts(bins, 0.0);
  for (double v : values) {
    std::size_t b;
    if (domain == FilterDomain::circular) {
      const double pos = (v - lo) / span * static_cast<double>(bins);
      b = static_cast<std::size_t>(std::llround(pos)) % bins;
    } else {
      const double pos = (v - lo) / span * static_cast<double>(bins - 1);
      b = static_cast<std::size_t>(std::clamp<long long>(std::llround(pos), 0, bins - 1));
    }
    counts[b] += 1.0;
  }
  const double step = domain == FilterDomain::circular ? span / static_cast<double>(bins)
                                                       : span / static_cast<double>(bins - 1);
  std::vector<double> smooth(bins, 0.0);
  for (std::size_t i = 0; i < bins; ++i)
    for (std::size_t j = 0; j < bins; ++j) {
      if (counts[j] == 0.0) continue;
      double d = std::abs(static_cast<double>(i) - static_cast<double>(j)) * step;
      if (domain == FilterDomain::circular) d = std::min(d, span - d);
      smooth[i] += counts[j] * std::exp(-0.5 * (d * d) / (bandwidth * bandwidth));
    }
  return smooth;
}

/// Filter centers from the M tallest peaks of the smoothed histogram of
/// `values` (bandwidth = domain span / (8 M)), unless overridden.
inline PartitionFilterBank make_filter_bank(std::span<const double> values, std::size_t m_count,
                                            FilterDomain domain, double lo, double hi,
                                            const std::optional<std::vector<double>>& centers_override =
                                                std::nullopt,
                                            std::size_t bins = 360) {
  if (centers_override && !centers_override->empty()) {
    if (centers_override->size() != m_count) {
      throw ConfigError("partition filter override lists " +
                        std::to_string(centers_override->size()) + " centers but M = " +
                        std::to_string(m_count));
    }
    return PartitionFilterBank(*centers_override, domain, lo, hi);
  }
  if (m_count < 2) throw ConfigError("partition filter count M must be at least 2");
  if (bins < 3) throw ConfigError("histogram needs at least 3 bins");
  for (double v : values) {
    const bool ok = domain == FilterDomain::circular ? (v >= lo && v < hi) : (v >= lo && v <= hi);
    if (!ok || !std::isfinite(v)) {
      throw DomainError("filter bank value " + std::to_string(v) + " outside the domain");
    }
  }
  const double span = hi - lo;
  const auto smooth =
      smoothed_histogram(values, domain, lo, hi, bins, span / (8.0 * static_cast<double>(m_count)));
  const double step = domain == FilterDomain::circular ? span / static_cast<double>(bins)
                                                       : span / static_cast<double>(bins - 1);
  std::vector<std::pair<double, std::size_t>> peaks;
  for (std::size_t i = 0; i < bins; ++i) {
    double left, right;
    if (domain == FilterDomain::circular) {
      left = smooth[(i + bins - 1) % bins];
      right = smooth[(i + 1) % bins];
    } else {
      left = i == 0 ? -1.0 : smooth[i - 1];
      right = i + 1 == bins ? -1.0 : smooth[i + 1];
    }
    if (smooth[i] > left && smooth[i] >= right && smooth[i] > 0.0) peaks.emplace_back(smooth[i], i);
  }
  if (peaks.size() < m_count) {
    throw ConfigError("histogram has only " + std::to_string(peaks.size()) +
                      " peaks but M = " + std::to_string(m_count) +
                      "; supply explicit filter centers (centers override)");
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> centers;
  for (std::size_t k = 0; k < m_count; ++k) {
    centers.push_back(lo + static_cast<double>(peaks[k].second) * step);
  }
  return PartitionFilterBank(std::move(centers), domain, lo, hi);
}

namespace detail {
inline void check_in_domain(const PartitionFilterBank& bank, const WeightedAdjacency& w) {
  for (std::size_t i = 0; i < w.n(); ++i)
    for (std::size_t j = 0; j < w.n(); ++j)
      if (!bank.contains(w(i, j))) {
        throw DomainError("adjacency entry (" + std::to_string(i) + "," + std::to_string(j) +
                          ") = " + std::to_string(w(i, j)) + " outside the filter domain");
      }
}
}  // namespace detail

/// t_m(W)(i,j) = W(i,j) * Lambda_m(W(i,j)); the M outputs sum back to W.
inline std::vector<WeightedAdjacency> apply_partition(const PartitionFilterBank& bank,
                                                      const WeightedAdjacency& w) {
  detail::check_in_domain(bank, w);
  const std::size_t n = w.n();
  std::vector<WeightedAdjacency> parts(bank.size(),
                                       WeightedAdjacency{Matrix(n, n), AdjacencyKind::partitioned});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = w(i, j);
      if (v == 0.0) continue;
      const auto lambda = bank.memberships(v);
      for (std::size_t m = 0; m < lambda.size(); ++m)
        if (lambda[m] != 0.0) parts[m].values(i, j) = v * lambda[m];
    }
  return parts;
}

/// Lambda_m(W(i,j)) masks (no value scaling).
inline std::vector<WeightedAdjacency> partition_memberships(const PartitionFilterBank& bank,
                                                            const WeightedAdjacency& w) {
  detail::check_in_domain(bank, w);
  const std::size_t n = w.n();
  std::vector<WeightedAdjacency> masks(bank.size(),
                                       WeightedAdjacency{Matrix(n, n), AdjacencyKind::partitioned});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto lambda = bank.memberships(w(i, j));
      for (std::size_t m = 0; m < lambda.size(); ++m) masks[m].values(i, j) = lambda[m];
    }
  return masks;
}

/// Hadamard product base (.) part for every part.
inline std::vector<WeightedAdjacency> hybrid(const WeightedAdjacency& base,
                                             std::span<const WeightedAdjacency> parts) {
  std::vector<WeightedAdjacency> out;
  out.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.n() != base.n()) {
      throw UsageError("hybrid: shape mismatch (" + std::to_string(base.n()) + " vs " +
                       std::to_string(p.n()) + ")");
    }
    WeightedAdjacency h{Matrix(base.n(), base.n()), AdjacencyKind::hybrid};
    for (std::size_t k = 0; k < h.values.size(); ++k)
      h.values.data()[k] = base.values.data()[k] * p.values.data()[k];
    out.push_back(std::move(h));
  }
  return out;
}

enum class HybridMode {
  value,  // base (.) t_m(W)
  mask,   // base (.) Lambda_m(W)
};

inline std::vector<WeightedAdjacency> hybrid(const WeightedAdjacency& base,
                                             const PartitionFilterBank& bank,
                                             const WeightedAdjacency& w, HybridMode mode) {
  const auto parts =
      mode == HybridMode::value ? apply_partition(bank, w) : partition_memberships(bank, w);
  return hybrid(base, parts);
}

// ---------------------------------------------------------------------------
// Propagation matrix

/// P = I + D^-1 W with D_ii = sum_j W_ij. Zero-degree rows keep the identity row.
inline Matrix propagation_matrix(const WeightedAdjacency& w) {
  const std::size_t n = w.n();
  Matrix p = Matrix::identity(n);
  for (std::size_t i = 0; i < n; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = w(i, j);
      if (v < 0.0 || !std::isfinite(v)) {
        throw DomainError("propagation_matrix: entry (" + std::to_string(i) + "," +
                          std::to_string(j) + ") is negative or non-finite");
      }
      degree += v;
    }
    if (degree == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) p(i, j) += w(i, j) / degree;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Graph element groups consumed by the spatial blocks

enum class ElementGroup { distance, direction, positional, distance_partitioned };

inline constexpr std::array<ElementGroup, 4> kAllGroups{
    ElementGroup::distance, ElementGroup::direction, ElementGroup::positional,
    ElementGroup::distance_partitioned};

inline const char* to_string(ElementGroup g) {
  switch (g) {
    case ElementGroup::distance: return "distance";
    case ElementGroup::direction: return "direction";
    case ElementGroup::positional: return "positional";
    case ElementGroup::distance_partitioned: return "distance_partitioned";
  }
  return "?";
}

inline ElementGroup parse_element_group(const std::string& s) {
  for (auto g : kAllGroups)
    if (s == to_string(g)) return g;
  throw ConfigError("unknown graph element group '" + s +
                    "' (expected distance, direction, positional, distance_partitioned)");
}

/// [W_D], [W_D (.) t_m(W_theta)], [W_D (.) W_P^k], [W_D (.) t_m'(W_D)].
struct GraphElementSet {
  std::array<std::vector<WeightedAdjacency>, 4> groups;

  std::vector<WeightedAdjacency>& operator[](ElementGroup g) {
    return groups[static_cast<std::size_t>(g)];
  }
  const std::vector<WeightedAdjacency>& operator[](ElementGroup g) const {
    return groups[static_cast<std::size_t>(g)];
  }

  std::size_t n() const {
    for (const auto& g : groups)
      if (!g.empty()) return g.front().n();
    return 0;
  }
};

}  // namespace ddpgcn
