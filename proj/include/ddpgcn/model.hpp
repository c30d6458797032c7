#pragma once

// Graph convolution operators and the DDP-GCN forecasting network:
// two ST-convolution blocks (temporal block + spatial block) followed by a
// 1x1 channel reduction and a learned linear map over the time axis.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "ddpgcn/error.hpp"
#include "ddpgcn/graphs.hpp"
#include "ddpgcn/matrix.hpp"
#include "ddpgcn/tensor.hpp"

namespace ddpgcn {

inline Tensor to_tensor(const Matrix& m) { return Tensor(Shape{m.rows(), m.cols()}, m.data()); }

// ---------------------------------------------------------------------------
// Graph convolutions

/// (P X) Theta: node mixing by P (N,N) then channel mixing by Theta (Cin,Cout)
/// for every leading (batch, time) slice of X (..., N, Cin).
inline Var graph_conv(const Var& x, const Var& propagation, const Var& theta) {
  const Shape& xs = x.shape();
  const Shape& ps = propagation.shape();
  const Shape& ts = theta.shape();
  if (xs.size() < 2 || ps.size() != 2 || ps[0] != ps[1] || ps[1] != xs[xs.size() - 2] ||
      ts.size() != 2 || ts[0] != xs.back()) {
    throw UsageError("graph_conv: incompatible shapes X " + to_string(xs) + ", P " + to_string(ps) +
                     ", Theta " + to_string(ts));
  }
  return matmul(matmul(propagation, x), theta);
}

/// Sum of graph_conv over matching lists of propagation matrices and weights.
inline Var multi_graph_conv(const Var& x, std::span<const Var> propagations,
                            std::span<const Var> thetas) {
  if (propagations.empty()) throw UsageError("multi_graph_conv: empty graph list");
  if (propagations.size() != thetas.size()) {
    throw UsageError("multi_graph_conv: " + std::to_string(propagations.size()) + " graphs but " +
                     std::to_string(thetas.size()) + " weight matrices");
  }
  Var out = graph_conv(x, propagations[0], thetas[0]);
  for (std::size_t g = 1; g < propagations.size(); ++g)
    out = add(out, graph_conv(x, propagations[g], thetas[g]));
  return out;
}

/// Fixed set of propagation matrices P_m = I + A_m prepared for
/// fused_graph_conv. The non-zero A_m are concatenated column-wise so node
/// mixing over the whole set is one matrix product. Sets whose off-identity
/// part is mostly zero also keep a compressed copy for that product.
class PropagationSet {
 public:
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;
  static constexpr double kSparseDensity = 0.1;

  PropagationSet() = default;
  explicit PropagationSet(std::span<const Matrix> propagations) {
    if (propagations.empty()) throw UsageError("PropagationSet: empty graph list");
    n_ = propagations.front().rows();
    count_ = propagations.size();
    std::vector<const Matrix*> used;
    for (std::size_t m = 0; m < count_; ++m) {
      const Matrix& p = propagations[m];
      if (p.rows() != n_ || p.cols() != n_) throw UsageError("PropagationSet: matrices must all be N x N");
      bool identity = true;
      for (std::size_t i = 0; i < n_ && identity; ++i)
        for (std::size_t j = 0; j < n_ && identity; ++j) identity = p(i, j) == (i == j ? 1.0 : 0.0);
      if (!identity) {
        mixed_.push_back(m);
        used.push_back(&p);
      }
    }
    auto cat = std::make_shared<Matrix>(n_, n_ * used.size());
    for (std::size_t u = 0; u < used.size(); ++u)
      for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = 0; j < n_; ++j) (*cat)(i, u * n_ + j) = (*used[u])(i, j) - (i == j ? 1.0 : 0.0);
    std::size_t nonzeros = 0;
    for (double v : cat->data()) nonzeros += v != 0.0;
    if (!used.empty() && static_cast<double>(nonzeros) < kSparseDensity * static_cast<double>(cat->size())) {
      auto sparse = std::make_shared<Sparse>(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(cat->cols()));
      std::vector<Eigen::Triplet<double>> entries;
      entries.reserve(nonzeros);
      for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = 0; j < cat->cols(); ++j)
          if ((*cat)(i, j) != 0.0) entries.emplace_back(i, j, (*cat)(i, j));
      sparse->setFromTriplets(entries.begin(), entries.end());
      sparse_ = std::move(sparse);
    }
    off_identity_ = std::move(cat);
  }

  std::size_t size() const { return count_; }
  std::size_t n() const { return n_; }
  /// Indices m whose P_m differs from the identity.
  const std::vector<std::size_t>& mixed() const { return mixed_; }
  /// [A_m for m in mixed()] as an N x (|mixed| N) matrix.
  const std::shared_ptr<const Matrix>& off_identity() const { return off_identity_; }
  /// Compressed off_identity(), or null when the set is dense.
  const std::shared_ptr<const Sparse>& sparse_off_identity() const { return sparse_; }

 private:
  std::size_t n_ = 0;
  std::size_t count_ = 0;
  std::vector<std::size_t> mixed_;
  std::shared_ptr<const Matrix> off_identity_;
  std::shared_ptr<const Sparse> sparse_;
};

/// sum_m (P_m X) Theta_m over a PropagationSet; same contract as
/// multi_graph_conv, computed in node-major layout with one gather/scatter.
inline Var fused_graph_conv(const Var& x, const PropagationSet& set, std::span<const Var> thetas) {
  const Shape& xs = x.shape();
  if (thetas.size() != set.size()) {
    throw UsageError("fused_graph_conv: " + std::to_string(set.size()) + " graphs but " +
                     std::to_string(thetas.size()) + " weight matrices");
  }
  if (xs.size() < 2 || xs[xs.size() - 2] != set.n()) {
    throw UsageError("fused_graph_conv: X " + to_string(xs) + " does not match " + std::to_string(set.n()) +
                     " nodes");
  }
  const std::size_t n = set.n(), cin = xs.back();
  const std::size_t cout = thetas.front().shape().size() == 2 ? thetas.front().shape()[1] : 0;
  for (const auto& th : thetas)
    if (th.shape() != Shape{cin, cout}) {
      throw UsageError("fused_graph_conv: Theta " + to_string(th.shape()) + " must be (" + std::to_string(cin) +
                       "," + std::to_string(cout) + ")");
    }
  const std::size_t slices = x.value().size() / (n * cin);
  const std::size_t k = set.mixed().size();
  using detail::as_mat;
  using detail::RowMat;

  // node-major copy: row j holds node j of every slice, (N, slices*Cin)
  auto xw = std::make_shared<RowMat>(n, slices * cin);
  const double* xv = x.value().data().data();
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(xv + (s * n + j) * cin, cin, xw->data() + j * slices * cin + s * cin);
  auto xrows = [&](RowMat& w) {
    return Eigen::Map<RowMat>(w.data(), static_cast<Eigen::Index>(n * slices), static_cast<Eigen::Index>(w.cols() / slices));
  };

  RowMat ow = RowMat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(slices * cout));
  RowMat zcat(static_cast<Eigen::Index>(k * n), static_cast<Eigen::Index>(slices * cout));
  std::size_t next_mixed = 0;
  for (std::size_t m = 0; m < set.size(); ++m) {
    RowMat z = xrows(*xw) * as_mat(thetas[m].value().data(), cin, cout);  // (N*slices, Cout)
    Eigen::Map<RowMat> zw(z.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(slices * cout));
    ow += zw;
    if (next_mixed < k && set.mixed()[next_mixed] == m) {
      zcat.middleRows(static_cast<Eigen::Index>(next_mixed * n), static_cast<Eigen::Index>(n)) = zw;
      ++next_mixed;
    }
  }
  const auto a = set.off_identity();
  const auto sa = set.sparse_off_identity();
  if (k > 0) {
    if (sa) {
      ow += *sa * zcat;
    } else {
      ow.noalias() += as_mat(a->data(), n, k * n) * zcat;
    }
  }

  Shape out_shape = xs;
  out_shape.back() = cout;
  Tensor out(out_shape);
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(ow.data() + i * slices * cout + s * cout, cout, out.data().data() + (s * n + i) * cout);

  std::vector<std::size_t> theta_ids;
  for (const auto& th : thetas) theta_ids.push_back(th.id());
  const std::size_t ix = x.id();
  const std::vector<std::size_t> mixed = set.mixed();
  Tape& tape = x.tape();
  std::vector<Var> inputs{x};
  inputs.insert(inputs.end(), thetas.begin(), thetas.end());
  return tape.record_many(
      std::move(out), inputs,
      [=, xw = std::move(xw)](Tape& t, std::size_t self) {
        const double* gv = t.grad(self).data().data();
        RowMat gw(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(slices * cout));
        for (std::size_t s = 0; s < slices; ++s)
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(gv + (s * n + i) * cout, cout, gw.data() + i * slices * cout + s * cout);
        RowMat dzcat;
        if (k > 0) {
          if (sa) {
            dzcat = sa->transpose() * gw;
          } else {
            dzcat.noalias() = as_mat(a->data(), n, k * n).transpose() * gw;
          }
        }
        const bool need_x = t.requires_grad(ix);
        RowMat dxw;
        if (need_x) dxw = RowMat::Zero(static_cast<Eigen::Index>(n * slices), static_cast<Eigen::Index>(cin));
        const Eigen::Map<const RowMat> xr(xw->data(), static_cast<Eigen::Index>(n * slices),
                                          static_cast<Eigen::Index>(cin));
        std::size_t next = 0;
        RowMat dz(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(slices * cout));
        for (std::size_t m = 0; m < theta_ids.size(); ++m) {
          dz = gw;
          if (next < k && mixed[next] == m) {
            dz += dzcat.middleRows(static_cast<Eigen::Index>(next * n), static_cast<Eigen::Index>(n));
            ++next;
          }
          const Eigen::Map<const RowMat> dzr(dz.data(), static_cast<Eigen::Index>(n * slices),
                                             static_cast<Eigen::Index>(cout));
          if (t.requires_grad(theta_ids[m])) {
            as_mat(t.grad_buffer(theta_ids[m]).data(), cin, cout).noalias() += xr.transpose() * dzr;
          }
          if (need_x) dxw.noalias() += dzr * as_mat(t.value(theta_ids[m]).data(), cin, cout).transpose();
        }
        if (need_x) {
          double* gx = t.grad_buffer(ix).data().data();
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t j = 0; j < n; ++j) {
              const double* src = dxw.data() + (j * slices + s) * cin;
              double* dst = gx + (s * n + j) * cin;
              for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
            }
        }
      });
}

struct PowerIterationOptions {
  double tolerance = 1e-8;
  std::size_t max_iterations = 10000;
};

/// Largest eigenvalue of a symmetric matrix by power iteration.
inline double largest_eigenvalue(const Matrix& a, const PowerIterationOptions& opt = {}) {
  const std::size_t n = a.rows();
  if (n == 0) throw UsageError("largest_eigenvalue: empty matrix");
  std::vector<double> v(n), w(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    for (double& e : x) e /= s;
    return s;
  };
  normalize(v);
  double lambda = 0.0;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a(i, j) * v[j];
      w[i] = s;
    }
    double rayleigh = 0.0;
    for (std::size_t i = 0; i < n; ++i) rayleigh += v[i] * w[i];
    const double len = normalize(w);
    if (len == 0.0) return 0.0;
    std::swap(v, w);
    if (it > 0 && std::abs(rayleigh - lambda) <= opt.tolerance * std::max(1.0, std::abs(rayleigh))) {
      return rayleigh;
    }
    lambda = rayleigh;
  }
  throw NumericError("power iteration did not converge within " +
                     std::to_string(opt.max_iterations) + " iterations");
}

/// L~ = 2 L / lambda_max - I with L = I - D^-1/2 W_s D^-1/2, W_s = (W + W^T)/2.
inline Matrix scaled_laplacian(const WeightedAdjacency& w, const PowerIterationOptions& opt = {}) {
  const std::size_t n = w.n();
  Matrix ws(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) ws(i, j) = 0.5 * (w(i, j) + w(j, i));
  std::vector<double> dinv_sqrt(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += ws(i, j);
    if (d < 0.0) throw DomainError("scaled_laplacian: negative degree");
    dinv_sqrt[i] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  Matrix lap = Matrix::identity(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) lap(i, j) -= dinv_sqrt[i] * ws(i, j) * dinv_sqrt[j];
  const double lambda_max = largest_eigenvalue(lap, opt);
  if (!(lambda_max > 0.0)) throw NumericError("scaled_laplacian: non-positive largest eigenvalue");
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = 2.0 * lap(i, j) / lambda_max - (i == j ? 1.0 : 0.0);
  return out;
}

/// T_0..T_{K-1} of the scaled Laplacian by the Chebyshev recurrence.
inline std::vector<Matrix> chebyshev_basis(const WeightedAdjacency& w, std::size_t order,
                                           const PowerIterationOptions& opt = {}) {
  if (order < 1) throw ConfigError("Chebyshev order K must be >= 1");
  const std::size_t n = w.n();
  std::vector<Matrix> basis{Matrix::identity(n)};
  if (order == 1) return basis;
  const Matrix lt = scaled_laplacian(w, opt);
  basis.push_back(lt);
  for (std::size_t k = 2; k < order; ++k) {
    Matrix next = matmul(lt, basis[k - 1]);
    for (std::size_t e = 0; e < next.size(); ++e)
      next.data()[e] = 2.0 * next.data()[e] - basis[k - 2].data()[e];
    basis.push_back(std::move(next));
  }
  return basis;
}

/// sum_k (T_k(L~) X) Theta_k.
inline Var cheb_conv(const Var& x, const WeightedAdjacency& w, std::size_t order,
                     std::span<const Var> thetas) {
  if (thetas.size() != order) {
    throw UsageError("cheb_conv: expected " + std::to_string(order) + " weight matrices, got " +
                     std::to_string(thetas.size()));
  }
  std::vector<Var> basis;
  for (const auto& m : chebyshev_basis(w, order)) basis.push_back(x.tape().constant(to_tensor(m)));
  return multi_graph_conv(x, basis, thetas);
}

// ---------------------------------------------------------------------------
// Configuration

enum class SpatialBlockKind { single, parallel, stacked };

inline const char* to_string(SpatialBlockKind k) {
  switch (k) {
    case SpatialBlockKind::single: return "single";
    case SpatialBlockKind::parallel: return "parallel";
    case SpatialBlockKind::stacked: return "stacked";
  }
  return "?";
}

inline SpatialBlockKind parse_spatial_block(const std::string& s) {
  if (s == "single") return SpatialBlockKind::single;
  if (s == "parallel") return SpatialBlockKind::parallel;
  if (s == "stacked") return SpatialBlockKind::stacked;
  throw ConfigError("spatial block must be single, parallel or stacked, got '" + s + "'");
}

struct ModelConfig {
  std::size_t n_links = 0;
  std::size_t history = 12;  // T'
  std::size_t horizon = 12;  // T
  std::vector<std::size_t> channels{16, 16};
  std::size_t temporal_kernel = 3;
  SpatialBlockKind spatial_block = SpatialBlockKind::stacked;
  std::vector<ElementGroup> stacked_order{kAllGroups.begin(), kAllGroups.end()};
  std::vector<ElementGroup> groups{kAllGroups.begin(), kAllGroups.end()};  // enabled
  bool chebyshev = false;  // single block only: K-polynomial filter on W_D
  std::size_t cheb_k = 1;
  bool temporal_first = true;
  std::uint64_t seed = 0;
};

inline void validate(const ModelConfig& c) {
  if (c.n_links == 0) throw ConfigError("model: n_links must be positive");
  if (c.history == 0 || c.horizon == 0) throw ConfigError("model: history and horizon must be positive");
  if (c.channels.empty()) throw ConfigError("model: at least one ST block (channels list) required");
  for (auto ch : c.channels)
    if (ch == 0) throw ConfigError("model: channel widths must be positive");
  if (c.temporal_kernel == 0 || c.temporal_kernel > c.history) {
    throw ConfigError("model: temporal kernel width " + std::to_string(c.temporal_kernel) +
                      " must be in [1, history]");
  }
  auto sorted = c.stacked_order;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::vector<ElementGroup>(kAllGroups.begin(), kAllGroups.end())) {
    throw ConfigError("model: stacked_order must be a permutation of the four element groups");
  }
  if (c.cheb_k < 1) throw ConfigError("model: cheb_k must be >= 1");
  if (c.chebyshev && c.spatial_block != SpatialBlockKind::single) {
    throw ConfigError("model: Chebyshev filtering is only available with the single spatial block");
  }
  if (c.spatial_block != SpatialBlockKind::single && c.groups.empty()) {
    throw ConfigError("model: all graph element groups are disabled");
  }
}

// ---------------------------------------------------------------------------
// Network

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

class DdpGcn {
 public:
  DdpGcn(ModelConfig config, const GraphElementSet& elements) : config_(std::move(config)) {
    validate(config_);
    if (elements.n() != config_.n_links) {
      throw UsageError("model: graphs have " + std::to_string(elements.n()) + " nodes but n_links = " +
                       std::to_string(config_.n_links));
    }
    for (auto g : active_groups()) {
      if (elements[g].empty()) {
        throw ConfigError(std::string("model: element group '") + to_string(g) + "' has no matrices");
      }
      for (const auto& w : elements[g]) propagations_[index(g)].push_back(propagation_matrix(w));
      operators_[index(g)] = PropagationSet(propagations_[index(g)]);
    }
    if (config_.chebyshev) {
      cheb_basis_ = chebyshev_basis(elements[ElementGroup::distance].front(), config_.cheb_k);
      cheb_operator_ = PropagationSet(cheb_basis_);
    }
    build_parameters();
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  Parameter& parameter(const std::string& name) { return params_.at(lookup(name)); }
  bool has_parameter(const std::string& name) const { return by_name_.count(name) > 0; }

  /// Groups actually used by the spatial blocks, in application order.
  std::vector<ElementGroup> active_groups() const {
    if (config_.spatial_block == SpatialBlockKind::single) return {ElementGroup::distance};
    std::vector<ElementGroup> out;
    const auto& order = config_.spatial_block == SpatialBlockKind::stacked
                            ? config_.stacked_order
                            : std::vector<ElementGroup>(kAllGroups.begin(), kAllGroups.end());
    for (auto g : order)
      if (std::find(config_.groups.begin(), config_.groups.end(), g) != config_.groups.end())
        out.push_back(g);
    return out;
  }

  /// (B,T',N,1) -> (B,T,N,1).
  Var forward(Tape& tape, const Var& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != config_.history || xs[3] != 1) {
      throw UsageError("model input must be (B," + std::to_string(config_.history) + ",N,1), got " +
                       to_string(xs));
    }
    if (xs[2] != config_.n_links) {
      throw UsageError("model input has " + std::to_string(xs[2]) + " links but graphs have " +
                       std::to_string(config_.n_links));
    }
    Var h = x;
    for (std::size_t b = 0; b < config_.channels.size(); ++b) {
      if (config_.temporal_first) {
        h = temporal_forward(tape, b, h);
        h = spatial_forward(tape, b, h);
      } else {
        h = spatial_forward(tape, b, h);
        h = temporal_forward(tape, b, h);
      }
    }
    return output_head(tape, h);
  }

  /// Forward without gradient tracking.
  Tensor predict(const Tensor& x) {
    Tape tape;
    return forward(tape, tape.constant(x)).value();
  }

  /// Temporal block of ST block `b`: conv1d (same padding) + bias, ReLU, LN.
  Var temporal_forward(Tape& tape, std::size_t b, const Var& x) {
    const std::string p = "st" + std::to_string(b) + ".temporal.";
    Var h = conv1d_time(x, tape.param(parameter(p + "kernel")), Padding::same);
    h = add(h, tape.param(parameter(p + "bias")));
    h = relu(h);
    return layer_norm(h, tape.param(parameter(p + "ln_gain")), tape.param(parameter(p + "ln_bias")));
  }

  /// Pre-activation output of one element group's multi-graph convolution.
  Var group_conv(Tape& tape, std::size_t b, ElementGroup g, const Var& x) {
    std::vector<Var> thetas;
    for (std::size_t m = 0; m < operators_[index(g)].size(); ++m)
      thetas.push_back(tape.param(parameter(theta_name(b, g, m))));
    return fused_graph_conv(x, operators_[index(g)], thetas);
  }

  /// Propagation matrices of an active group (empty for inactive groups).
  const std::vector<Matrix>& propagations(ElementGroup g) const { return propagations_[index(g)]; }
  /// Chebyshev basis T_0..T_{K-1} when Chebyshev filtering is enabled.
  const std::vector<Matrix>& chebyshev_terms() const { return cheb_basis_; }

  Var spatial_forward(Tape& tape, std::size_t b, const Var& x) {
    const std::string p = "st" + std::to_string(b) + ".spatial.";
    Var h = x;
    if (config_.chebyshev) {
      std::vector<Var> thetas;
      for (std::size_t k = 0; k < cheb_basis_.size(); ++k)
        thetas.push_back(tape.param(parameter(p + "cheb." + std::to_string(k))));
      h = relu(fused_graph_conv(x, cheb_operator_, thetas));
    } else if (config_.spatial_block == SpatialBlockKind::stacked) {
      for (auto g : active_groups()) h = relu(group_conv(tape, b, g, h));
    } else {
      bool first = true;
      for (auto g : active_groups()) {
        Var out = group_conv(tape, b, g, x);
        h = first ? out : add(h, out);
        first = false;
      }
      h = relu(h);
    }
    return layer_norm(h, tape.param(parameter(p + "ln_gain")), tape.param(parameter(p + "ln_bias")));
  }

  static std::string theta_name(std::size_t b, ElementGroup g, std::size_t m) {
    return "st" + std::to_string(b) + ".spatial." + to_string(g) + "." + std::to_string(m);
  }

 private:
  static std::size_t index(ElementGroup g) { return static_cast<std::size_t>(g); }

  std::size_t lookup(const std::string& name) const {
    const auto it = by_name_.find(name);
    if (it == by_name_.end()) throw UsageError("model has no parameter '" + name + "'");
    return it->second;
  }

  Var output_head(Tape& tape, const Var& h) {
    const Shape& hs = h.shape();
    const std::size_t batch = hs[0], steps = hs[1], nodes = hs[2];
    Var y = matmul(h, tape.param(parameter("out.channel.weight")));
    y = add(y, tape.param(parameter("out.channel.bias")));
    y = reshape(y, {batch, steps, nodes});
    y = permute(y, {0, 2, 1});
    y = matmul(y, tape.param(parameter("out.time.weight")));
    y = add(y, tape.param(parameter("out.time.bias")));
    y = permute(y, {0, 2, 1});
    return reshape(y, {batch, config_.horizon, nodes, 1});
  }

  enum class Init { glorot, zeros, ones };

  void add_parameter(const std::string& name, Shape shape, Init init, std::size_t fan_in = 0,
                     std::size_t fan_out = 0) {
    Tensor t(std::move(shape), init == Init::ones ? 1.0 : 0.0);
    if (init == Init::glorot) {
      std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                        static_cast<std::uint32_t>(detail::fnv1a(name)),
                        static_cast<std::uint32_t>(detail::fnv1a(name) >> 32)};
      std::mt19937_64 rng(seq);
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& v : t.data()) v = dist(rng);
    }
    by_name_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  void build_parameters() {
    const std::size_t width = config_.temporal_kernel;
    for (std::size_t b = 0; b < config_.channels.size(); ++b) {
      const std::size_t block_in = b == 0 ? 1 : config_.channels[b - 1];
      const std::size_t cout = config_.channels[b];
      const std::size_t t_in = config_.temporal_first ? block_in : cout;
      const std::size_t s_in = config_.temporal_first ? cout : block_in;
      const std::string tp = "st" + std::to_string(b) + ".temporal.";
      add_parameter(tp + "kernel", {width, t_in, cout}, Init::glorot, width * t_in, width * cout);
      add_parameter(tp + "bias", {cout}, Init::zeros);
      add_parameter(tp + "ln_gain", {cout}, Init::ones);
      add_parameter(tp + "ln_bias", {cout}, Init::zeros);

      const std::string sp = "st" + std::to_string(b) + ".spatial.";
      if (config_.chebyshev) {
        for (std::size_t k = 0; k < config_.cheb_k; ++k)
          add_parameter(sp + "cheb." + std::to_string(k), {s_in, cout}, Init::glorot, s_in, cout);
      } else {
        std::size_t stage_in = s_in;
        for (auto g : active_groups()) {
          // a group acts as one linear map over [P_1 X, ..., P_M X]
          const std::size_t count = propagations_[index(g)].size();
          for (std::size_t m = 0; m < count; ++m)
            add_parameter(theta_name(b, g, m), {stage_in, cout}, Init::glorot, count * stage_in, cout);
          if (config_.spatial_block == SpatialBlockKind::stacked) stage_in = cout;
        }
      }
      add_parameter(sp + "ln_gain", {cout}, Init::ones);
      add_parameter(sp + "ln_bias", {cout}, Init::zeros);
    }
    const std::size_t c_last = config_.channels.back();
    add_parameter("out.channel.weight", {c_last, 1}, Init::glorot, c_last, 1);
    add_parameter("out.channel.bias", {1}, Init::zeros);
    add_parameter("out.time.weight", {config_.history, config_.horizon}, Init::glorot, config_.history,
                  config_.horizon);
    add_parameter("out.time.bias", {config_.horizon}, Init::zeros);
  }

  ModelConfig config_;
  std::array<std::vector<Matrix>, 4> propagations_;
  std::array<PropagationSet, 4> operators_;
  std::vector<Matrix> cheb_basis_;
  PropagationSet cheb_operator_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
};

}  // namespace ddpgcn
