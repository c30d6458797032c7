#pragma once

// Minimal dense tensors with a reverse-mode differentiation tape.
//
// A Tape records every executed op in order; Tape::backward walks the
// records in exact reverse. Parameters live outside any tape and receive
// their gradients through Tape::param leaves. Shapes are explicit: the only
// broadcasting is alignment of a lower-rank operand with the trailing axes
// of the other operand (leading-batch alignment).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ddpgcn/error.hpp"

namespace ddpgcn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw UsageError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + ddpgcn::to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw UsageError("item() on tensor of shape " + ddpgcn::to_string(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Learnable tensor plus Adam moment buffers.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        first_moment(value.shape()),
        second_moment(value.shape()) {}
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the gradient of node `self` into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }
  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }
  /// Leaf whose gradient is added into `p.grad` by backward().
  Var param(Parameter& p) { return push(p.value, true, {}, &p); }

  /// Records an op result. Gradient is tracked when any input requires it.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record_many(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record_many(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& v : inputs) {
      if (v.tape_ != this) throw UsageError("op mixes vars from different tapes");
      rg = rg || nodes_[v.id_].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, zero-allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape());
    return node.grad;
  }

  /// Reverse pass from a scalar loss. Intermediate gradients are recomputed
  /// per call; leaf and parameter gradients accumulate.
  void backward(const Var& loss) {
    if (loss.tape_ != this) throw UsageError("backward: loss belongs to another tape");
    const std::size_t root = loss.id_;
    if (nodes_[root].value.size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " +
                       to_string(nodes_[root].value.shape()));
    }
    for (auto& node : nodes_)
      if (node.backward || node.param) node.grad = Tensor();
    if (!nodes_[root].requires_grad) return;
    grad_buffer(root)[0] += 1.0;
    for (std::size_t k = root + 1; k-- > 0;) {
      auto& node = nodes_[k];
      if (node.grad.size() == 0) continue;
      if (node.backward) {
        node.backward(*this, k);
      } else if (node.param) {
        auto& pg = node.param->grad;
        if (pg.size() != node.value.size()) pg = Tensor(node.value.shape());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += node.grad[i];
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, bool rg, BackwardFn fn, Parameter* p) {
    nodes_.push_back(Node{std::move(value), Tensor(), rg, std::move(fn), p});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(std::span<double> d, std::size_t rows, std::size_t cols) {
  return MapMat(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline CMapMat as_mat(std::span<const double> d, std::size_t rows, std::size_t cols) {
  return CMapMat(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// True when `small` equals the trailing axes of `big`.
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Shape rule for elementwise binary ops: identical shapes, or b aligned with
/// the trailing axes of a.
inline void check_binary(const char* op, const Var& a, const Var& b) {
  if (a.shape() == b.shape() || is_suffix(b.shape(), a.shape())) return;
  throw UsageError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()));
}

/// Adds `g`, summed over leading axes, into the gradient of `id`.
inline void accumulate_reduced(Tape& tape, std::size_t id, std::span<const double> g) {
  if (!tape.requires_grad(id)) return;
  auto& buf = tape.grad_buffer(id);
  const std::size_t inner = buf.size();
  for (std::size_t o = 0; o < g.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) buf[i] += g[o + i];
}

template <class Fwd, class DA, class DB>
Var elementwise_binary(const char* op, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  check_binary(op, a, b);
  const std::size_t total = a.value().size();
  const std::size_t inner = b.value().size();
  Tensor out(a.value().shape());
  {
    const double* x = a.value().data().data();
    const double* y = b.value().data().data();
    double* o = out.data().data();
    for (std::size_t base = 0; base < total; base += inner)
      for (std::size_t i = 0; i < inner; ++i) o[base + i] = fwd(x[base + i], y[i]);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, total, inner, da, db](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    const double* x = t.value(ia).data().data();
    const double* y = t.value(ib).data().data();
    if (t.requires_grad(ia)) {
      double* ga = t.grad_buffer(ia).data().data();
      for (std::size_t base = 0; base < total; base += inner)
        for (std::size_t i = 0; i < inner; ++i) ga[base + i] += g[base + i] * da(x[base + i], y[i]);
    }
    if (t.requires_grad(ib)) {
      double* gb = t.grad_buffer(ib).data().data();
      for (std::size_t base = 0; base < total; base += inner)
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[base + i] * db(x[base + i], y[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  return detail::elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var subtract(const Var& a, const Var& b) {
  return detail::elementwise_binary(
      "subtract", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var hadamard(const Var& a, const Var& b) {
  return detail::elementwise_binary(
      "hadamard", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

/// |p - y| elementwise; subgradient 0 at equality.
inline Var absolute_error(const Var& pred, const Var& target) {
  if (pred.shape() != target.shape()) {
    throw UsageError("absolute_error: shapes differ " + to_string(pred.shape()) + " vs " +
                     to_string(target.shape()));
  }
  auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
  return detail::elementwise_binary(
      "absolute_error", pred, target, [](double x, double y) { return std::abs(x - y); },
      [sgn](double x, double y) { return sgn(x - y); },
      [sgn](double x, double y) { return -sgn(x - y); });
}

inline Var squared_error(const Var& pred, const Var& target) {
  if (pred.shape() != target.shape()) {
    throw UsageError("squared_error: shapes differ " + to_string(pred.shape()) + " vs " +
                     to_string(target.shape()));
  }
  return detail::elementwise_binary(
      "squared_error", pred, target, [](double x, double y) { return (x - y) * (x - y); },
      [](double x, double y) { return 2.0 * (x - y); },
      [](double x, double y) { return -2.0 * (x - y); });
}

inline Var scale(const Var& a, double s) {
  const auto& av = a.value();
  Tensor out(av.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = s * av[k];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += s * g[k];
  });
}

inline Var relu(const Var& a) {
  const auto& av = a.value();
  Tensor out(av.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] > 0.0 ? av[k] : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (x[k] > 0.0) ga[k] += g[k];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g;
  });
}

inline Var reduce_mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw UsageError("reduce_mean: empty tensor");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s / static_cast<double>(n)), {a},
                         [ia, n](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0] / static_cast<double>(n);
                           auto& ga = t.grad_buffer(ia);
                           for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g;
                         });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw UsageError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), a.value().vec());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// For each output flat index, the source flat index under `perm`.
inline std::vector<std::size_t> permute_index(const Shape& in_shape, const std::vector<std::size_t>& perm) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_st = strides_of(in_shape);
  std::vector<std::size_t> src(shape_size(in_shape));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t k = 0; k < src.size(); ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_st[perm[i]];
    src[k] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return src;
}

}  // namespace detail

/// Output axis i is input axis perm[i].
inline Var permute(const Var& a, std::vector<std::size_t> perm) {
  const auto& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  std::vector<bool> used(r, false);
  if (perm.size() != r) throw UsageError("permute: permutation rank mismatch for " + to_string(in_shape));
  for (auto p : perm) {
    if (p >= r || used[p]) throw UsageError("permute: invalid permutation for " + to_string(in_shape));
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  auto src = detail::permute_index(in_shape, perm);
  Tensor out(out_shape);
  const auto& av = a.value();
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = av[src[k]];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, src = std::move(src)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[src[k]] += g[k];
  });
}

/// Swaps the last two axes.
inline Var transpose(const Var& a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw UsageError("transpose: needs rank >= 2, got " + to_string(a.shape()));
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, std::move(perm));
}

// ---------------------------------------------------------------------------
// Matrix product over the trailing two axes
//
//   a (m,k)       x b (...,k,n) -> (...,m,n)   left operand shared by every slice
//   a (...,m,k)   x b (k,n)     -> (...,m,n)   right operand shared by every slice
//   a (...,m,k)   x b (...,k,n) -> (...,m,n)   identical leading axes

inline Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto fail = [&]() {
    throw UsageError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
  };
  if (as.size() < 2 || bs.size() < 2) fail();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) fail();
  const std::size_t ia = a.id(), ib = b.id();
  Tape& tape = a.tape();

  if (as.size() == 2) {
    const std::size_t slices = shape_size(bs) / (k * n);
    Shape out_shape = bs;
    out_shape[out_shape.size() - 2] = m;
    // Gather b's slices side by side: (k, slices*n).
    Tensor wide(Shape{k, slices * n});
    const auto& bv = b.value();
    for (std::size_t s = 0; s < slices; ++s)
      for (std::size_t r = 0; r < k; ++r)
        std::copy_n(bv.data().data() + (s * k + r) * n, n, wide.data().data() + r * slices * n + s * n);
    detail::RowMat prod = detail::as_mat(a.value().data(), m, k) * detail::as_mat(wide.data(), k, slices * n);
    Tensor out(out_shape);
    for (std::size_t s = 0; s < slices; ++s)
      for (std::size_t r = 0; r < m; ++r)
        std::copy_n(prod.data() + r * slices * n + s * n, n, out.data().data() + (s * m + r) * n);
    return tape.record(std::move(out), {a, b},
                       [ia, ib, m, k, n, slices, wide = std::move(wide)](Tape& t, std::size_t self) {
                         const auto& g = t.grad(self);
                         detail::RowMat gw(m, slices * n);
                         for (std::size_t s = 0; s < slices; ++s)
                           for (std::size_t r = 0; r < m; ++r)
                             std::copy_n(g.data().data() + (s * m + r) * n, n, gw.data() + r * slices * n + s * n);
                         if (t.requires_grad(ia)) {
                           auto ga = detail::as_mat(t.grad_buffer(ia).data(), m, k);
                           ga.noalias() += gw * detail::as_mat(wide.data(), k, slices * n).transpose();
                         }
                         if (t.requires_grad(ib)) {
                           detail::RowMat gb = detail::as_mat(t.value(ia).data(), m, k).transpose() * gw;
                           auto& buf = t.grad_buffer(ib);
                           for (std::size_t s = 0; s < slices; ++s)
                             for (std::size_t r = 0; r < k; ++r) {
                               double* dst = buf.data().data() + (s * k + r) * n;
                               const double* src = gb.data() + r * slices * n + s * n;
                               for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                             }
                         }
                       });
  }

  if (bs.size() == 2) {
    const std::size_t rows = shape_size(as) / k;
    Shape out_shape = as;
    out_shape.back() = n;
    Tensor out(out_shape);
    detail::as_mat(out.data(), rows, n).noalias() =
        detail::as_mat(a.value().data(), rows, k) * detail::as_mat(b.value().data(), k, n);
    return tape.record(std::move(out), {a, b}, [ia, ib, rows, k, n](Tape& t, std::size_t self) {
      const auto g = detail::as_mat(t.grad(self).data(), rows, n);
      if (t.requires_grad(ia)) {
        detail::as_mat(t.grad_buffer(ia).data(), rows, k).noalias() +=
            g * detail::as_mat(t.value(ib).data(), k, n).transpose();
      }
      if (t.requires_grad(ib)) {
        detail::as_mat(t.grad_buffer(ib).data(), k, n).noalias() +=
            detail::as_mat(t.value(ia).data(), rows, k).transpose() * g;
      }
    });
  }

  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) fail();
  const std::size_t slices = shape_size(as) / (m * k);
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor out(out_shape);
  for (std::size_t s = 0; s < slices; ++s) {
    detail::as_mat(out.data().subspan(s * m * n, m * n), m, n).noalias() =
        detail::as_mat(a.value().data().subspan(s * m * k, m * k), m, k) *
        detail::as_mat(b.value().data().subspan(s * k * n, k * n), k, n);
  }
  return tape.record(std::move(out), {a, b}, [ia, ib, m, k, n, slices](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t s = 0; s < slices; ++s) {
      const auto gs = detail::as_mat(g.data().subspan(s * m * n, m * n), m, n);
      if (t.requires_grad(ia)) {
        detail::as_mat(t.grad_buffer(ia).data().subspan(s * m * k, m * k), m, k).noalias() +=
            gs * detail::as_mat(t.value(ib).data().subspan(s * k * n, k * n), k, n).transpose();
      }
      if (t.requires_grad(ib)) {
        detail::as_mat(t.grad_buffer(ib).data().subspan(s * k * n, k * n), k, n).noalias() +=
            detail::as_mat(t.value(ia).data().subspan(s * m * k, m * k), m, k).transpose() * gs;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last (channel) axis

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-8) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw UsageError("layer_norm: scalar input");
  const std::size_t c = xs.back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw UsageError("layer_norm: gain/bias must have shape (" + std::to_string(c) + "), got " +
                     to_string(gain.shape()) + " and " + to_string(bias.shape()));
  }
  const std::size_t rows = x.value().size() / c;
  Tensor out(xs);
  Tensor xhat(xs);
  std::vector<double> inv_std(rows);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * inv_std[r];
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                 std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          Tensor* gg = t.requires_grad(ig) ? &t.grad_buffer(ig) : nullptr;
          Tensor* gb = t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              if (gg) (*gg)[j] += g[r * c + j] * xhat[r * c + j];
              if (gb) (*gb)[j] += g[r * c + j];
            }
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[r * c + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * c + j];
            }
            mean_dh *= inv_c;
            mean_dh_h *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[r * c + j] * gv[j];
              gx[r * c + j] += inv_std[r] * (dh - mean_dh - xhat[r * c + j] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 1-D convolution along the time axis
//
// x (B,T,N,Cin), kernel (K,Cin,Cout) -> (B,T_out,N,Cout), applied
// independently per node. `same` zero-pads (K-1)/2 steps before and the rest
// after, so T_out = T; `valid` gives T_out = T - K + 1.

enum class Padding { valid, same };

inline Var conv1d_time(const Var& x, const Var& kernel, Padding padding = Padding::same) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 3 || ks[1] != xs[3]) {
    throw UsageError("conv1d_time: expected x (B,T,N,Cin) and kernel (K,Cin,Cout), got " +
                     to_string(xs) + " and " + to_string(ks));
  }
  const std::size_t batch = xs[0], steps = xs[1], nodes = xs[2], cin = xs[3];
  const std::size_t width = ks[0], cout = ks[2];
  if (width == 0 || width > steps) {
    throw UsageError("conv1d_time: kernel width " + std::to_string(width) + " exceeds time length " +
                     std::to_string(steps));
  }
  const std::size_t pad = padding == Padding::same ? (width - 1) / 2 : 0;
  const std::size_t t_out = padding == Padding::same ? steps : steps - width + 1;
  Tensor out(Shape{batch, t_out, nodes, cout});

  // Output rows [lo, hi) read input rows shifted by (k - pad).
  auto range_for = [=](std::size_t k) {
    const long shift = static_cast<long>(k) - static_cast<long>(pad);
    long lo = std::max<long>(0, -shift);
    long hi = std::min<long>(static_cast<long>(t_out), static_cast<long>(steps) - shift);
    return std::tuple<long, long, long>{lo, std::max(lo, hi), shift};
  };
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < width; ++k) {
      auto [lo, hi, shift] = range_for(k);
      if (hi <= lo) continue;
      const std::size_t len = static_cast<std::size_t>(hi - lo) * nodes;
      const std::size_t in_off = ((b * steps) + static_cast<std::size_t>(lo + shift)) * nodes * cin;
      const std::size_t out_off = ((b * t_out) + static_cast<std::size_t>(lo)) * nodes * cout;
      detail::as_mat(out.data().subspan(out_off, len * cout), len, cout).noalias() +=
          detail::as_mat(xv.data().subspan(in_off, len * cin), len, cin) *
          detail::as_mat(kv.data().subspan(k * cin * cout, cin * cout), cin, cout);
    }
  const std::size_t ix = x.id(), ik = kernel.id();
  return x.tape().record(std::move(out), {x, kernel},
                         [=](Tape& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t k = 0; k < width; ++k) {
                               auto [lo, hi, shift] = range_for(k);
                               if (hi <= lo) continue;
                               const std::size_t len = static_cast<std::size_t>(hi - lo) * nodes;
                               const std::size_t in_off =
                                   ((b * steps) + static_cast<std::size_t>(lo + shift)) * nodes * cin;
                               const std::size_t out_off =
                                   ((b * t_out) + static_cast<std::size_t>(lo)) * nodes * cout;
                               const auto gs = detail::as_mat(g.data().subspan(out_off, len * cout), len, cout);
                               if (t.requires_grad(ix)) {
                                 detail::as_mat(t.grad_buffer(ix).data().subspan(in_off, len * cin), len, cin)
                                     .noalias() +=
                                     gs * detail::as_mat(t.value(ik).data().subspan(k * cin * cout, cin * cout),
                                                         cin, cout)
                                              .transpose();
                               }
                               if (t.requires_grad(ik)) {
                                 detail::as_mat(t.grad_buffer(ik).data().subspan(k * cin * cout, cin * cout),
                                                cin, cout)
                                     .noalias() +=
                                     detail::as_mat(t.value(ix).data().subspan(in_off, len * cin), len, cin)
                                         .transpose() *
                                     gs;
                               }
                             }
                         });
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Gradients are left in place.
inline void adam_step(std::span<Parameter> params, const AdamOptions& opt) {
  for (auto& p : params) {
    if (p.grad.size() != p.value.size()) {
      throw UsageError("adam_step: parameter '" + p.name + "' has no gradient");
    }
    if (p.first_moment.size() != p.value.size()) p.first_moment = Tensor(p.value.shape());
    if (p.second_moment.size() != p.value.size()) p.second_moment = Tensor(p.value.shape());
    ++p.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step));
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      p.first_moment[k] = opt.beta1 * p.first_moment[k] + (1.0 - opt.beta1) * g;
      p.second_moment[k] = opt.beta2 * p.second_moment[k] + (1.0 - opt.beta2) * g * g;
      const double mhat = p.first_moment[k] / c1;
      const double vhat = p.second_moment[k] / c2;
      p.value[k] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

inline void zero_grads(std::span<Parameter> params) {
  for (auto& p : params) {
    if (p.grad.size() != p.value.size()) p.grad = Tensor(p.value.shape());
    else p.grad.fill(0.0);
  }
}

}  // namespace ddpgcn
