#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rise/core/errors.hpp"
#include "rise/core/random.hpp"

namespace rise {

// Reverse-mode autodiff over dense row-major tensors, templated on the scalar
// type: float for training/inference, double as the shadow type used by the
// finite-difference gradient oracles.

template <class F>
class TensorT;

namespace detail {

inline thread_local int no_grad_depth = 0;

template <class F>
struct Node {
  std::vector<int> shape;
  std::vector<F> data;
  std::vector<F> grad;  // allocated on first use during backward
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was called on
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad into parents' grads

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), F(0));
  }
};

}  // namespace detail

// While alive, newly created tensors record no graph (inference mode).
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class F>
class TensorT {
 public:
  using Scalar = F;
  using NodePtr = std::shared_ptr<detail::Node<F>>;

  TensorT() = default;
  explicit TensorT(NodePtr n) : n_(std::move(n)) {}

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), F(0), requires_grad);
  }

  static TensorT filled(std::vector<int> shape, F value, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<F>>();
    n->shape = std::move(shape);
    n->data.assign(count(n->shape), value);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(std::vector<int> shape, std::vector<F> data,
                           bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != count(shape))
      throw DimensionError("from_data: data length does not match shape");
    auto n = std::make_shared<detail::Node<F>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(F v) { return from_data({1}, {v}); }

  static TensorT randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                       bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.n_->data) x = static_cast<F>(rng.normal(0.0, stddev));
    return t;
  }

  static TensorT rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                              bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.n_->data) x = static_cast<F>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return n_->numel(); }

  bool requires_grad() const { return n_->requires_grad; }
  TensorT& set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    return *this;
  }

  std::vector<F>& raw() { return n_->data; }
  const std::vector<F>& raw() const { return n_->data; }
  F* data() { return n_->data.data(); }
  const F* data() const { return n_->data.data(); }

  bool has_grad() const { return !n_->grad.empty(); }
  std::vector<F>& raw_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<F>& grad() const {
    if (n_->grad.empty()) throw UsageError("grad accessed before backward populated it");
    return n_->grad;
  }

  void zero_grad() {
    n_->grad.assign(n_->data.size(), F(0));
    n_->backward_ran = false;
  }
  void drop_grad() {
    n_->grad.clear();
    n_->backward_ran = false;
  }

  F item() const {
    if (numel() != 1) throw UsageError("item() on tensor with numel != 1");
    return n_->data[0];
  }

  NodePtr node() const { return n_; }

  // Reverse-mode sweep from a scalar loss. Calling it twice on the same node
  // without clearing gradients is an error: accumulation across sweeps is
  // almost always a bug in a training loop.
  void backward() {
    if (numel() != 1) throw UsageError("backward() requires a scalar loss");
    if (n_->backward_ran)
      throw UsageError("backward() called twice on the same loss without zero_grad()");
    n_->backward_ran = true;

    // Iterative post-order DFS over parents; graphs can be thousands deep.
    std::vector<detail::Node<F>*> order;
    std::unordered_set<detail::Node<F>*> visited;
    struct Frame {
      detail::Node<F>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    visited.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node<F>* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] = F(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<F>* node = *it;
      if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
  }

  // Row-major Eigen views.
  using MatMap = Eigen::Map<Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  MatMap mat(int rows, int cols) { return MatMap(data(), rows, cols); }
  ConstMatMap mat(int rows, int cols) const { return ConstMatMap(data(), rows, cols); }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw DimensionError("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  NodePtr n_;
};

using Tensor = TensorT<float>;

namespace detail {

// Builds an op result node. Parents and the backprop closure are recorded
// only when gradients are both enabled and needed.
template <class F>
TensorT<F> make_op(std::vector<int> shape, std::vector<F> data,
                   std::vector<TensorT<F>> parents,
                   std::function<void(Node<F>&)> backprop) {
  auto out = TensorT<F>::from_data(std::move(shape), std::move(data));
  bool need = false;
  if (grad_enabled())
    for (const auto& p : parents) need = need || p.requires_grad();
  if (need) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return out;
}

template <class F>
Eigen::Map<Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> grad_mat(
    Node<F>& n, int rows, int cols) {
  n.ensure_grad();
  return {n.grad.data(), rows, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape utilities
// ---------------------------------------------------------------------------

template <class F>
void check_same_shape(TensorT<F> a, TensorT<F> b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": operand shapes differ");
}

template <class F>
TensorT<F> add(TensorT<F> a, TensorT<F> b) {
  check_same_shape(a, b, "add");
  std::vector<F> out(a.raw());
  const F* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return detail::make_op<F>(
      a.shape(), std::move(out), {a, b}, [a, b](detail::Node<F>& n) mutable {
        if (a.requires_grad()) {
          auto& ga = a.raw_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.raw_grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i];
        }
      });
}

template <class F>
TensorT<F> sub(TensorT<F> a, TensorT<F> b) {
  check_same_shape(a, b, "sub");
  std::vector<F> out(a.raw());
  const F* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return detail::make_op<F>(
      a.shape(), std::move(out), {a, b}, [a, b](detail::Node<F>& n) mutable {
        if (a.requires_grad()) {
          auto& ga = a.raw_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.raw_grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
        }
      });
}

template <class F>
TensorT<F> mul(TensorT<F> a, TensorT<F> b) {
  check_same_shape(a, b, "mul");
  std::vector<F> out(a.raw());
  const F* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return detail::make_op<F>(
      a.shape(), std::move(out), {a, b}, [a, b](detail::Node<F>& n) mutable {
        if (a.requires_grad()) {
          auto& ga = a.raw_grad();
          const F* pb2 = b.data();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * pb2[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.raw_grad();
          const F* pa = a.data();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * pa[i];
        }
      });
}

template <class F>
TensorT<F> scale(TensorT<F> a, F s) {
  std::vector<F> out(a.raw());
  for (auto& x : out) x *= s;
  return detail::make_op<F>(a.shape(), std::move(out), {a}, [a, s](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * s;
  });
}

template <class F>
TensorT<F> add_scalar(TensorT<F> a, F s) {
  std::vector<F> out(a.raw());
  for (auto& x : out) x += s;
  return detail::make_op<F>(a.shape(), std::move(out), {a}, [a](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
  });
}

template <class F>
TensorT<F> relu(TensorT<F> a) {
  std::vector<F> out(a.raw());
  for (auto& x : out) x = x > F(0) ? x : F(0);
  return detail::make_op<F>(a.shape(), std::move(out), {a}, [a](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const F* pa = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (pa[i] > F(0)) ga[i] += n.grad[i];
  });
}

// Exact GELU, x * Phi(x).
template <class F>
TensorT<F> gelu(TensorT<F> a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<F> out(a.raw());
  for (auto& x : out) {
    double xd = static_cast<double>(x);
    x = static_cast<F>(xd * 0.5 * (1.0 + std::erf(xd * inv_sqrt2)));
  }
  return detail::make_op<F>(a.shape(), std::move(out), {a}, [a](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const F* pa = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      double x = static_cast<double>(pa[i]);
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga[i] += n.grad[i] * static_cast<F>(phi + x * dens);
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed kernels)
// ---------------------------------------------------------------------------

template <class F>
TensorT<F> matmul(TensorT<F> a, TensorT<F> b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: operands must be rank 2");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree (" + std::to_string(a.dim(1)) +
                         " vs " + std::to_string(b.dim(0)) + ")");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<F> out(static_cast<std::size_t>(m) * n);
  {
    typename TensorT<F>::ConstMatMap ma(a.data(), m, k), mb(b.data(), k, n);
    typename TensorT<F>::MatMap mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  return detail::make_op<F>(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node<F>& node) mutable {
        typename TensorT<F>::ConstMatMap g(node.grad.data(), m, n);
        if (a.requires_grad()) {
          typename TensorT<F>::ConstMatMap mb(b.data(), k, n);
          detail::grad_mat(*a.node(), m, k).noalias() += g * mb.transpose();
        }
        if (b.requires_grad()) {
          typename TensorT<F>::ConstMatMap ma(a.data(), m, k);
          detail::grad_mat(*b.node(), k, n).noalias() += ma.transpose() * g;
        }
      });
}

// a [m x k] times b^T where b is [n x k].
template <class F>
TensorT<F> matmul_nt(TensorT<F> a, TensorT<F> b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul_nt: operands must be rank 2");
  if (a.dim(1) != b.dim(1)) throw DimensionError("matmul_nt: inner dimensions disagree");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<F> out(static_cast<std::size_t>(m) * n);
  {
    typename TensorT<F>::ConstMatMap ma(a.data(), m, k), mb(b.data(), n, k);
    typename TensorT<F>::MatMap mo(out.data(), m, n);
    mo.noalias() = ma * mb.transpose();
  }
  return detail::make_op<F>(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node<F>& node) mutable {
        typename TensorT<F>::ConstMatMap g(node.grad.data(), m, n);
        if (a.requires_grad()) {
          typename TensorT<F>::ConstMatMap mb(b.data(), n, k);
          detail::grad_mat(*a.node(), m, k).noalias() += g * mb;
        }
        if (b.requires_grad()) {
          typename TensorT<F>::ConstMatMap ma(a.data(), m, k);
          detail::grad_mat(*b.node(), n, k).noalias() += g.transpose() * ma;
        }
      });
}

// Adds a length-d bias to every row of x [... x d].
template <class F>
TensorT<F> add_rowwise(TensorT<F> x, TensorT<F> bias) {
  if (bias.rank() != 1) throw DimensionError("add_rowwise: bias must be rank 1");
  const int d = bias.dim(0);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != d)
    throw DimensionError("add_rowwise: last dimension of x must match bias");
  const std::int64_t rows = x.numel() / d;
  std::vector<F> out(x.raw());
  const F* pb = bias.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] += pb[j];
  return detail::make_op<F>(
      x.shape(), std::move(out), {x, bias}, [x, bias, rows, d](detail::Node<F>& n) mutable {
        if (x.requires_grad()) {
          auto& gx = x.raw_grad();
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
        }
        if (bias.requires_grad()) {
          auto& gb = bias.raw_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) gb[j] += n.grad[static_cast<std::size_t>(r) * d + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class F>
TensorT<F> sum_all(TensorT<F> a) {
  F s = F(0);
  for (F x : a.raw()) s += x;
  return detail::make_op<F>({1}, {s}, {a}, [a](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    for (auto& g : ga) g += n.grad[0];
  });
}

template <class F>
TensorT<F> mean_all(TensorT<F> a) {
  const F inv = F(1) / static_cast<F>(a.numel());
  F s = F(0);
  for (F x : a.raw()) s += x;
  s *= inv;
  return detail::make_op<F>({1}, {s}, {a}, [a, inv](detail::Node<F>& n) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    for (auto& g : ga) g += n.grad[0] * inv;
  });
}

template <class F>
TensorT<F> mse_loss(TensorT<F> pred, TensorT<F> target) {
  check_same_shape(pred, target, "mse_loss");
  auto d = sub(pred, target);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Per-row standardization over the last dimension followed by an affine map.
template <class F>
TensorT<F> layer_norm(TensorT<F> x, TensorT<F> gain, TensorT<F> bias,
                      F eps = F(1e-5)) {
  if (gain.rank() != 1 || bias.rank() != 1)
    throw DimensionError("layer_norm: gain/bias must be rank 1");
  const int d = gain.dim(0);
  if (d == 0) throw DimensionError("layer_norm: zero-width feature dimension");
  if (bias.dim(0) != d) throw DimensionError("layer_norm: gain/bias lengths differ");
  if (x.rank() < 1 || x.dim(x.rank() - 1) != d)
    throw DimensionError("layer_norm: last dimension of x must match gain");
  const std::int64_t rows = x.numel() / d;

  std::vector<F> out(x.raw().size());
  auto xhat = std::make_shared<std::vector<F>>(x.raw().size());
  auto inv_std = std::make_shared<std::vector<F>>(rows);
  const F* px = x.data();
  const F* pg = gain.data();
  const F* pb = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const F* row = px + r * d;
    F mean = F(0);
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<F>(d);
    F var = F(0);
    for (int j = 0; j < d; ++j) {
      F c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<F>(d);
    F is = F(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < d; ++j) {
      F xh = (row[j] - mean) * is;
      (*xhat)[static_cast<std::size_t>(r) * d + j] = xh;
      out[static_cast<std::size_t>(r) * d + j] = xh * pg[j] + pb[j];
    }
  }
  return detail::make_op<F>(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, rows, d](detail::Node<F>& n) mutable {
        const F* pg2 = gain.data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const F* go = n.grad.data() + r * d;
          const F* xh = xhat->data() + r * d;
          if (x.requires_grad()) {
            // dL/dxhat = go * gain; row formula for standardized inputs.
            F sum_dxh = F(0), sum_dxh_xh = F(0);
            for (int j = 0; j < d; ++j) {
              F dxh = go[j] * pg2[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[j];
            }
            F* gx = x.raw_grad().data() + r * d;
            const F is = (*inv_std)[r];
            const F invd = F(1) / static_cast<F>(d);
            for (int j = 0; j < d; ++j) {
              F dxh = go[j] * pg2[j];
              gx[j] += is * (dxh - sum_dxh * invd - xh[j] * sum_dxh_xh * invd);
            }
          }
          if (gain.requires_grad()) {
            F* gg = gain.raw_grad().data();
            for (int j = 0; j < d; ++j) gg[j] += go[j] * xh[j];
          }
          if (bias.requires_grad()) {
            F* gb = bias.raw_grad().data();
            for (int j = 0; j < d; ++j) gb[j] += go[j];
          }
        }
      });
}

template <class F>
TensorT<F> softmax_lastdim(TensorT<F> x) {
  if (x.rank() < 1) throw DimensionError("softmax: rank 0");
  const int d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const F* row = px + r * d;
    F* orow = out.data() + r * d;
    F mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    F sum = F(0);
    for (int j = 0; j < d; ++j) {
      F e = std::exp(row[j] - mx);
      orow[j] = e;
      sum += e;
    }
    F inv = F(1) / sum;
    for (int j = 0; j < d; ++j) orow[j] *= inv;
  }
  return detail::make_op<F>(
      x.shape(), std::move(out), {x}, [x, rows, d](detail::Node<F>& n) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const F* s = n.data.data() + r * d;
          const F* go = n.grad.data() + r * d;
          F dot = F(0);
          for (int j = 0; j < d; ++j) dot += go[j] * s[j];
          F* g = gx.data() + r * d;
          for (int j = 0; j < d; ++j) g[j] += s[j] * (go[j] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Row indexing / assembly
// ---------------------------------------------------------------------------

template <class F>
TensorT<F> gather_rows(TensorT<F> x, std::vector<int> idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows: x must be rank 2");
  const int cols = x.dim(1), n = static_cast<int>(idx.size());
  for (int i : idx)
    if (i < 0 || i >= x.dim(0)) throw UsageError("gather_rows: row index out of range");
  std::vector<F> out(static_cast<std::size_t>(n) * cols);
  const F* px = x.data();
  for (int r = 0; r < n; ++r)
    std::copy_n(px + static_cast<std::size_t>(idx[r]) * cols, cols,
                out.data() + static_cast<std::size_t>(r) * cols);
  auto idx_p = std::make_shared<std::vector<int>>(std::move(idx));
  return detail::make_op<F>(
      {n, cols}, std::move(out), {x}, [x, idx_p, cols](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (std::size_t r = 0; r < idx_p->size(); ++r) {
          F* dst = gx.data() + static_cast<std::size_t>((*idx_p)[r]) * cols;
          const F* src = node.grad.data() + r * cols;
          for (int j = 0; j < cols; ++j) dst[j] += src[j];
        }
      });
}

template <class F>
TensorT<F> slice_rows(TensorT<F> x, int start, int len) {
  if (x.rank() != 2) throw DimensionError("slice_rows: x must be rank 2");
  if (start < 0 || len < 0 || start + len > x.dim(0))
    throw UsageError("slice_rows: range out of bounds");
  const int cols = x.dim(1);
  std::vector<F> out(x.data() + static_cast<std::size_t>(start) * cols,
                     x.data() + static_cast<std::size_t>(start + len) * cols);
  return detail::make_op<F>(
      {len, cols}, std::move(out), {x}, [x, start, cols](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        F* gx = x.raw_grad().data() + static_cast<std::size_t>(start) * cols;
        for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
      });
}

template <class F>
TensorT<F> concat_rows(const std::vector<TensorT<F>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<F> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (const auto& p : parts) out.insert(out.end(), p.raw().begin(), p.raw().end());
  auto parts_copy = parts;
  return detail::make_op<F>(
      {rows, cols}, std::move(out), parts_copy, [parts_copy](detail::Node<F>& node) mutable {
        std::size_t off = 0;
        for (auto& p : parts_copy) {
          const std::size_t len = p.raw().size();
          if (p.requires_grad()) {
            auto& gp = p.raw_grad();
            for (std::size_t i = 0; i < len; ++i) gp[i] += node.grad[off + i];
          }
          off += len;
        }
      });
}

// Reshape with identical element count; data is copied (tensors stay dense).
template <class F>
TensorT<F> reshape(TensorT<F> x, std::vector<int> shape) {
  if (TensorT<F>::count(shape) != x.numel()) throw DimensionError("reshape: element count differs");
  std::vector<F> out(x.raw());
  return detail::make_op<F>(std::move(shape), std::move(out), {x},
                            [x](detail::Node<F>& node) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.raw_grad();
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += node.grad[i];
                            });
}

// [n x (h*dh)] -> [h x n x dh]
template <class F>
TensorT<F> split_heads(TensorT<F> x, int heads) {
  if (x.rank() != 2) throw DimensionError("split_heads: x must be rank 2");
  const int n = x.dim(0), d = x.dim(1);
  if (d % heads != 0) throw DimensionError("split_heads: width not divisible by head count");
  const int dh = d / heads;
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      std::copy_n(px + (static_cast<std::size_t>(i) * d + h * dh), dh,
                  out.data() + ((static_cast<std::size_t>(h) * n + i) * dh));
  return detail::make_op<F>(
      {heads, n, dh}, std::move(out), {x}, [x, heads, n, dh, d](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < n; ++i) {
            const F* src = node.grad.data() + ((static_cast<std::size_t>(h) * n + i) * dh);
            F* dst = gx.data() + (static_cast<std::size_t>(i) * d + h * dh);
            for (int j = 0; j < dh; ++j) dst[j] += src[j];
          }
      });
}

// [h x n x dh] -> [n x (h*dh)]
template <class F>
TensorT<F> merge_heads(TensorT<F> x) {
  if (x.rank() != 3) throw DimensionError("merge_heads: x must be rank 3");
  const int heads = x.dim(0), n = x.dim(1), dh = x.dim(2), d = heads * dh;
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      std::copy_n(px + ((static_cast<std::size_t>(h) * n + i) * dh), dh,
                  out.data() + (static_cast<std::size_t>(i) * d + h * dh));
  return detail::make_op<F>(
      {n, d}, std::move(out), {x}, [x, heads, n, dh, d](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < n; ++i) {
            const F* src = node.grad.data() + (static_cast<std::size_t>(i) * d + h * dh);
            F* dst = gx.data() + ((static_cast<std::size_t>(h) * n + i) * dh);
            for (int j = 0; j < dh; ++j) dst[j] += src[j];
          }
      });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// softmax(q k^T / sqrt(dh) + mask) v per head. q is [h x m x dh]; k and v are
// [h x n x dh]; the optional mask is additive, [m x n].
template <class F>
TensorT<F> scaled_dot_attention(TensorT<F> q, TensorT<F> k, TensorT<F> v,
                                const TensorT<F>* mask = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw DimensionError("attention: q/k/v must be rank 3 [heads x seq x dh]");
  const int h = q.dim(0), m = q.dim(1), dh = q.dim(2), n = k.dim(1);
  if (k.dim(0) != h || v.dim(0) != h || v.dim(1) != n || k.dim(2) != dh || v.dim(2) != dh)
    throw DimensionError("attention: head/sequence dimensions disagree");
  if (mask && (mask->rank() != 2 || mask->dim(0) != m || mask->dim(1) != n))
    throw DimensionError("attention: mask must be [m x n]");
  for (const auto* t : {&q, &k, &v})
    for (F x : t->raw())
      if (std::isnan(static_cast<double>(x))) throw NumericError("attention: NaN in inputs");

  const F inv_sqrt = F(1) / std::sqrt(static_cast<F>(dh));
  std::vector<F> out(static_cast<std::size_t>(h) * m * dh);
  auto probs = std::make_shared<std::vector<F>>(static_cast<std::size_t>(h) * m * n);
  using CMap = typename TensorT<F>::ConstMatMap;
  using MMap = typename TensorT<F>::MatMap;
  for (int hd = 0; hd < h; ++hd) {
    CMap mq(q.data() + static_cast<std::size_t>(hd) * m * dh, m, dh);
    CMap mk(k.data() + static_cast<std::size_t>(hd) * n * dh, n, dh);
    CMap mv(v.data() + static_cast<std::size_t>(hd) * n * dh, n, dh);
    MMap mp(probs->data() + static_cast<std::size_t>(hd) * m * n, m, n);
    mp.noalias() = mq * mk.transpose() * inv_sqrt;
    if (mask) {
      CMap mm(mask->data(), m, n);
      mp += mm;
    }
    for (int i = 0; i < m; ++i) {
      F mx = mp(i, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, mp(i, j));
      F sum = F(0);
      for (int j = 0; j < n; ++j) {
        F e = std::exp(mp(i, j) - mx);
        mp(i, j) = e;
        sum += e;
      }
      mp.row(i) *= F(1) / sum;
    }
    MMap mo(out.data() + static_cast<std::size_t>(hd) * m * dh, m, dh);
    mo.noalias() = mp * mv;
  }

  std::vector<TensorT<F>> parents = {q, k, v};
  if (mask) parents.push_back(*mask);
  return detail::make_op<F>(
      {h, m, dh}, std::move(out), parents,
      [q, k, v, probs, h, m, n, dh, inv_sqrt](detail::Node<F>& node) mutable {
        using Mat = Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        for (int hd = 0; hd < h; ++hd) {
          CMap go(node.grad.data() + static_cast<std::size_t>(hd) * m * dh, m, dh);
          CMap mp(probs->data() + static_cast<std::size_t>(hd) * m * n, m, n);
          CMap mq(q.data() + static_cast<std::size_t>(hd) * m * dh, m, dh);
          CMap mk(k.data() + static_cast<std::size_t>(hd) * n * dh, n, dh);
          CMap mv(v.data() + static_cast<std::size_t>(hd) * n * dh, n, dh);
          if (v.requires_grad()) {
            MMap gv(detail::grad_mat(*v.node(), h * n, dh).data() +
                        static_cast<std::size_t>(hd) * n * dh,
                    n, dh);
            gv.noalias() += mp.transpose() * go;
          }
          if (q.requires_grad() || k.requires_grad()) {
            Mat dp = go * mv.transpose();                      // [m x n]
            Mat ds(m, n);                                      // softmax backward
            for (int i = 0; i < m; ++i) {
              F dot = mp.row(i).dot(dp.row(i));
              ds.row(i) = mp.row(i).cwiseProduct(dp.row(i).array().matrix() -
                                                 Mat::Constant(1, n, dot));
            }
            ds *= inv_sqrt;
            if (q.requires_grad()) {
              MMap gq(detail::grad_mat(*q.node(), h * m, dh).data() +
                          static_cast<std::size_t>(hd) * m * dh,
                      m, dh);
              gq.noalias() += ds * mk;
            }
            if (k.requires_grad()) {
              MMap gk(detail::grad_mat(*k.node(), h * n, dh).data() +
                          static_cast<std::size_t>(hd) * n * dh,
                      n, dh);
              gk.noalias() += ds.transpose() * mq;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 1-D convolution stack (used by the diffusion noise predictor)
// ---------------------------------------------------------------------------

// x [B x Cin x L], w [Cout x Cin x K], b [Cout]; zero padding.
template <class F>
TensorT<F> conv1d(TensorT<F> x, TensorT<F> w, TensorT<F> b, int stride = 1,
                  int pad = 0) {
  if (x.rank() != 3 || w.rank() != 3) throw DimensionError("conv1d: x and w must be rank 3");
  const int B = x.dim(0), cin = x.dim(1), L = x.dim(2);
  const int cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != cin) throw DimensionError("conv1d: channel mismatch");
  if (b.rank() != 1 || b.dim(0) != cout) throw DimensionError("conv1d: bias length mismatch");
  if (stride < 1) throw UsageError("conv1d: stride must be >= 1");
  const int lout = (L + 2 * pad - K) / stride + 1;
  if (lout < 1) throw DimensionError("conv1d: output length would be empty");

  // im2col per batch item, then one gemm against w flattened to [cout x cin*K].
  const int ck = cin * K;
  std::vector<F> out(static_cast<std::size_t>(B) * cout * lout);
  auto cols = std::make_shared<std::vector<F>>(static_cast<std::size_t>(B) * lout * ck, F(0));
  using CMap = typename TensorT<F>::ConstMatMap;
  using MMap = typename TensorT<F>::MatMap;
  CMap wf(w.data(), cout, ck);
  for (int bi = 0; bi < B; ++bi) {
    F* col = cols->data() + static_cast<std::size_t>(bi) * lout * ck;
    const F* px = x.data() + static_cast<std::size_t>(bi) * cin * L;
    for (int o = 0; o < lout; ++o)
      for (int c = 0; c < cin; ++c)
        for (int t = 0; t < K; ++t) {
          int src = o * stride + t - pad;
          if (src >= 0 && src < L)
            col[static_cast<std::size_t>(o) * ck + c * K + t] = px[static_cast<std::size_t>(c) * L + src];
        }
    MMap y(out.data() + static_cast<std::size_t>(bi) * cout * lout, cout, lout);
    CMap colm(col, lout, ck);
    y.noalias() = wf * colm.transpose();
    for (int c = 0; c < cout; ++c) y.row(c).array() += b.data()[c];
  }
  return detail::make_op<F>(
      {B, cout, lout}, std::move(out), {x, w, b},
      [x, w, b, cols, B, cin, L, cout, K, lout, stride, pad, ck](detail::Node<F>& node) mutable {
        using Mat = Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        CMap wf2(w.data(), cout, ck);
        for (int bi = 0; bi < B; ++bi) {
          CMap gy(node.grad.data() + static_cast<std::size_t>(bi) * cout * lout, cout, lout);
          CMap colm(cols->data() + static_cast<std::size_t>(bi) * lout * ck, lout, ck);
          if (w.requires_grad())
            detail::grad_mat(*w.node(), cout, ck).noalias() += gy * colm;
          if (b.requires_grad()) {
            F* gb = b.raw_grad().data();
            for (int c = 0; c < cout; ++c) gb[c] += gy.row(c).sum();
          }
          if (x.requires_grad()) {
            Mat gcol = gy.transpose() * wf2;  // [lout x ck]
            F* gx = x.raw_grad().data() + static_cast<std::size_t>(bi) * cin * L;
            for (int o = 0; o < lout; ++o)
              for (int c = 0; c < cin; ++c)
                for (int t = 0; t < K; ++t) {
                  int src = o * stride + t - pad;
                  if (src >= 0 && src < L)
                    gx[static_cast<std::size_t>(c) * L + src] += gcol(o, c * K + t);
                }
          }
        }
      });
}

// [B x C x L] -> [B x C x 2L], nearest neighbour.
template <class F>
TensorT<F> upsample_nearest2(TensorT<F> x) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest2: x must be rank 3");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  std::vector<F> out(static_cast<std::size_t>(B) * C * 2 * L);
  const F* px = x.data();
  for (std::int64_t rc = 0; rc < static_cast<std::int64_t>(B) * C; ++rc)
    for (int l = 0; l < L; ++l) {
      F val = px[rc * L + l];
      out[(rc * 2 * L) + 2 * l] = val;
      out[(rc * 2 * L) + 2 * l + 1] = val;
    }
  return detail::make_op<F>(
      {B, C, 2 * L}, std::move(out), {x}, [x, B, C, L](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (std::int64_t rc = 0; rc < static_cast<std::int64_t>(B) * C; ++rc)
          for (int l = 0; l < L; ++l)
            gx[rc * L + l] += node.grad[rc * 2 * L + 2 * l] + node.grad[rc * 2 * L + 2 * l + 1];
      });
}

// Channel concatenation for rank-3 tensors: [B x C1 x L] + [B x C2 x L].
template <class F>
TensorT<F> concat_channels(TensorT<F> a, TensorT<F> b) {
  if (a.rank() != 3 || b.rank() != 3) throw DimensionError("concat_channels: rank 3 required");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: batch/length mismatch");
  const int B = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), L = a.dim(2);
  std::vector<F> out(static_cast<std::size_t>(B) * (c1 + c2) * L);
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.data() + static_cast<std::size_t>(bi) * c1 * L, static_cast<std::size_t>(c1) * L,
                out.data() + static_cast<std::size_t>(bi) * (c1 + c2) * L);
    std::copy_n(b.data() + static_cast<std::size_t>(bi) * c2 * L, static_cast<std::size_t>(c2) * L,
                out.data() + static_cast<std::size_t>(bi) * (c1 + c2) * L + c1 * L);
  }
  return detail::make_op<F>(
      {B, c1 + c2, L}, std::move(out), {a, b}, [a, b, B, c1, c2, L](detail::Node<F>& node) mutable {
        for (int bi = 0; bi < B; ++bi) {
      const F* g = node.grad.data() + static_cast<std::size_t>(bi) * (c1 + c2) * L;
          if (a.requires_grad()) {
            F* ga = a.raw_grad().data() + static_cast<std::size_t>(bi) * c1 * L;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(c1) * L; ++i) ga[i] += g[i];
          }
          if (b.requires_grad()) {
            F* gb = b.raw_grad().data() + static_cast<std::size_t>(bi) * c2 * L;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(c2) * L; ++i)
              gb[i] += g[c1 * L + i];
          }
        }
      });
}

// Per-(batch, position) normalization across channels of [B x C x L].
template <class F>
TensorT<F> transpose_cl(TensorT<F> x) {
  if (x.rank() != 3) throw DimensionError("transpose_cl: rank 3 required");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l)
        out[(static_cast<std::size_t>(bi) * L + l) * C + c] =
            px[(static_cast<std::size_t>(bi) * C + c) * L + l];
  return detail::make_op<F>(
      {B, L, C}, std::move(out), {x}, [x, B, C, L](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (int bi = 0; bi < B; ++bi)
          for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
              gx[(static_cast<std::size_t>(bi) * C + c) * L + l] +=
                  node.grad[(static_cast<std::size_t>(bi) * L + l) * C + c];
      });
}

template <class F>
TensorT<F> transpose_lc(TensorT<F> x) {
  if (x.rank() != 3) throw DimensionError("transpose_lc: rank 3 required");
  const int B = x.dim(0), L = x.dim(1), C = x.dim(2);
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  for (int bi = 0; bi < B; ++bi)
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        out[(static_cast<std::size_t>(bi) * C + c) * L + l] =
            px[(static_cast<std::size_t>(bi) * L + l) * C + c];
  return detail::make_op<F>(
      {B, C, L}, std::move(out), {x}, [x, B, C, L](detail::Node<F>& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.raw_grad();
        for (int bi = 0; bi < B; ++bi)
          for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c)
              gx[(static_cast<std::size_t>(bi) * L + l) * C + c] +=
                  node.grad[(static_cast<std::size_t>(bi) * C + c) * L + l];
      });
}

// Feature-wise affine modulation: y[b,c,l] = x[b,c,l] * (1 + s[b,c]) + t[b,c].
template <class F>
TensorT<F> film(TensorT<F> x, TensorT<F> s, TensorT<F> t) {
  if (x.rank() != 3 || s.rank() != 2 || t.rank() != 2)
    throw DimensionError("film: x rank 3, scale/shift rank 2 required");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (s.dim(0) != B || s.dim(1) != C || t.dim(0) != B || t.dim(1) != C)
    throw DimensionError("film: scale/shift must be [B x C]");
  std::vector<F> out(x.raw().size());
  const F* px = x.data();
  const F* ps = s.data();
  const F* pt = t.data();
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const F sc = F(1) + ps[bi * C + c], sh = pt[bi * C + c];
      const std::size_t base = (static_cast<std::size_t>(bi) * C + c) * L;
      for (int l = 0; l < L; ++l) out[base + l] = px[base + l] * sc + sh;
    }
  return detail::make_op<F>(
      x.shape(), std::move(out), {x, s, t}, [x, s, t, B, C, L](detail::Node<F>& node) mutable {
        const F* px2 = x.data();
        const F* ps2 = s.data();
        for (int bi = 0; bi < B; ++bi)
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(bi) * C + c) * L;
            if (x.requires_grad()) {
              F* gx = x.raw_grad().data();
              const F sc = F(1) + ps2[bi * C + c];
              for (int l = 0; l < L; ++l) gx[base + l] += node.grad[base + l] * sc;
            }
            if (s.requires_grad()) {
              F acc = F(0);
              for (int l = 0; l < L; ++l) acc += node.grad[base + l] * px2[base + l];
              s.raw_grad()[static_cast<std::size_t>(bi) * C + c] += acc;
            }
            if (t.requires_grad()) {
              F acc = F(0);
              for (int l = 0; l < L; ++l) acc += node.grad[base + l];
              t.raw_grad()[static_cast<std::size_t>(bi) * C + c] += acc;
            }
          }
      });
}

}  // namespace rise
