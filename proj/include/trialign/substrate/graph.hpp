// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "trialign/substrate/kernels.hpp"
#include "trialign/substrate/parameters.hpp"
#include "trialign/substrate/tensor.hpp"

namespace trialign {

/// Handle to a node in a Graph.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

/// Reverse-mode tape over dense matrices.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for backpropagation. A graph built with
/// `track_gradients = false` records values only.
template <class T>
class Graph {
 public:
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }

  // ---- leaves ------------------------------------------------------------

  Var constant(Tensor<T> value) { return make(std::move(value), false, nullptr); }

  /// Leaf whose gradient is collected by backward().
  Var input(Tensor<T> value) { return make(std::move(value), track_, nullptr); }

  /// Leaf bound to a model parameter; gradients accumulate into `p.grad`.
  Var param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Node node;
    node.external = &p.value;
    node.needs_grad = track_ && p.trainable;
    if (node.needs_grad) {
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      node.external_grad = &p.grad;
    }
    nodes_.push_back(std::move(node));
    Var v{static_cast<std::uint32_t>(nodes_.size() - 1)};
    param_nodes_[&p] = v;
    return v;
  }

  // ---- accessors ---------------------------------------------------------

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  T item(Var v) const { return value(v).item(); }
  std::size_t rows(Var v) const { return value(v).rows(); }
  std::size_t cols(Var v) const { return value(v).cols(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Gradient buffer of `v`, zero-initialised on first access.
  Tensor<T>& grad_mut(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.external_grad) return *n.external_grad;
    if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  /// Gradient collected by the last backward(); zeros if none reached `v`.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.external_grad) return *n.external_grad;
    if (n.grad.shape() == value(v).shape()) return n.grad;
    return Tensor<T>(value(v).shape());
  }

  /// Registers a node computed outside the built-in op set. `backward` reads
  /// grad_mut(result) and accumulates into the inputs' grad_mut().
  Var make(Tensor<T> value, bool needs_grad, std::function<void(Var)> backward) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = track_ && needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void backward(Var root) {
    if (value(root).size() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(value(root).shape()));
    if (!nodes_[root.id].needs_grad) return;
    grad_mut(root)[0] += T(1);
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !n.backward) continue;
      if (n.grad.shape() != n.value.shape()) continue;  // unreached
      n.backward(Var{id});
    }
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor<T> out = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make(std::move(out), any(a, b), [this, a, b](Var self) {
      const auto& g = grad_mut(self);
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) { return add(a, scale(b, T(-1))); }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor<T> out = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make(std::move(out), any(a, b), [this, a, b](Var self) {
      const Tensor<T> g = grad_mut(self);
      if (needs_grad(a)) {
        auto& ga = grad_mut(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (needs_grad(b)) {
        auto& gb = grad_mut(b);
        const auto& av = value(a);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v *= c;
    return make(std::move(out), needs_grad(a), [this, a, c](Var self) {
      const auto& g = grad_mut(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }

  Var add_scalar(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v += c;
    return make(std::move(out), needs_grad(a), [this, a](Var self) { accumulate(a, grad_mut(self)); });
  }

  /// a[r x n] + bias[1 x n] broadcast over rows.
  Var add_row(Var a, Var bias) {
    const std::size_t r = rows(a), n = cols(a);
    if (value(bias).size() != n) throw ShapeError("add_row: bias length " + std::to_string(value(bias).size()) + " != " + std::to_string(n));
    Tensor<T> out = value(a);
    const auto& bv = value(bias);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
    return make(std::move(out), any(a, bias), [this, a, bias, r, n](Var self) {
      const auto& g = grad_mut(self);
      accumulate(a, g);
      if (needs_grad(bias)) {
        auto& gb = grad_mut(bias);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }

  Var exp(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = std::exp(v);
    return make(std::move(out), needs_grad(a), [this, a](Var self) {
      const auto& g = grad_mut(self);
      const auto& y = value(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }

  Var log(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = std::log(v);
    return make(std::move(out), needs_grad(a), [this, a](Var self) {
      const auto& g = grad_mut(self);
      const auto& x = value(a);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
  }

  /// max(0, x)
  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return make(std::move(out), needs_grad(a), [this, a](Var self) {
      const auto& g = grad_mut(self);
      const auto& x = value(a);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) ga[i] += g[i];
    });
  }

  /// Exact (erf) GELU.
  Var gelu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
    return make(std::move(out), needs_grad(a), [this, a](Var self) {
      const auto& g = grad_mut(self);
      const auto& x = value(a);
      auto& ga = grad_mut(a);
      const T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(std::numbers::sqrt2 / 2)));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        ga[i] += g[i] * (cdf + x[i] * pdf);
      }
    });
  }

  // ---- matrix products ---------------------------------------------------

  /// a[m x k] * b[k x n]
  Var matmul(Var a, Var b) {
    const std::size_t m = rows(a), k = cols(a), n = cols(b);
    if (rows(b) != k) throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " vs " + std::to_string(rows(b)));
    Tensor<T> out = Tensor<T>::matrix(m, n);
    kernels::gemm_nn(m, n, k, value(a).data(), value(b).data(), out.data(), false);
    return make(std::move(out), any(a, b), [this, a, b, m, n, k](Var self) {
      const auto& g = grad_mut(self);
      if (needs_grad(a)) kernels::gemm_nt(m, k, n, g.data(), value(b).data(), grad_mut(a).data(), true);
      if (needs_grad(b)) kernels::gemm_tn(k, n, m, value(a).data(), g.data(), grad_mut(b).data(), true);
    });
  }

  /// a[m x k] * b[n x k]^T
  Var matmul_nt(Var a, Var b) {
    const std::size_t m = rows(a), k = cols(a), n = rows(b);
    if (cols(b) != k) throw ShapeError("matmul_nt: inner dimensions " + std::to_string(k) + " vs " + std::to_string(cols(b)));
    Tensor<T> out = Tensor<T>::matrix(m, n);
    kernels::gemm_nt(m, n, k, value(a).data(), value(b).data(), out.data(), false);
    return make(std::move(out), any(a, b), [this, a, b, m, n, k](Var self) {
      const auto& g = grad_mut(self);
      if (needs_grad(a)) kernels::gemm_nn(m, k, n, g.data(), value(b).data(), grad_mut(a).data(), true);
      if (needs_grad(b)) kernels::gemm_tn(n, k, m, g.data(), value(a).data(), grad_mut(b).data(), true);
    });
  }

  /// x * W + b, with W [in x out] and b [1 x out].
  Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

  // ---- reductions --------------------------------------------------------

  Var sum(Var a) {
    T s = 0;
    for (T v : value(a).values()) s += v;
    return make(Tensor<T>::scalar(s), needs_grad(a), [this, a](Var self) {
      const T g = grad_mut(self)[0];
      for (auto& v : grad_mut(a).values()) v += g;
    });
  }

  /// sum_i w_i * a_i with constant weights.
  Var weighted_sum(Var a, std::vector<T> weights) {
    if (weights.size() != value(a).size()) throw ShapeError("weighted_sum: weight count mismatch");
    T s = 0;
    const auto& av = value(a);
    for (std::size_t i = 0; i < av.size(); ++i) s += weights[i] * av[i];
    return make(Tensor<T>::scalar(s), needs_grad(a), [this, a, w = std::move(weights)](Var self) {
      const T g = grad_mut(self)[0];
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g * w[i];
    });
  }

  /// Mean over axis 0: [r x n] -> [1 x n].
  Var mean_rows(Var a) {
    const std::size_t r = rows(a), n = cols(a);
    if (r == 0) throw ShapeError("mean_rows: no rows");
    Tensor<T> out = Tensor<T>::matrix(1, n);
    const auto& av = value(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    for (auto& v : out.values()) v /= T(r);
    return make(std::move(out), needs_grad(a), [this, a, r, n](Var self) {
      const auto& g = grad_mut(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] / T(r);
    });
  }

  // ---- row-wise normalizations ------------------------------------------

  Var softmax_rows(Var a) {
    const std::size_t r = rows(a), n = cols(a);
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < r; ++i) {
      T* row = out.data() + i * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    return make(std::move(out), needs_grad(a), [this, a, r, n](Var self) {
      const auto& g = grad_mut(self);
      const auto& y = value(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < r; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }

  Var log_softmax_rows(Var a) {
    const std::size_t r = rows(a), n = cols(a);
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < r; ++i) {
      T* row = out.data() + i * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t j = 0; j < n; ++j) row[j] -= lse;
    }
    return make(std::move(out), needs_grad(a), [this, a, r, n](Var self) {
      const auto& g = grad_mut(self);
      const auto& y = value(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < r; ++i) {
        T gs = 0;
        for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
      }
    });
  }

  /// Row-wise log-sum-exp over the entries where `mask` is nonzero: [r x n] -> [r x 1].
  /// Masked-out entries receive exactly zero gradient.
  Var masked_logsumexp_rows(Var a, std::vector<std::uint8_t> mask) {
    const std::size_t r = rows(a), n = cols(a);
    if (mask.size() != r * n) throw ShapeError("masked_logsumexp_rows: mask size mismatch");
    const auto& av = value(a);
    Tensor<T> out = Tensor<T>::matrix(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (mask[i * n + j]) mx = std::max(mx, av[i * n + j]);
      if (!std::isfinite(mx)) throw NumericalError("masked_logsumexp_rows: row " + std::to_string(i) + " has no finite unmasked entry");
      T s = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (mask[i * n + j]) s += std::exp(av[i * n + j] - mx);
      out[i] = mx + std::log(s);
    }
    return make(std::move(out), needs_grad(a), [this, a, r, n, m = std::move(mask)](Var self) {
      const auto& g = grad_mut(self);
      const auto& y = value(self);
      const auto& av = value(a);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (m[i * n + j]) ga[i * n + j] += g[i] * std::exp(av[i * n + j] - y[i]);
    });
  }

  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const std::size_t r = rows(x), n = cols(x);
    if (value(gain).size() != n || value(bias).size() != n) throw ShapeError("layer_norm: affine size mismatch");
    const auto& xv = value(x);
    const auto& gv = value(gain);
    const auto& bv = value(bias);
    Tensor<T> out = Tensor<T>::matrix(r, n);
    auto xhat = std::make_shared<std::vector<T>>(r * n);
    auto inv_std = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
      T mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += xv[i * n + j];
      mean /= T(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T d = xv[i * n + j] - mean;
        var += d * d;
      }
      var /= T(n);
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[i] = is;
      for (std::size_t j = 0; j < n; ++j) {
        const T h = (xv[i * n + j] - mean) * is;
        (*xhat)[i * n + j] = h;
        out[i * n + j] = h * gv[j] + bv[j];
      }
    }
    const bool ng = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
    return make(std::move(out), ng, [this, x, gain, bias, r, n, xhat, inv_std](Var self) {
      const auto& g = grad_mut(self);
      const auto& gv = value(gain);
      if (needs_grad(gain)) {
        auto& gg = grad_mut(gain);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
      }
      if (needs_grad(bias)) {
        auto& gb = grad_mut(bias);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
      if (needs_grad(x)) {
        auto& gx = grad_mut(x);
        for (std::size_t i = 0; i < r; ++i) {
          T mean_d = 0, mean_dh = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[i * n + j] * gv[j];
            mean_d += d;
            mean_dh += d * (*xhat)[i * n + j];
          }
          mean_d /= T(n);
          mean_dh /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[i * n + j] * gv[j];
            gx[i * n + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * n + j] * mean_dh);
          }
        }
      }
    });
  }

  /// Each row scaled to unit L2 norm.
  Var l2_normalize_rows(Var a) {
    const std::size_t r = rows(a), n = cols(a);
    Tensor<T> out = value(a);
    auto norms = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += out[i * n + j] * out[i * n + j];
      const T nrm = std::sqrt(s);
      if (!(nrm > T(0)) || !std::isfinite(nrm)) throw NumericalError("l2_normalize_rows: row " + std::to_string(i) + " has norm " + std::to_string(double(nrm)));
      (*norms)[i] = nrm;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= nrm;
    }
    return make(std::move(out), needs_grad(a), [this, a, r, n, norms](Var self) {
      const auto& g = grad_mut(self);
      const auto& y = value(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < r; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / (*norms)[i];
      }
    });
  }

  // ---- indexing and layout ----------------------------------------------

  /// Rows of `table` selected by `ids` (embedding lookup when `table` is a parameter).
  Var gather_rows(Var table, std::vector<std::size_t> ids) {
    const std::size_t n = cols(table), r = rows(table);
    Tensor<T> out = Tensor<T>::matrix(ids.size(), n);
    const auto& tv = value(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= r) throw InvalidArgument("gather_rows: index " + std::to_string(ids[i]) + " out of range " + std::to_string(r));
      std::copy_n(tv.data() + ids[i] * n, n, out.data() + i * n);
    }
    return make(std::move(out), needs_grad(table), [this, table, n, idx = std::move(ids)](Var self) {
      const auto& g = grad_mut(self);
      auto& gt = grad_mut(table);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gt[idx[i] * n + j] += g[i * n + j];
    });
  }

  Var embedding(Var table, const std::vector<std::size_t>& ids) { return gather_rows(table, ids); }

  /// Flat element gather: out[1 x k] with out[i] = a.flat[idx[i]].
  Var gather(Var a, std::vector<std::size_t> idx) {
    const auto& av = value(a);
    Tensor<T> out = Tensor<T>::matrix(1, idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= av.size()) throw InvalidArgument("gather: index " + std::to_string(idx[i]) + " out of range " + std::to_string(av.size()));
      out[i] = av[idx[i]];
    }
    return make(std::move(out), needs_grad(a), [this, a, ix = std::move(idx)](Var self) {
      const auto& g = grad_mut(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < ix.size(); ++i) ga[ix[i]] += g[i];
    });
  }

  /// Diagonal of a square matrix as [n x 1].
  Var diag(Var a) {
    const std::size_t n = rows(a);
    if (cols(a) != n) throw ShapeError("diag: matrix is not square");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i * n + i;
    return reshape(gather(a, std::move(idx)), {n, 1});
  }

  Var reshape(Var a, Shape shape) {
    Tensor<T> out = value(a).reshaped(std::move(shape));
    return make(std::move(out), needs_grad(a), [this, a](Var self) { accumulate(a, grad_mut(self)); });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = cols(parts[0]);
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
      if (cols(p) != n) throw ShapeError("concat_rows: column mismatch " + std::to_string(cols(p)) + " vs " + std::to_string(n));
      total += rows(p);
      ng = ng || needs_grad(p);
    }
    Tensor<T> out = Tensor<T>::matrix(total, n);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      std::copy(pv.values().begin(), pv.values().end(), out.data() + off);
      off += pv.size();
    }
    return make(std::move(out), ng, [this, parts](Var self) {
      const auto& g = grad_mut(self);
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t sz = value(p).size();
        if (needs_grad(p)) {
          auto& gp = grad_mut(p);
          for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
        }
        off += sz;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = rows(parts[0]);
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
      if (rows(p) != r) throw ShapeError("concat_cols: row mismatch");
      total += cols(p);
      ng = ng || needs_grad(p);
    }
    Tensor<T> out = Tensor<T>::matrix(r, total);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      const std::size_t c = pv.cols();
      for (std::size_t i = 0; i < r; ++i) std::copy_n(pv.data() + i * c, c, out.data() + i * total + off);
      off += c;
    }
    return make(std::move(out), ng, [this, parts, r, total](Var self) {
      const auto& g = grad_mut(self);
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t c = cols(p);
        if (needs_grad(p)) {
          auto& gp = grad_mut(p);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
        }
        off += c;
      }
    });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    const std::size_t n = cols(a);
    if (begin + count > rows(a)) throw ShapeError("slice_rows: range past end");
    Tensor<T> out = Tensor<T>::matrix(count, n);
    std::copy_n(value(a).data() + begin * n, count * n, out.data());
    return make(std::move(out), needs_grad(a), [this, a, begin, count, n](Var self) {
      const auto& g = grad_mut(self);
      auto& ga = grad_mut(a);
      for (std::size_t i = 0; i < count * n; ++i) ga[begin * n + i] += g[i];
    });
  }

  /// Copy of `a` with the listed rows replaced by `token` [1 x n].
  Var replace_rows(Var a, std::vector<std::size_t> rows_to_replace, Var token) {
    const std::size_t r = rows(a), n = cols(a);
    if (value(token).size() != n) throw ShapeError("replace_rows: token width mismatch");
    std::vector<std::uint8_t> replaced(r, 0);
    for (std::size_t row : rows_to_replace) {
      if (row >= r) throw InvalidArgument("replace_rows: row " + std::to_string(row) + " out of range");
      replaced[row] = 1;
    }
    Tensor<T> out = value(a);
    const auto& tv = value(token);
    for (std::size_t i = 0; i < r; ++i)
      if (replaced[i]) std::copy_n(tv.data(), n, out.data() + i * n);
    return make(std::move(out), any(a, token), [this, a, token, r, n, rep = std::move(replaced)](Var self) {
      const auto& g = grad_mut(self);
      if (needs_grad(a)) {
        auto& ga = grad_mut(a);
        for (std::size_t i = 0; i < r; ++i)
          if (!rep[i])
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j];
      }
      if (needs_grad(token)) {
        auto& gt = grad_mut(token);
        for (std::size_t i = 0; i < r; ++i)
          if (rep[i])
            for (std::size_t j = 0; j < n; ++j) gt[j] += g[i * n + j];
      }
    });
  }

  // ---- attention ---------------------------------------------------------

  /// Multi-head scaled dot-product attention over [t x d] q, k, v.
  /// Keys with key_valid[j] == 0 are excluded from every softmax.
  Var attention(Var q, Var k, Var v, std::size_t heads, std::vector<std::uint8_t> key_valid) {
    const std::size_t t = rows(q), d = cols(q);
    if (rows(k) != t || rows(v) != t || cols(k) != d || cols(v) != d) throw ShapeError("attention: q/k/v shape mismatch");
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (key_valid.size() != t) throw ShapeError("attention: key mask length mismatch");
    const std::size_t dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));
    const auto& qv = value(q);
    const auto& kv = value(k);
    const auto& vv = value(v);
    auto probs = std::make_shared<std::vector<T>>(heads * t * t, T(0));
    Tensor<T> out = Tensor<T>::matrix(t, d);
    std::vector<T> scores(t);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < t; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          if (!key_valid[j]) continue;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + c0 + c] * kv[j * d + c0 + c];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        if (!std::isfinite(mx)) throw NumericalError("attention: scores are not finite or no key is valid");
        T z = 0;
        T* p = probs->data() + (h * t + i) * t;
        for (std::size_t j = 0; j < t; ++j)
          if (key_valid[j]) z += (p[j] = std::exp(scores[j] - mx));
        for (std::size_t j = 0; j < t; ++j)
          if (key_valid[j]) p[j] /= z;
        T* orow = out.data() + i * d + c0;
        for (std::size_t j = 0; j < t; ++j) {
          if (!key_valid[j]) continue;
          const T pj = p[j];
          const T* vrow = vv.data() + j * d + c0;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += pj * vrow[c];
        }
      }
    }
    const bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
    return make(std::move(out), ng, [this, q, k, v, t, d, heads, dh, scale, probs, kvalid = std::move(key_valid)](Var self) {
      const auto& g = grad_mut(self);
      const auto& qv = value(q);
      const auto& kv = value(k);
      const auto& vv = value(v);
      Tensor<T> gq = Tensor<T>::matrix(t, d), gk = Tensor<T>::matrix(t, d), gv = Tensor<T>::matrix(t, d);
      std::vector<T> dp(t);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < t; ++i) {
          const T* p = probs->data() + (h * t + i) * t;
          const T* grow = g.data() + i * d + c0;
          T dot = 0;
          for (std::size_t j = 0; j < t; ++j) {
            if (!kvalid[j]) continue;
            T s = 0;
            const T* vrow = vv.data() + j * d + c0;
            T* gvrow = gv.data() + j * d + c0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += grow[c] * vrow[c];
              gvrow[c] += p[j] * grow[c];
            }
            dp[j] = s;
            dot += s * p[j];
          }
          for (std::size_t j = 0; j < t; ++j) {
            if (!kvalid[j]) continue;
            const T ds = p[j] * (dp[j] - dot) * scale;
            if (ds == T(0)) continue;
            for (std::size_t c = 0; c < dh; ++c) {
              gq[i * d + c0 + c] += ds * kv[j * d + c0 + c];
              gk[j * d + c0 + c] += ds * qv[i * d + c0 + c];
            }
          }
        }
      }
      if (needs_grad(q)) accumulate(q, gq);
      if (needs_grad(k)) accumulate(k, gk);
      if (needs_grad(v)) accumulate(v, gv);
    });
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* external_grad = nullptr;
    bool needs_grad = false;
    std::function<void(Var)> backward;
  };

  bool any(Var a, Var b) const { return needs_grad(a) || needs_grad(b); }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).shape() != value(b).shape())
      throw ShapeError(std::string(op) + ": shape " + shape_str(value(a).shape()) + " vs " + shape_str(value(b).shape()));
  }

  void accumulate(Var target, const Tensor<T>& g) {
    if (!needs_grad(target)) return;
    auto& gt = grad_mut(target);
    for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
  }

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> param_nodes_;
};

}  // namespace trialign
