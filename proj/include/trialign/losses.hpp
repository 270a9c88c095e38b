// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/logging.hpp"
#include "trialign/substrate/graph.hpp"

namespace trialign {

struct LossHyper {
  double tau = 0.05;    // temperature
  double margin = 5.0;  // ranking margin, in temperature-scaled units
  double gamma = 2.0;   // focal exponent
  /// Use -(1-p)^gamma * p for the masked-token loss instead of the focal
  /// form (1-p)^gamma * (-log p).
  bool printed_mlm_form = false;

  void validate() const {
    if (!(tau > 0)) throw InvalidArgument("loss.tau must be > 0, got " + std::to_string(tau));
    if (!(margin >= 0)) throw InvalidArgument("loss.margin must be >= 0, got " + std::to_string(margin));
    if (!(gamma >= 0)) throw InvalidArgument("loss.gamma must be >= 0, got " + std::to_string(gamma));
  }
};

struct LossBreakdown {
  double l_v = 0, l_v_prime = 0, l_t = 0, l_t_prime = 0;
  double l_tma = 0, l_rank = 0, l_mlm = 0, l_infonce = 0;
  double total = 0;
};

/// Row presence flags; empty means every row is present.
using RowPresence = std::vector<std::uint8_t>;

inline bool row_present(const RowPresence& p, std::size_t i) { return p.empty() || p[i] != 0; }

/// Pooled embeddings of one batch. Row i of every field belongs to sample i.
/// `masked_text_present[i] == 0` marks samples without a masked text (no
/// eligible tokens); their t_m and m_tmf rows are ignored by every loss.
template <class T>
struct EmbeddingBatch {
  Tensor<T> v_e, t_e, t_m, v_m, m_vmf, m_tmf;
  RowPresence masked_text_present;

  std::size_t size() const { return v_e.rows(); }
};

template <class T>
struct BatchVars {
  Var v_e, t_e, t_m, v_m, m_vmf, m_tmf;
  RowPresence masked_text_present;
};

namespace detail {

template <class T>
constexpr T unit_tolerance() {
  return std::is_same_v<T, double> ? T(1e-6) : T(1e-5);
}

template <class T>
void check_unit_rows(const Tensor<T>& x, const char* name) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T s = 0;
    for (T v : x.row_span(i)) s += v * v;
    if (std::abs(std::sqrt(s) - T(1)) > unit_tolerance<T>())
      throw InvalidArgument(std::string(name) + ": row " + std::to_string(i) + " has norm " + std::to_string(double(std::sqrt(s))) + ", expected 1");
  }
}

template <class T>
void check_tau(T tau) {
  if (!(tau > T(0))) throw InvalidArgument("temperature must be > 0, got " + std::to_string(double(tau)));
}

/// sum over columns: [r x n] -> [r x 1]
template <class T>
Var row_sums(Graph<T>& g, Var a) {
  return g.matmul(a, g.constant(Tensor<T>::matrix(g.cols(a), 1, T(1))));
}

}  // namespace detail

/// s(a_i, b_i) for every row: [B x 1].
template <class T>
Var paired_similarity(Graph<T>& g, Var a, Var b) {
  return detail::row_sums(g, g.mul(a, b));
}

/// Per-anchor, per-family exclusive-NCE terms [B x 3]:
///   term(i, p) = -log( e^{s(a_i, P_p^i)/tau} / (e^{s(a_i, P_p^i)/tau} + Z_i) )
///   Z_i = sum_{j != i} sum_q e^{s(a_i, P_q^j)/tau}
/// Same-index positives of the other two families never enter the
/// denominator. Absent rows (per `present[q]`) are dropped from every Z_i;
/// the term of an absent positive is computed but carries no weight.
template <class T>
Var exclusive_nce_terms(Graph<T>& g, Var anchor, const std::array<Var, 3>& positives, T tau,
                        const std::array<RowPresence, 3>& present = {}) {
  detail::check_tau(tau);
  const std::size_t b = g.rows(anchor);
  std::array<Var, 3> sims;
  for (std::size_t q = 0; q < 3; ++q) {
    if (g.rows(positives[q]) != b || g.cols(positives[q]) != g.cols(anchor)) throw ShapeError("exclusive_nce: positive family shape mismatch");
    sims[q] = g.scale(g.matmul_nt(anchor, positives[q]), T(1) / tau);
  }
  Var all = g.concat_cols({sims[0], sims[1], sims[2]});
  std::vector<Var> terms;
  for (std::size_t p = 0; p < 3; ++p) {
    std::vector<std::uint8_t> mask(b * 3 * b, 0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t q = 0; q < 3; ++q)
        for (std::size_t j = 0; j < b; ++j) {
          const bool keep = j == i ? q == p : row_present(present[q], j);
          mask[i * 3 * b + q * b + j] = keep;
        }
    terms.push_back(g.sub(g.masked_logsumexp_rows(all, std::move(mask)), g.diag(sims[p])));
  }
  return g.concat_cols(terms);
}

/// Exclusive-NCE summed over anchors and the three positive families.
template <class T>
Var exclusive_nce(Graph<T>& g, Var anchor, const std::array<Var, 3>& positives, T tau, const std::array<RowPresence, 3>& present = {}) {
  Var terms = exclusive_nce_terms(g, anchor, positives, tau, present);
  const std::size_t b = g.rows(anchor);
  std::vector<T> w(b * 3);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t p = 0; p < 3; ++p) w[i * 3 + p] = row_present(present[p], i) ? T(1) : T(0);
  return g.weighted_sum(terms, std::move(w));
}

/// Standard NCE from each query family back to the targets:
///   sum_q sum_i -log( e^{s(Q_q^i, V^i)/tau} / sum_j e^{s(Q_q^i, V^j)/tau} )
template <class T>
Var reverse_alignment(Graph<T>& g, Var targets, const std::array<Var, 3>& queries, T tau, const std::array<RowPresence, 3>& present = {}) {
  detail::check_tau(tau);
  const std::size_t b = g.rows(targets);
  std::vector<Var> terms;
  for (std::size_t q = 0; q < 3; ++q) {
    if (g.rows(queries[q]) != b || g.cols(queries[q]) != g.cols(targets)) throw ShapeError("reverse_alignment: query family shape mismatch");
    Var s = g.scale(g.matmul_nt(queries[q], targets), T(1) / tau);
    terms.push_back(g.sub(g.masked_logsumexp_rows(s, std::vector<std::uint8_t>(b * b, 1)), g.diag(s)));
  }
  std::vector<T> w(b * 3);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t q = 0; q < 3; ++q) w[i * 3 + q] = row_present(present[q], i) ? T(1) : T(0);
  return g.weighted_sum(g.concat_cols(terms), std::move(w));
}

struct TmaVars {
  Var l_v, l_v_prime, l_t, l_t_prime, total;
};

/// Video side: anchor v_e with positives (t_e, t_m, m_vmf).
/// Text side: anchor t_e with positives (v_e, v_m, m_tmf).
template <class T>
TmaVars tma_total(Graph<T>& g, const BatchVars<T>& b, T tau) {
  const RowPresence& tm = b.masked_text_present;
  TmaVars out;
  out.l_v = exclusive_nce(g, b.v_e, {b.t_e, b.t_m, b.m_vmf}, tau, {RowPresence{}, tm, RowPresence{}});
  out.l_v_prime = reverse_alignment(g, b.v_e, {b.t_e, b.t_m, b.m_vmf}, tau, {RowPresence{}, tm, RowPresence{}});
  out.l_t = exclusive_nce(g, b.t_e, {b.v_e, b.v_m, b.m_tmf}, tau, {RowPresence{}, RowPresence{}, tm});
  out.l_t_prime = reverse_alignment(g, b.t_e, {b.v_e, b.v_m, b.m_tmf}, tau, {RowPresence{}, RowPresence{}, tm});
  out.total = g.add(g.add(out.l_v, out.l_v_prime), g.add(out.l_t, out.l_t_prime));
  return out;
}

/// Batch mean of max(0, -(s_pos - s_tm)/tau + margin) + max(0, -(s_pos - s_vm)/tau + margin).
/// Inputs are [B x 1] similarity columns; rows without a masked text skip the
/// s_tm hinge.
template <class T>
Var ranking_loss(Graph<T>& g, Var s_pos, Var s_tm, Var s_vm, T tau, T margin, const RowPresence& tm_present = {}) {
  detail::check_tau(tau);
  const std::size_t b = g.rows(s_pos);
  auto hinge = [&](Var other) { return g.relu(g.add_scalar(g.scale(g.sub(s_pos, other), T(-1) / tau), margin)); };
  std::vector<T> w(b);
  for (std::size_t i = 0; i < b; ++i) w[i] = row_present(tm_present, i) ? T(1) / T(b) : T(0);
  Var first = g.weighted_sum(hinge(s_tm), std::move(w));
  Var second = g.weighted_sum(hinge(s_vm), std::vector<T>(b, T(1) / T(b)));
  return g.add(first, second);
}

/// Mean over masked positions of (1-p)^gamma * (-log p), p the softmax
/// probability of the target. With `printed_form` the term is -(1-p)^gamma * p.
/// Zero positions contribute 0 and log a warning.
template <class T>
Var focal_mlm(Graph<T>& g, Var logits, const std::vector<std::size_t>& targets, T gamma, bool printed_form = false) {
  if (!(gamma >= T(0))) throw InvalidArgument("focal exponent must be >= 0");
  const std::size_t n = g.rows(logits), v = g.cols(logits);
  if (targets.size() != n) throw ShapeError("focal_mlm: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  if (n == 0) {
    log_warning("focal_mlm: no masked positions; contributing 0");
    return g.constant(Tensor<T>::scalar(T(0)));
  }
  for (std::size_t t : targets)
    if (t >= v) throw InvalidArgument("focal_mlm: target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
  const auto& z = g.value(logits);
  auto logp = std::make_shared<std::vector<T>>(n * v);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T mx = z[i * v];
    for (std::size_t k = 1; k < v; ++k) mx = std::max(mx, z[i * v + k]);
    T s = 0;
    for (std::size_t k = 0; k < v; ++k) s += std::exp(z[i * v + k] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t k = 0; k < v; ++k) (*logp)[i * v + k] = z[i * v + k] - lse;
    const T lp = (*logp)[i * v + targets[i]];
    const T p = std::exp(lp);
    const T one_minus = -std::expm1(lp);
    const T weight = gamma == T(0) ? T(1) : std::pow(one_minus, gamma);
    total += printed_form ? -weight * p : weight * -lp;
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  return g.make(std::move(out), g.needs_grad(logits), [&g, logits, targets, gamma, printed_form, n, v, logp](Var self) {
    const T go = g.grad_mut(self)[0] / T(n);
    auto& gz = g.grad_mut(logits);
    for (std::size_t i = 0; i < n; ++i) {
      const T lp = (*logp)[i * v + targets[i]];
      const T p = std::exp(lp);
      const T q = -std::expm1(lp);
      // d(term)/dp * p
      T dterm_dp_times_p;
      if (printed_form) {
        const T w = gamma == T(0) ? T(1) : std::pow(q, gamma);
        const T dw = gamma == T(0) ? T(0) : (q > T(0) ? gamma * std::pow(q, gamma - T(1)) : (gamma == T(1) ? T(1) : T(0)));
        dterm_dp_times_p = (dw * p - w) * p;
      } else {
        const T w = gamma == T(0) ? T(1) : std::pow(q, gamma);
        // d/dp [(1-p)^g * (-log p)] * p = -g (1-p)^(g-1) p (-log p) - (1-p)^g
        T first = T(0);
        if (gamma != T(0) && q > T(0)) first = -gamma * std::pow(q, gamma - T(1)) * p * -lp;
        dterm_dp_times_p = first - w;
      }
      for (std::size_t k = 0; k < v; ++k) {
        const T pk = std::exp((*logp)[i * v + k]);
        const T dpk = (k == targets[i] ? T(1) : T(0)) - pk;
        gz[i * v + k] += go * dterm_dp_times_p * dpk;
      }
    }
  });
}

/// Symmetric InfoNCE over paired rows of `video` and `text`, batch-summed.
template <class T>
Var symmetric_infonce(Graph<T>& g, Var video, Var text, T tau) {
  detail::check_tau(tau);
  const std::size_t b = g.rows(video);
  auto direction = [&](Var queries, Var keys) {
    Var s = g.scale(g.matmul_nt(queries, keys), T(1) / tau);
    return g.sum(g.sub(g.masked_logsumexp_rows(s, std::vector<std::uint8_t>(b * b, 1)), g.diag(s)));
  };
  return g.add(direction(text, video), direction(video, text));
}

/// Unweighted sum of the objective parts; every part must be finite.
inline double total_loss(double l_tma, double l_rank, double l_mlm) {
  const std::pair<const char*, double> parts[] = {{"L_TmA", l_tma}, {"L_rank", l_rank}, {"L_mlm", l_mlm}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericalError(std::string("total_loss: ") + name + " is not finite");
  return l_tma + l_rank + l_mlm;
}

// ---- value-level entry points ---------------------------------------------

template <class T>
T exclusive_nce_anchor(const Tensor<T>& anchor, const std::array<Tensor<T>, 3>& positives, T tau) {
  detail::check_tau(tau);
  detail::check_unit_rows(anchor, "anchor");
  for (const auto& p : positives) detail::check_unit_rows(p, "positive");
  Graph<T> g(false);
  return g.item(exclusive_nce(g, g.constant(anchor), {g.constant(positives[0]), g.constant(positives[1]), g.constant(positives[2])}, tau));
}

template <class T>
T reverse_alignment(const Tensor<T>& targets, const std::array<Tensor<T>, 3>& queries, T tau) {
  detail::check_tau(tau);
  detail::check_unit_rows(targets, "target");
  for (const auto& q : queries) detail::check_unit_rows(q, "query");
  Graph<T> g(false);
  return g.item(reverse_alignment(g, g.constant(targets), {g.constant(queries[0]), g.constant(queries[1]), g.constant(queries[2])}, tau));
}

template <class T>
BatchVars<T> bind_batch(Graph<T>& g, const EmbeddingBatch<T>& b, bool as_inputs = false) {
  auto bind = [&](const Tensor<T>& t) { return as_inputs ? g.input(t) : g.constant(t); };
  return {bind(b.v_e), bind(b.t_e), bind(b.t_m), bind(b.v_m), bind(b.m_vmf), bind(b.m_tmf), b.masked_text_present};
}

template <class T>
void validate_batch(const EmbeddingBatch<T>& b) {
  const std::size_t n = b.v_e.rows(), d = b.v_e.cols();
  if (n == 0) throw InvalidArgument("embedding batch is empty");
  const std::pair<const char*, const Tensor<T>*> fields[] = {{"V_e", &b.v_e}, {"T_e", &b.t_e}, {"T_m", &b.t_m},
                                                             {"V_m", &b.v_m}, {"M_Vmf", &b.m_vmf}, {"M_Tmf", &b.m_tmf}};
  for (const auto& [name, t] : fields) {
    if (t->rows() != n || t->cols() != d) throw ShapeError(std::string("embedding batch field ") + name + " has shape " + shape_str(t->shape()));
    detail::check_unit_rows(*t, name);
  }
  if (!b.masked_text_present.empty() && b.masked_text_present.size() != n) throw ShapeError("masked_text_present length mismatch");
}

/// (L_v, L_v', L_t, L_t', L_TmA) for a batch of plain tensors.
template <class T>
LossBreakdown tma_total(const EmbeddingBatch<T>& batch, T tau) {
  validate_batch(batch);
  detail::check_tau(tau);
  Graph<T> g(false);
  auto tma = tma_total(g, bind_batch(g, batch), tau);
  LossBreakdown out;
  out.l_v = g.item(tma.l_v);
  out.l_v_prime = g.item(tma.l_v_prime);
  out.l_t = g.item(tma.l_t);
  out.l_t_prime = g.item(tma.l_t_prime);
  out.l_tma = g.item(tma.total);
  return out;
}

template <class T>
T ranking_loss(const std::vector<T>& s_pos, const std::vector<T>& s_tm, const std::vector<T>& s_vm, T tau, T margin) {
  detail::check_tau(tau);
  if (s_pos.size() != s_tm.size() || s_pos.size() != s_vm.size() || s_pos.empty()) throw ShapeError("ranking_loss: similarity vectors differ in length");
  Graph<T> g(false);
  auto col = [&](const std::vector<T>& v) { return g.constant(Tensor<T>({v.size(), 1}, v)); };
  return g.item(ranking_loss(g, col(s_pos), col(s_tm), col(s_vm), tau, margin));
}

template <class T>
T focal_mlm(const Tensor<T>& logits, const std::vector<std::size_t>& targets, T gamma, bool printed_form = false) {
  Graph<T> g(false);
  return g.item(focal_mlm(g, g.constant(logits), targets, gamma, printed_form));
}

}  // namespace trialign
