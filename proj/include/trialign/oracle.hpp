// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reference evaluations of the training objectives: plain nested loops over
// rows, float64 throughout, no shared code with the graph implementation.

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/losses.hpp"
#include "trialign/substrate/tensor.hpp"

namespace trialign::oracle {

inline constexpr std::size_t kMaxBatch = 16;

inline double dot(const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
  double s = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(j, k);
  return s;
}

inline bool has(const std::vector<std::uint8_t>& present, std::size_t i) { return present.empty() || present[i]; }

inline void check_batch(std::size_t b) {
  require(b >= 1 && b <= kMaxBatch, "oracle: batch size must be in [1, 16]");
}

/// sum_i sum_p -log( e^{s(a_i,P_p^i)/tau} / (e^{s(a_i,P_p^i)/tau} + Z_i) )
inline double exclusive_nce(const Tensor<double>& anchor, const std::array<const Tensor<double>*, 3>& pos, double tau,
                            const std::array<std::vector<std::uint8_t>, 3>& present = {}) {
  const std::size_t b = anchor.rows();
  check_batch(b);
  double loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      for (std::size_t q = 0; q < 3; ++q)
        if (has(present[q], j)) z += std::exp(dot(anchor, i, *pos[q], j) / tau);
    }
    for (std::size_t p = 0; p < 3; ++p) {
      if (!has(present[p], i)) continue;
      const double e = std::exp(dot(anchor, i, *pos[p], i) / tau);
      loss += -std::log(e / (e + z));
    }
  }
  return loss;
}

/// sum_q sum_i -log( e^{s(Q_q^i, V^i)/tau} / sum_j e^{s(Q_q^i, V^j)/tau} )
inline double reverse(const Tensor<double>& targets, const std::array<const Tensor<double>*, 3>& queries, double tau,
                      const std::array<std::vector<std::uint8_t>, 3>& present = {}) {
  const std::size_t b = targets.rows();
  check_batch(b);
  double loss = 0;
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t i = 0; i < b; ++i) {
      if (!has(present[q], i)) continue;
      double denom = 0;
      for (std::size_t j = 0; j < b; ++j) denom += std::exp(dot(*queries[q], i, targets, j) / tau);
      loss += -std::log(std::exp(dot(*queries[q], i, targets, i) / tau) / denom);
    }
  return loss;
}

inline double rank(const std::vector<double>& s_pos, const std::vector<double>& s_tm, const std::vector<double>& s_vm, double tau,
                   double margin, const std::vector<std::uint8_t>& tm_present = {}) {
  const std::size_t b = s_pos.size();
  check_batch(b);
  double loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (has(tm_present, i)) loss += std::max(0.0, -(s_pos[i] - s_tm[i]) / tau + margin);
    loss += std::max(0.0, -(s_pos[i] - s_vm[i]) / tau + margin);
  }
  return loss / double(b);
}

inline double focal(const Tensor<double>& logits, const std::vector<std::size_t>& targets, double gamma, bool printed_form = false) {
  const std::size_t n = logits.rows(), v = logits.cols();
  if (n == 0) return 0.0;
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t k = 0; k < v; ++k) denom += std::exp(logits.at(i, k));
    const double p = std::exp(logits.at(i, targets[i])) / denom;
    const double w = std::pow(1.0 - p, gamma);
    loss += printed_form ? -w * p : w * -std::log(p);
  }
  return loss / double(n);
}

struct TmaParts {
  double l_v, l_v_prime, l_t, l_t_prime;
  double total() const { return l_v + l_v_prime + l_t + l_t_prime; }
};

inline TmaParts tma(const EmbeddingBatch<double>& b, double tau) {
  const auto& tm = b.masked_text_present;
  using P = std::vector<std::uint8_t>;
  return {exclusive_nce(b.v_e, {&b.t_e, &b.t_m, &b.m_vmf}, tau, {P{}, tm, P{}}),
          reverse(b.v_e, {&b.t_e, &b.t_m, &b.m_vmf}, tau, {P{}, tm, P{}}),
          exclusive_nce(b.t_e, {&b.v_e, &b.v_m, &b.m_tmf}, tau, {P{}, P{}, tm}),
          reverse(b.t_e, {&b.v_e, &b.v_m, &b.m_tmf}, tau, {P{}, P{}, tm})};
}

/// Pairwise similarities s(V_e^i, T_e^i), s(V_e^i, T_m^i), s(V_m^i, T_e^i).
inline double rank_for_batch(const EmbeddingBatch<double>& b, double tau, double margin) {
  std::vector<double> pos, tm, vm;
  for (std::size_t i = 0; i < b.size(); ++i) {
    pos.push_back(dot(b.v_e, i, b.t_e, i));
    tm.push_back(dot(b.v_e, i, b.t_m, i));
    vm.push_back(dot(b.v_m, i, b.t_e, i));
  }
  return rank(pos, tm, vm, tau, margin, b.masked_text_present);
}

}  // namespace trialign::oracle
