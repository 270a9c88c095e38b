// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/substrate/parameters.hpp"

namespace trialign {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.005;
};

/// Adam with decoupled weight decay. Frozen parameters are left untouched,
/// including their moment estimates.
template <class T>
class AdamW {
 public:
  AdamW(ParameterSet<T>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (auto& p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

  void step(double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    std::size_t idx = 0;
    for (auto& p : *params_) {
      auto& m = m_[idx];
      auto& v = v_[idx];
      ++idx;
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        const double mi = b1 * double(m[i]) + (1 - b1) * g;
        const double vi = b2 * double(v[i]) + (1 - b2) * g * g;
        m[i] = T(mi);
        v[i] = T(vi);
        const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps) + cfg_.weight_decay * double(p->value[i]);
        p->value[i] = T(double(p->value[i]) - lr * update);
      }
    }
  }

 private:
  ParameterSet<T>* params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay towards 0
/// at `total_steps`. `step` is the zero-based index of the update.
inline double warmup_cosine_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double peak) {
  if (total_steps == 0) throw InvalidArgument("schedule: total_steps must be > 0");
  if (step < warmup_steps) return peak * double(step + 1) / double(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  const double progress = std::min(1.0, double(step - warmup_steps) / double(total_steps - warmup_steps));
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace trialign
