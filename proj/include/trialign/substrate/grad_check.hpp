// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "trialign/substrate/graph.hpp"

namespace trialign {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_name;  // parameter name, for parameter checks
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

namespace detail {

inline void note(GradCheckResult& r, double analytic, double numeric, std::size_t index, const std::string& name) {
  const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
  ++r.coordinates;
  if (r.coordinates == 1 || err > r.max_rel_error) {
    r.max_rel_error = err;
    r.worst_index = index;
    r.worst_name = name;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

inline double finite_or_throw(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value at " + where);
  return v;
}

}  // namespace detail

/// Scalar function of one input, expressed on a graph.
using GraphFn = std::function<Var(Graph<double>&, Var)>;

/// Compares the reverse-mode gradient of `fn` at `point` with central
/// differences of step `h`. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|); the maximum is reported.
inline GradCheckResult grad_check(const GraphFn& fn, const Tensor<double>& point, double h = 1e-5) {
  Tensor<double> analytic;
  {
    Graph<double> g;
    Var x = g.input(point);
    Var y = fn(g, x);
    detail::finite_or_throw(g.item(y), "the base point");
    g.backward(y);
    analytic = g.grad(x);
  }
  auto eval = [&](const Tensor<double>& p) {
    Graph<double> g(false);
    return g.item(fn(g, g.input(p)));
  };
  GradCheckResult result;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = detail::finite_or_throw(eval(probe), "coordinate " + std::to_string(i) + " (+h)");
    probe[i] = orig - h;
    const double fm = detail::finite_or_throw(eval(probe), "coordinate " + std::to_string(i) + " (-h)");
    probe[i] = orig;
    detail::note(result, analytic[i], (fp - fm) / (2 * h), i, "");
  }
  return result;
}

/// Same check against every trainable parameter coordinate of `params`.
/// `fn` builds the scalar objective on a fresh graph from the current values.
/// `stride` > 1 samples every stride-th coordinate of each parameter.
inline GradCheckResult grad_check_parameters(ParameterSet<double>& params, const std::function<Var(Graph<double>&)>& fn,
                                             double h = 1e-5, std::size_t stride = 1) {
  params.zero_grad();
  {
    Graph<double> g;
    Var y = fn(g);
    detail::finite_or_throw(g.item(y), "the base point");
    g.backward(y);
  }
  auto eval = [&]() {
    Graph<double> g(false);
    return g.item(fn(g));
  };
  GradCheckResult result;
  for (auto& p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); i += std::max<std::size_t>(1, stride)) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = detail::finite_or_throw(eval(), p->name + "[" + std::to_string(i) + "] (+h)");
      p->value[i] = orig - h;
      const double fm = detail::finite_or_throw(eval(), p->name + "[" + std::to_string(i) + "] (-h)");
      p->value[i] = orig;
      detail::note(result, p->grad[i], (fp - fm) / (2 * h), i, p->name);
    }
  }
  return result;
}

}  // namespace trialign
