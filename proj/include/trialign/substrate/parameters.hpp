// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "trialign/substrate/rng.hpp"
#include "trialign/substrate/tensor.hpp"

namespace trialign {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Named parameters in registration order. Addresses are stable for the
/// lifetime of the set, so layers keep raw references.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return add(name, std::move(t));
  }

  Parameter<T>& add_constant(const std::string& name, Shape shape, T fill) {
    return add(name, Tensor<T>(std::move(shape), fill));
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->get(name);
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

  /// Marks parameters whose name starts with any of `prefixes` trainable; all others frozen.
  void set_trainable_prefixes(const std::vector<std::string>& prefixes) {
    for (auto& p : params_) {
      p->trainable = false;
      for (const auto& prefix : prefixes)
        if (p->name.rfind(prefix, 0) == 0) p->trainable = true;
    }
  }

  void set_all_trainable() {
    for (auto& p : params_) p->trainable = true;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace trialign
