// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Self-check suites shared by the `grad-check` and `oracle-check` commands
// and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "trialign/losses.hpp"
#include "trialign/oracle.hpp"
#include "trialign/substrate/grad_check.hpp"
#include "trialign/training.hpp"

namespace trialign::checks {

struct CheckRow {
  std::string name;
  double value = 0;      // max relative error (gradients) or max absolute deviation (oracles)
  double tolerance = 0;
  std::string detail;    // worst coordinate, when known
  bool pass() const { return std::isfinite(value) && value <= tolerance; }
};

inline bool all_pass(const std::vector<CheckRow>& rows) {
  return std::all_of(rows.begin(), rows.end(), [](const CheckRow& r) { return r.pass(); });
}

inline Tensor<double> random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<double> t = Tensor<double>::matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0;
    for (auto& v : t.row_span(i)) {
      v = rng.normal();
      s += v * v;
    }
    for (auto& v : t.row_span(i)) v /= std::sqrt(s);
  }
  return t;
}

inline EmbeddingBatch<double> random_embeddings(std::size_t b, std::size_t d, Rng& rng, bool with_absent) {
  EmbeddingBatch<double> e{random_unit_rows(b, d, rng), random_unit_rows(b, d, rng), random_unit_rows(b, d, rng),
                           random_unit_rows(b, d, rng), random_unit_rows(b, d, rng), random_unit_rows(b, d, rng), {}};
  if (with_absent) {
    e.masked_text_present.assign(b, 1);
    e.masked_text_present[rng.below(b)] = 0;
  }
  return e;
}

/// The six embedding fields stacked into one [6B x D] matrix, in the order
/// V_e, T_e, T_m, V_m, M_Vmf, M_Tmf.
inline Tensor<double> stack_fields(const EmbeddingBatch<double>& b) {
  const std::size_t n = b.size(), d = b.v_e.cols();
  Tensor<double> out = Tensor<double>::matrix(6 * n, d);
  const Tensor<double>* fields[] = {&b.v_e, &b.t_e, &b.t_m, &b.v_m, &b.m_vmf, &b.m_tmf};
  for (std::size_t f = 0; f < 6; ++f)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) out.at(f * n + i, k) = fields[f]->at(i, k);
  return out;
}

inline BatchVars<double> unstack_fields(Graph<double>& g, Var x, std::size_t n, RowPresence present = {}) {
  return {g.slice_rows(x, 0, n), g.slice_rows(x, n, n), g.slice_rows(x, 2 * n, n), g.slice_rows(x, 3 * n, n),
          g.slice_rows(x, 4 * n, n), g.slice_rows(x, 5 * n, n), std::move(present)};
}

inline CheckRow gradient_row(const std::string& name, const GradCheckResult& r, double tol) {
  std::string detail = r.worst_name.empty() ? "coordinate " + std::to_string(r.worst_index)
                                            : r.worst_name + "[" + std::to_string(r.worst_index) + "]";
  return {name, r.max_rel_error, tol, detail};
}

// ---- gradients of the losses w.r.t. their embedding inputs ------------------------

inline std::vector<CheckRow> loss_gradients(double tol = 1e-4) {
  constexpr double kTau = 0.05;
  std::vector<CheckRow> rows;
  for (bool absent : {false, true}) {
    Rng rng(0x6C05, absent);
    const auto batch = random_embeddings(4, 6, rng, absent);
    const RowPresence present = batch.masked_text_present;
    const std::string suffix = absent ? " (absent T_m row)" : "";
    const std::vector<std::pair<std::string, std::function<Var(Graph<double>&, const BatchVars<double>&)>>> terms = {
        {"L_v", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_v; }},
        {"L_v'", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_v_prime; }},
        {"L_t", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_t; }},
        {"L_t'", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_t_prime; }},
        {"L_infonce", [](Graph<double>& g, const BatchVars<double>& b) { return symmetric_infonce(g, b.v_e, b.t_e, kTau); }},
    };
    for (const auto& [name, fn] : terms)
      rows.push_back(gradient_row(name + suffix,
                                  grad_check([&, fn = fn](Graph<double>& g, Var x) { return fn(g, unstack_fields(g, x, 4, present)); },
                                             stack_fields(batch)),
                                  tol));
  }
  {
    // margin * tau exceeds every gap, so both hinges stay active.
    Tensor<double> point({3, 3}, {0.5, 0.4, 0.1, 0.45, 0.3, 0.2, 0.6, 0.55, 0.4});
    auto r = grad_check([](Graph<double>& g, Var x) {
      Var col = g.reshape(x, {9, 1});
      return ranking_loss(g, g.slice_rows(col, 0, 3), g.slice_rows(col, 3, 3), g.slice_rows(col, 6, 3), kTau, 5.0);
    }, point);
    rows.push_back(gradient_row("L_rank", r, tol));
  }
  {
    Rng rng(0x6C05, 7);
    Tensor<double> logits = Tensor<double>::matrix(4, 9);
    for (auto& x : logits.values()) x = rng.normal(0, 1.5);
    for (double gamma : {0.0, 2.0})
      for (bool printed : {false, true}) {
        auto r = grad_check([&](Graph<double>& g, Var x) { return focal_mlm(g, x, {1, 4, 0, 8}, gamma, printed); }, logits);
        char name[64];
        std::snprintf(name, sizeof(name), "L_mlm (gamma=%.0f%s)", gamma, printed ? ", printed form" : "");
        rows.push_back(gradient_row(name, r, tol));
      }
  }
  return rows;
}

// ---- encoder and end-to-end gradients on a micro-model ----------------------------

inline RunConfig micro_config() {
  RunConfig c;
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.video_layers = c.model.text_layers = c.model.fusion_layers = 1;
  c.model.ffn_mult = 2;
  c.model.frames = 2;
  c.model.height = c.model.width = 8;
  c.model.patch = 4;
  c.model.max_text_len = 16;
  c.train.batch_size = 2;
  c.train.epochs = 2;
  c.train.precision = "float64";
  return c;
}

inline Corpus micro_corpus(const RunConfig& c, std::size_t n = 12) {
  CorpusOptions opt;
  opt.n = n;
  opt.seed = 5;
  opt.frames = c.model.frames;
  opt.height = c.model.height;
  opt.width = c.model.width;
  return generate_corpus(opt);
}

inline std::vector<CheckRow> encoder_gradients(double tol = 1e-3) {
  const RunConfig cfg = micro_config();
  const Corpus corpus = micro_corpus(cfg);
  const Vocabulary vocab;
  const ClipSource clips;
  Model<double> model(cfg.model, vocab.size(), 11);
  std::vector<CheckRow> rows;

  const auto train = corpus.split(Split::kTrain);
  const std::vector<const SceneRecord*> slice(train.begin(), train.begin() + 2);
  const RawBatch batch = make_batch(slice, vocab, cfg.model, cfg.effective_masking(), clips, cfg.train.seed, 0, 0);
  const auto& sample = batch.samples[0];

  {
    Tensor<double> patches = model.patchify(*sample.clip);
    auto r = grad_check([&](Graph<double>& g, Var x) { return g.sum(model.encode_patches(g, x, &sample.video_mask).pooled); }, patches);
    rows.push_back(gradient_row("video encoder (pixels)", r, tol));
  }
  auto by_prefix = [&](const std::string& name, const std::vector<std::string>& prefixes, const std::function<Var(Graph<double>&)>& fn) {
    model.parameters().set_trainable_prefixes(prefixes);
    rows.push_back(gradient_row(name, grad_check_parameters(model.parameters(), fn), tol));
  };
  by_prefix("video encoder (parameters)", {"video."}, [&](Graph<double>& g) { return g.sum(model.encode_video(g, *sample.clip, &sample.video_mask).pooled); });
  by_prefix("text encoder (parameters)", {"text."}, [&](Graph<double>& g) { return g.sum(model.encode_text(g, sample.text).pooled); });
  by_prefix("fusion encoder (parameters)", {"fusion."}, [&](Graph<double>& g) {
    return g.sum(model.fuse(g, model.encode_video(g, *sample.clip), model.encode_text(g, sample.masked_text)).pooled);
  });
  model.parameters().set_all_trainable();
  rows.push_back(gradient_row("end-to-end total loss (B=2)",
                              grad_check_parameters(model.parameters(), [&](Graph<double>& g) { return pretrain_objective(g, model, batch, cfg).total; }),
                              tol));
  return rows;
}

// ---- fast path versus nested-loop oracles ---------------------------------------

struct OracleSummary {
  std::vector<CheckRow> rows;  // one per loss term
  std::size_t trials = 0;
};

inline OracleSummary oracle_agreement(std::size_t trials, const std::vector<std::size_t>& batch_sizes = {2, 4, 8}, double tol = 1e-6) {
  constexpr double kTau = 0.05, kMargin = 5.0, kGamma = 2.0;
  const char* names[] = {"L_v", "L_v'", "L_t", "L_t'", "L_rank", "L_mlm"};
  std::vector<double> worst(6, 0.0);
  auto note = [&](std::size_t k, double fast, double ref) {
    const double d = std::abs(fast - ref);
    worst[k] = std::isfinite(d) ? std::max(worst[k], d) : INFINITY;
  };
  OracleSummary out;
  for (std::size_t b : batch_sizes)
    for (std::size_t trial = 0; trial < trials; ++trial) {
      Rng rng(0x0AC1E + b, trial);
      const auto batch = random_embeddings(b, 8, rng, trial % 2 == 1);
      Graph<double> g(false);
      auto vars = bind_batch(g, batch);
      auto tma = tma_total(g, vars, kTau);
      const auto ref = oracle::tma(batch, kTau);
      note(0, g.item(tma.l_v), ref.l_v);
      note(1, g.item(tma.l_v_prime), ref.l_v_prime);
      note(2, g.item(tma.l_t), ref.l_t);
      note(3, g.item(tma.l_t_prime), ref.l_t_prime);
      Var rank = ranking_loss(g, paired_similarity(g, vars.v_e, vars.t_e), paired_similarity(g, vars.v_e, vars.t_m),
                              paired_similarity(g, vars.v_m, vars.t_e), kTau, kMargin, batch.masked_text_present);
      note(4, g.item(rank), oracle::rank_for_batch(batch, kTau, kMargin));
      Tensor<double> logits = Tensor<double>::matrix(b + 1, 13);
      for (auto& x : logits.values()) x = rng.normal(0, 2);
      std::vector<std::size_t> targets;
      for (std::size_t i = 0; i <= b; ++i) targets.push_back(rng.below(13));
      Var mlm = focal_mlm(g, g.constant(logits), targets, kGamma);
      note(5, g.item(mlm), oracle::focal(logits, targets, kGamma));
      ++out.trials;
    }
  for (std::size_t k = 0; k < 6; ++k) out.rows.push_back({names[k], worst[k], tol, ""});
  return out;
}

inline std::string format_rows(const std::vector<CheckRow>& rows, const char* value_header) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%-*s  %-12s %-10s %s\n", int(width), "check", value_header, "tolerance", "result");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %-12.3e %-10.0e %s%s\n", int(width), r.name.c_str(), r.value, r.tolerance, r.pass() ? "pass" : "FAIL",
                  r.pass() || r.detail.empty() ? "" : ("  worst " + r.detail).c_str());
    out += buf;
  }
  return out;
}

}  // namespace trialign::checks
