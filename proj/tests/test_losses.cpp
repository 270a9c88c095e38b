// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "trialign/logging.hpp"
#include "trialign/losses.hpp"
#include "trialign/oracle.hpp"
#include "trialign/substrate/grad_check.hpp"

namespace trialign {
namespace {

using testing::random_batch;
using testing::random_unit;

constexpr double kTau = 0.05;

TEST(ExclusiveNce, SingleSampleIsZero) {
  Rng rng(1, 0);
  auto a = random_unit(1, 8, rng);
  EXPECT_EQ(exclusive_nce_anchor<double>(a, {random_unit(1, 8, rng), random_unit(1, 8, rng), random_unit(1, 8, rng)}, kTau), 0.0);
}

TEST(ExclusiveNce, MaximallyConfusableBatch) {
  Tensor<double> same({2, 2}, {1, 0, 1, 0});
  EXPECT_NEAR(exclusive_nce_anchor<double>(same, {same, same, same}, kTau), 2 * 3 * std::log(4.0), 1e-9);
}

TEST(ExclusiveNce, RejectsBadInputs) {
  Tensor<double> a({1, 2}, {1, 1});
  Tensor<double> u({1, 2}, {1, 0});
  EXPECT_THROW(exclusive_nce_anchor<double>(a, {u, u, u}, kTau), InvalidArgument);
  EXPECT_THROW(exclusive_nce_anchor<double>(u, {u, u, u}, 0.0), InvalidArgument);
}

TEST(ReverseAlignment, Examples) {
  Tensor<double> one({1, 2}, {0, 1});
  EXPECT_EQ(reverse_alignment<double>(one, {one, one, one}, kTau), 0.0);
  Tensor<double> v({2, 2}, {1, 0, 0, 1});
  const double term = -std::log(std::exp(20.0) / (std::exp(20.0) + 1.0));
  EXPECT_NEAR(reverse_alignment<double>(v, {v, v, v}, kTau), 6 * term, 1e-12);
  EXPECT_LT(reverse_alignment<double>(v, {v, v, v}, kTau), 1e-7);
}

class OracleAgreement : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OracleAgreement, HundredRandomBatches) {
  const std::size_t b = GetParam();
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(b, trial);
    auto batch = random_batch(b, 6, rng, trial % 2 == 1);
    Graph<double> g(false);
    auto vars = bind_batch(g, batch);
    auto tma = tma_total(g, vars, kTau);
    auto ref = oracle::tma(batch, kTau);
    ASSERT_NEAR(g.item(tma.l_v), ref.l_v, 1e-6);
    ASSERT_NEAR(g.item(tma.l_v_prime), ref.l_v_prime, 1e-6);
    ASSERT_NEAR(g.item(tma.l_t), ref.l_t, 1e-6);
    ASSERT_NEAR(g.item(tma.l_t_prime), ref.l_t_prime, 1e-6);

    Var rank = ranking_loss(g, paired_similarity(g, vars.v_e, vars.t_e), paired_similarity(g, vars.v_e, vars.t_m),
                            paired_similarity(g, vars.v_m, vars.t_e), kTau, 5.0, batch.masked_text_present);
    ASSERT_NEAR(g.item(rank), oracle::rank_for_batch(batch, kTau, 5.0), 1e-6);

    Tensor<double> logits = Tensor<double>::matrix(b + 1, 11);
    for (auto& x : logits.values()) x = rng.normal(0, 2);
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i <= b; ++i) targets.push_back(rng.below(11));
    for (bool printed : {false, true})
      ASSERT_NEAR(focal_mlm<double>(logits, targets, 2.0, printed), oracle::focal(logits, targets, 2.0, printed), 1e-6);
  }
}

INSTANTIATE_TEST_SUITE_P(BatchSizes, OracleAgreement, ::testing::Values(2, 4, 8));

TEST(Tma, SingleSampleAllZero) {
  Rng rng(3, 3);
  auto parts = tma_total(random_batch(1, 4, rng), kTau);
  EXPECT_EQ(parts.l_v, 0.0);
  EXPECT_EQ(parts.l_v_prime, 0.0);
  EXPECT_EQ(parts.l_t, 0.0);
  EXPECT_EQ(parts.l_t_prime, 0.0);
}

TEST(Tma, RoleSwapSwapsSides) {
  Rng rng(4, 4);
  auto b = random_batch(5, 6, rng);
  EmbeddingBatch<double> mirrored{b.t_e, b.v_e, b.v_m, b.t_m, b.m_tmf, b.m_vmf, {}};
  auto x = tma_total(b, kTau), y = tma_total(mirrored, kTau);
  EXPECT_NEAR(x.l_v, y.l_t, 1e-12);
  EXPECT_NEAR(x.l_v_prime, y.l_t_prime, 1e-12);
  EXPECT_NEAR(x.l_t, y.l_v, 1e-12);
  EXPECT_NEAR(x.l_t_prime, y.l_v_prime, 1e-12);
  EXPECT_NEAR(x.l_tma, x.l_v + x.l_v_prime + x.l_t + x.l_t_prime, 1e-12);
}

TEST(Tma, RejectsNonUnitRows) {
  Rng rng(4, 5);
  auto b = random_batch(3, 4, rng);
  b.v_m.at(1, 0) += 0.1;
  EXPECT_THROW(tma_total(b, kTau), InvalidArgument);
}

// Term for anchor i with the T_e-positive (family 0).
double te_term(const Tensor<double>& a, const Tensor<double>& te, const Tensor<double>& tm, const Tensor<double>& m, std::size_t i) {
  Graph<double> g(false);
  Var terms = exclusive_nce_terms(g, g.constant(a), {g.constant(te), g.constant(tm), g.constant(m)}, kTau);
  return g.value(terms).at(i, 0);
}

TEST(ExclusionProperty, PerturbingOtherSameIndexPositivesLeavesTermUnchanged) {
  Rng rng(6, 6);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_unit(4, 5, rng), te = random_unit(4, 5, rng), tm = random_unit(4, 5, rng), m = random_unit(4, 5, rng);
    const std::size_t i = rng.below(4);
    const double base = te_term(a, te, tm, m, i);
    auto tm2 = tm, m2 = m;
    for (std::size_t k = 0; k < 5; ++k) {
      tm2.at(i, k) += rng.normal(0, 3);
      m2.at(i, k) += rng.normal(0, 3);
    }
    EXPECT_LE(std::abs(te_term(a, te, tm2, m, i) - base), 1e-12);
    EXPECT_LE(std::abs(te_term(a, te, tm, m2, i) - base), 1e-12);
  }
}

TEST(ExclusionProperty, CrossGradientIsIdenticallyZero) {
  Rng rng(7, 7);
  auto a = random_unit(4, 5, rng), te = random_unit(4, 5, rng), tm = random_unit(4, 5, rng), m = random_unit(4, 5, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    Graph<double> g;
    Var vtm = g.input(tm), vm = g.input(m);
    Var terms = exclusive_nce_terms(g, g.constant(a), {g.constant(te), vtm, vm}, kTau);
    std::vector<double> pick(12, 0.0);
    pick[i * 3] = 1.0;
    g.backward(g.weighted_sum(terms, pick));
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(g.grad(vtm).at(i, k), 0.0);
      EXPECT_EQ(g.grad(vm).at(i, k), 0.0);
    }
  }
}

TEST(Ranking, Examples) {
  EXPECT_NEAR(ranking_loss<double>({0.8}, {0.6}, {0.7}, kTau, 5.0), 4.0, 1e-12);
  EXPECT_NEAR(oracle::rank({0.8}, {0.6}, {0.7}, kTau, 5.0), 4.0, 1e-12);
  EXPECT_EQ(ranking_loss<double>({0.3}, {0.3}, {0.3}, kTau, 5.0), 10.0);
  EXPECT_EQ(ranking_loss<double>({0.9, 0.8}, {0.6, 0.5}, {0.5, 0.5}, kTau, 5.0), 0.0);
  EXPECT_THROW(ranking_loss<double>({0.9}, {0.6}, {0.5}, -1.0, 5.0), InvalidArgument);
}

TEST(Ranking, Monotonicity) {
  Rng rng(8, 8);
  for (int trial = 0; trial < 200; ++trial) {
    const double p = rng.uniform(-1, 1), tm = rng.uniform(-1, 1), vm = rng.uniform(-1, 1), d = rng.uniform(0, 0.5);
    const double base = ranking_loss<double>({p}, {tm}, {vm}, kTau, 5.0);
    EXPECT_LE(ranking_loss<double>({p + d}, {tm}, {vm}, kTau, 5.0), base);
    EXPECT_GE(ranking_loss<double>({p}, {tm + d}, {vm}, kTau, 5.0), base);
    EXPECT_GE(ranking_loss<double>({p}, {tm}, {vm + d}, kTau, 5.0), base);
  }
}

TEST(Focal, GammaZeroIsCrossEntropy) {
  Tensor<double> logits({2, 3}, {0.1, 2.0, -1.0, 0.5, 0.5, 3.0});
  const std::vector<std::size_t> targets{1, 0};
  double ce = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += std::exp(logits.at(i, k));
    ce += -(logits.at(i, targets[i]) - std::log(s));
  }
  EXPECT_NEAR(focal_mlm<double>(logits, targets, 0.0), ce / 2, 1e-9);
}

TEST(Focal, HalfProbabilityAndPerfectPrediction) {
  Tensor<double> half({1, 2}, {0.0, 0.0});
  EXPECT_NEAR(focal_mlm<double>(half, {0}, 2.0), 0.25 * std::log(2.0), 1e-15);
  Tensor<double> sure({1, 2}, {0.0, -800.0});
  EXPECT_EQ(focal_mlm<double>(sure, {0}, 2.0), 0.0);
}

TEST(Focal, NeverExceedsCrossEntropy) {
  Rng rng(9, 9);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> logits = Tensor<double>::matrix(3, 5);
    for (auto& x : logits.values()) x = rng.normal(0, 3);
    std::vector<std::size_t> t{rng.below(5), rng.below(5), rng.below(5)};
    const double gamma = rng.uniform(0, 4);
    EXPECT_LE(focal_mlm<double>(logits, t, gamma), focal_mlm<double>(logits, t, 0.0) + 1e-15);
  }
}

TEST(Focal, ZeroPositionsContributeZeroWithWarning) {
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& m) { warnings.push_back(m); });
  EXPECT_EQ(focal_mlm<double>(Tensor<double>::matrix(0, 4), {}, 2.0), 0.0);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Focal, RejectsBadTargets) {
  EXPECT_THROW(focal_mlm<double>(Tensor<double>::matrix(1, 4), {4}, 2.0), InvalidArgument);
  EXPECT_THROW(focal_mlm<double>(Tensor<double>::matrix(1, 4), {0}, -1.0), InvalidArgument);
}

TEST(TotalLoss, SumAndFiniteness) {
  EXPECT_EQ(total_loss(0, 0, 0), 0.0);
  EXPECT_NEAR(total_loss(1.5, 4, 0.1733), 5.6733, 1e-12);
  try {
    total_loss(1.0, std::nan(""), 0.0);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("L_rank"), std::string::npos);
  }
}

// ---- gradient checks --------------------------------------------------------

Tensor<double> stack(const EmbeddingBatch<double>& b) {
  const std::size_t n = b.size(), d = b.v_e.cols();
  Tensor<double> out = Tensor<double>::matrix(6 * n, d);
  const Tensor<double>* fields[] = {&b.v_e, &b.t_e, &b.t_m, &b.v_m, &b.m_vmf, &b.m_tmf};
  for (std::size_t f = 0; f < 6; ++f)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) out.at(f * n + i, k) = fields[f]->at(i, k);
  return out;
}

BatchVars<double> unstack(Graph<double>& g, Var x, std::size_t n, RowPresence present = {}) {
  return {g.slice_rows(x, 0, n), g.slice_rows(x, n, n), g.slice_rows(x, 2 * n, n), g.slice_rows(x, 3 * n, n),
          g.slice_rows(x, 4 * n, n), g.slice_rows(x, 5 * n, n), std::move(present)};
}

TEST(LossGradients, ExclusiveNceVideoAnchorTwoSamples) {
  Rng rng(10, 0);
  auto batch = random_batch(2, 4, rng);
  auto r = grad_check([](Graph<double>& g, Var x) {
    auto b = unstack(g, x, 2);
    return exclusive_nce(g, b.v_e, {b.t_e, b.t_m, b.m_vmf}, kTau);
  }, stack(batch));
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(LossGradients, EveryTermWithAbsentRows) {
  Rng rng(10, 1);
  auto batch = random_batch(4, 4, rng);
  const RowPresence present{1, 0, 1, 1};
  const std::vector<std::pair<const char*, std::function<Var(Graph<double>&, const BatchVars<double>&)>>> parts = {
      {"L_v", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_v; }},
      {"L_v'", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_v_prime; }},
      {"L_t", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_t; }},
      {"L_t'", [](Graph<double>& g, const BatchVars<double>& b) { return tma_total(g, b, kTau).l_t_prime; }},
      {"InfoNCE", [](Graph<double>& g, const BatchVars<double>& b) { return symmetric_infonce(g, b.v_e, b.t_e, kTau); }},
  };
  for (const auto& [name, fn] : parts) {
    auto r = grad_check([&, fn = fn](Graph<double>& g, Var x) { return fn(g, unstack(g, x, 4, present)); }, stack(batch));
    EXPECT_LE(r.max_rel_error, 1e-4) << name;
  }
}

TEST(LossGradients, RankingInsideBothHinges) {
  // s_pos - s_other < margin * tau keeps both hinges active.
  Tensor<double> point({3, 3}, {0.5, 0.4, 0.1, 0.45, 0.3, 0.2, 0.6, 0.55, 0.4});
  auto r = grad_check([](Graph<double>& g, Var x) {
    return ranking_loss(g, g.slice_rows(g.reshape(x, {9, 1}), 0, 3), g.slice_rows(g.reshape(x, {9, 1}), 3, 3),
                        g.slice_rows(g.reshape(x, {9, 1}), 6, 3), kTau, 5.0);
  }, point);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(LossGradients, FocalBothForms) {
  Rng rng(10, 2);
  Tensor<double> logits = Tensor<double>::matrix(3, 6);
  for (auto& x : logits.values()) x = rng.normal(0, 1.5);
  for (double gamma : {0.0, 1.0, 2.0, 2.5})
    for (bool printed : {false, true}) {
      auto r = grad_check([&](Graph<double>& g, Var x) { return focal_mlm(g, x, {1, 4, 0}, gamma, printed); }, logits);
      EXPECT_LE(r.max_rel_error, 1e-6) << "gamma " << gamma << " printed " << printed;
    }
}

TEST(LossGradients, TotalIsSumOfPartGradients) {
  Rng rng(10, 3);
  auto batch = random_batch(3, 4, rng);
  const Tensor<double> x0 = stack(batch);
  auto grad_of = [&](int which) {
    Graph<double> g;
    Var x = g.input(x0);
    auto b = unstack(g, x, 3);
    Var tma = tma_total(g, b, kTau).total;
    Var rank = ranking_loss(g, paired_similarity(g, b.v_e, b.t_e), paired_similarity(g, b.v_e, b.t_m),
                            paired_similarity(g, b.v_m, b.t_e), kTau, 5.0);
    Var root = which == 0 ? tma : which == 1 ? rank : g.add(tma, rank);
    g.backward(root);
    return g.grad(x);
  };
  auto a = grad_of(0), b = grad_of(1), t = grad_of(2);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], a[i] + b[i], 1e-12);
}

TEST(InfoNce, EqualsReverseOnSingleFamilyPlusTranspose) {
  Rng rng(11, 0);
  auto v = random_unit(5, 4, rng), t = random_unit(5, 4, rng);
  Graph<double> g(false);
  const double info = g.item(symmetric_infonce(g, g.constant(v), g.constant(t), kTau));
  double ref = 0;
  for (const auto* pair : {&v, &t}) {
    const auto& targets = *pair;
    const auto& queries = pair == &v ? t : v;
    // a single family counted once: zero weight on the other two
    ref += oracle::reverse(targets, {&queries, &queries, &queries}, kTau, {RowPresence{}, RowPresence(5, 0), RowPresence(5, 0)});
  }
  EXPECT_NEAR(info, ref, 1e-9);
}

}  // namespace
}  // namespace trialign
