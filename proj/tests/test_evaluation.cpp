// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "metric_fixtures.hpp"
#include "trialign/checks.hpp"
#include "trialign/evaluation.hpp"

namespace trialign {
namespace {

using testing::RankedFixture;

TEST(Similarity, Examples) {
  Tensor<double> one({1, 2}, {0.6, 0.8});
  EXPECT_NEAR(similarity_matrix(one, one).at(0, 0), 1.0, 1e-15);
  Tensor<double> a({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 2}, {0, 1, 1, 0});
  const auto s = similarity_matrix(a, b);
  EXPECT_EQ(s.at(0, 0), 0.0);
  EXPECT_EQ(s.at(0, 1), 1.0);
  EXPECT_EQ(s.at(1, 1), 0.0);
}

TEST(Similarity, RandomMatchesPairwiseDots) {
  Rng rng(3, 3);
  const auto t = checks::random_unit_rows(3, 5, rng), v = checks::random_unit_rows(3, 5, rng);
  std::size_t dots = 0;
  const auto s = similarity_matrix(t, v, &dots);
  EXPECT_EQ(dots, 9u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s.at(i, j), oracle::dot(t, i, v, j), 1e-15);
}

TEST(Similarity, Rejections) {
  Tensor<double> a({1, 2}, {1, 0});
  Tensor<double> b({1, 3}, {1, 0, 0});
  Tensor<double> long_row({1, 2}, {1, 1});
  EXPECT_THROW(similarity_matrix(a, b), ShapeError);
  EXPECT_THROW(similarity_matrix(long_row, a), InvalidArgument);
}

void expect_fixture(const RankedFixture& f) {
  const auto m = retrieval_metrics(f.s, f.gt);
  EXPECT_EQ(m.ranks, f.ranks);
  EXPECT_DOUBLE_EQ(m.r1, f.r1);
  EXPECT_DOUBLE_EQ(m.r5, f.r5);
  EXPECT_DOUBLE_EQ(m.r10, f.r10);
  EXPECT_DOUBLE_EQ(m.median_rank, f.median_rank);
}

TEST(RetrievalMetrics, HandRankedMatrices) {
  expect_fixture(testing::staircase());
  expect_fixture(testing::identity_dominant());
  expect_fixture(testing::all_ties());
  expect_fixture(testing::wide());
}

TEST(RetrievalMetrics, InvariantUnderStrictlyMonotoneTransforms) {
  Rng rng(8, 1);
  for (int trial = 0; trial < 20; ++trial) {
    SimilarityMatrix s = SimilarityMatrix::matrix(9, 14);
    for (auto& x : s.values()) x = rng.uniform(-1, 1);
    std::vector<std::size_t> gt(9);
    for (auto& g : gt) g = rng.below(14);
    const auto base = retrieval_metrics(s, gt);
    for (auto f : {+[](double x) { return std::exp(3 * x); }, +[](double x) { return x * x * x; }, +[](double x) { return 2 * x - 7; },
                   +[](double x) { return std::atan(x); }}) {
      SimilarityMatrix t = s;
      for (auto& x : t.values()) x = f(x);
      EXPECT_EQ(retrieval_metrics(t, gt).ranks, base.ranks);
    }
  }
}

TEST(RetrievalMetrics, RecallMonotoneAndMedianRowPermutationInvariant) {
  Rng rng(8, 2);
  SimilarityMatrix s = SimilarityMatrix::matrix(15, 30);
  for (auto& x : s.values()) x = rng.uniform(-1, 1);
  std::vector<std::size_t> gt(15);
  for (auto& g : gt) g = rng.below(30);
  const auto m = retrieval_metrics(s, gt);
  EXPECT_LE(m.r1, m.r5);
  EXPECT_LE(m.r5, m.r10);
  std::vector<std::size_t> perm(15);
  for (std::size_t i = 0; i < 15; ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  SimilarityMatrix p = SimilarityMatrix::matrix(15, 30);
  std::vector<std::size_t> pgt(15);
  for (std::size_t i = 0; i < 15; ++i) {
    for (std::size_t j = 0; j < 30; ++j) p.at(i, j) = s.at(perm[i], j);
    pgt[i] = gt[perm[i]];
  }
  EXPECT_EQ(retrieval_metrics(p, pgt).median_rank, m.median_rank);
}

TEST(RetrievalMetrics, Rejections) {
  SimilarityMatrix s = SimilarityMatrix::matrix(2, 2);
  EXPECT_THROW(retrieval_metrics(s, {0, 2}), InvalidArgument);
  EXPECT_THROW(retrieval_metrics(s, {0}), ShapeError);
  s.at(0, 0) = std::nan("");
  EXPECT_THROW(retrieval_metrics(s, {0, 1}), NumericalError);
}

TEST(Diagnostics, IdentityAndDirectRecomputation) {
  const auto id = testing::identity_dominant();
  const auto d = similarity_diagnostics(id.s, id.gt);
  EXPECT_DOUBLE_EQ(d.mean_positive, 1.0);
  EXPECT_DOUBLE_EQ(d.mean_margin, 1.0);

  Rng rng(8, 3);
  SimilarityMatrix s = SimilarityMatrix::matrix(4, 4);
  for (auto& x : s.values()) x = rng.uniform(-1, 1);
  const std::vector<std::size_t> gt = {2, 0, 3, 1};
  double pos = 0, margin = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double neg = (s.at(i, 0) + s.at(i, 1) + s.at(i, 2) + s.at(i, 3) - s.at(i, gt[i])) / 3;
    pos += s.at(i, gt[i]) / 4;
    margin += (s.at(i, gt[i]) - neg) / 4;
  }
  const auto r = similarity_diagnostics(s, gt);
  EXPECT_NEAR(r.mean_positive, pos, 1e-15);
  EXPECT_NEAR(r.mean_margin, margin, 1e-15);
}

TEST(VqaAccuracy, Examples) {
  EXPECT_EQ(vqa_accuracy({1, 2, 3}, {1, 2, 3}), 1.0);
  EXPECT_EQ(vqa_accuracy({0, 0}, {1, 1}), 0.0);
  EXPECT_EQ(vqa_accuracy({1, 2, 3, 4}, {1, 2, 3, 0}), 0.75);
  EXPECT_THROW(vqa_accuracy({1}, {1, 2}), InvalidArgument);
}

// ---- efficiency ---------------------------------------------------------------------

struct EfficiencyFixture {
  RunConfig cfg = checks::micro_config();
  Corpus corpus = checks::micro_corpus(cfg, 40);
  Vocabulary vocab;
  Model<float> model{cfg.model, vocab.size(), 2};

  EfficiencyReport run(std::size_t n, std::size_t m, std::size_t k) {
    std::vector<TokenizedText> q;
    std::vector<VideoClip> v;
    for (std::size_t i = 0; i < n; ++i) q.push_back(vocab.tokenize(corpus.scenes[i].caption));
    for (std::size_t j = 0; j < m; ++j) v.push_back(render(corpus.scenes[j].render_spec()));
    return efficiency_probe(model, q, v, k);
  }
};

TEST(Efficiency, ExactCounts) {
  EfficiencyFixture f;
  const auto r = f.run(10, 20, 5);
  EXPECT_EQ(r.dual.uni_modal_forwards, 30u);
  EXPECT_EQ(r.dual.dot_products, 200u);
  EXPECT_EQ(r.dual.fusion_forwards, 0u);
  EXPECT_EQ(r.cross.fusion_forwards, 200u);
  EXPECT_EQ(r.rescoring.fusion_forwards, 50u);
}

TEST(Efficiency, CountsScaleWithSizes) {
  EfficiencyFixture f;
  for (auto [n, m, k] : {std::tuple{1, 1, 1}, std::tuple{3, 7, 2}, std::tuple{7, 3, 0}}) {
    const auto r = f.run(n, m, k);
    EXPECT_EQ(r.dual.uni_modal_forwards, std::size_t(n + m));
    EXPECT_EQ(r.dual.dot_products, std::size_t(n * m));
    EXPECT_EQ(r.cross.fusion_forwards, std::size_t(n * m));
    EXPECT_EQ(r.rescoring.fusion_forwards, std::size_t(n * k));
  }
  EXPECT_THROW(f.run(2, 3, 4), InvalidArgument);
}

// ---- model-driven evaluation -----------------------------------------------------

TEST(EvaluateRetrieval, UntrainedModelIsNearChance) {
  RunConfig cfg = checks::micro_config();
  CorpusOptions opt;
  opt.n = 500;
  opt.frames = cfg.model.frames;
  opt.height = opt.width = 8;
  const Corpus corpus = generate_corpus(opt);
  const Vocabulary vocab;
  double r1 = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Model<float> model(cfg.model, vocab.size(), seed);
    const auto rep = evaluate_retrieval(model, vocab, corpus, Split::kTest, ClipSource{});
    EXPECT_EQ(rep.queries, 50u);
    r1 += rep.metrics.r1 / 3;
  }
  EXPECT_LT(r1, 0.1);  // chance is 0.02
}

}  // namespace
}  // namespace trialign
