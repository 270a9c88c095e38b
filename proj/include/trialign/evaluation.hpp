// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "trialign/data.hpp"
#include "trialign/encoders.hpp"
#include "trialign/training.hpp"

namespace trialign {

/// Rows are text queries, columns are videos.
using SimilarityMatrix = Tensor<double>;

/// Pairwise dot products of unit-norm rows. `dot_products`, when given, is
/// incremented once per (text, video) pair.
inline SimilarityMatrix similarity_matrix(const Tensor<double>& text, const Tensor<double>& video, std::size_t* dot_products = nullptr) {
  if (text.cols() != video.cols())
    throw ShapeError("similarity_matrix: text width " + std::to_string(text.cols()) + " != video width " + std::to_string(video.cols()));
  detail::check_unit_rows(text, "text embedding");
  detail::check_unit_rows(video, "video embedding");
  const std::size_t n = text.rows(), m = video.rows(), d = text.cols();
  SimilarityMatrix s = SimilarityMatrix::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += text.at(i, k) * video.at(j, k);
      s.at(i, j) = acc;
    }
  if (dot_products) *dot_products += n * m;
  return s;
}

struct RetrievalMetrics {
  double r1 = 0, r5 = 0, r10 = 0;
  double median_rank = 0;
  std::vector<std::size_t> ranks;  // 1-based rank of the ground truth per query
};

namespace detail {

inline void check_ground_truth(const SimilarityMatrix& s, const std::vector<std::size_t>& gt) {
  if (gt.size() != s.rows()) throw ShapeError("ground truth has " + std::to_string(gt.size()) + " entries for " + std::to_string(s.rows()) + " queries");
  if (s.rows() == 0) throw InvalidArgument("similarity matrix has no rows");
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] >= s.cols()) throw InvalidArgument("ground truth column " + std::to_string(gt[i]) + " of row " + std::to_string(i) + " out of range");
  if (!s.all_finite()) throw NumericalError("similarity matrix has non-finite entries");
}

}  // namespace detail

/// Rank of the ground truth under descending scores; ties are broken by
/// ascending column index.
inline std::size_t ground_truth_rank(const SimilarityMatrix& s, std::size_t row, std::size_t gt) {
  const double target = s.at(row, gt);
  std::size_t rank = 1;
  for (std::size_t j = 0; j < s.cols(); ++j) {
    const double v = s.at(row, j);
    if (v > target || (v == target && j < gt)) ++rank;
  }
  return rank;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline RetrievalMetrics retrieval_metrics(const SimilarityMatrix& s, const std::vector<std::size_t>& gt) {
  detail::check_ground_truth(s, gt);
  RetrievalMetrics m;
  std::vector<double> ranks;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const std::size_t r = ground_truth_rank(s, i, gt[i]);
    m.ranks.push_back(r);
    ranks.push_back(double(r));
    m.r1 += r <= 1;
    m.r5 += r <= 5;
    m.r10 += r <= 10;
  }
  const double n = double(s.rows());
  m.r1 /= n;
  m.r5 /= n;
  m.r10 /= n;
  m.median_rank = median(ranks);
  return m;
}

struct SimilarityDiagnostics {
  double mean_positive = 0;
  double mean_margin = 0;  // positive minus the mean of the row's negatives
};

inline SimilarityDiagnostics similarity_diagnostics(const SimilarityMatrix& s, const std::vector<std::size_t>& gt) {
  detail::check_ground_truth(s, gt);
  if (s.cols() < 2) throw InvalidArgument("similarity diagnostics need at least two columns");
  SimilarityDiagnostics d;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const double pos = s.at(i, gt[i]);
    double neg = 0;
    for (std::size_t j = 0; j < s.cols(); ++j)
      if (j != gt[i]) neg += s.at(i, j);
    neg /= double(s.cols() - 1);
    d.mean_positive += pos;
    d.mean_margin += pos - neg;
  }
  d.mean_positive /= double(s.rows());
  d.mean_margin /= double(s.rows());
  return d;
}

inline double vqa_accuracy(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& answers) {
  if (predictions.size() != answers.size())
    throw InvalidArgument("vqa_accuracy: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(answers.size()) + " answers");
  if (answers.empty()) throw InvalidArgument("vqa_accuracy: no answers");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < answers.size(); ++i) hit += predictions[i] == answers[i];
  return double(hit) / double(answers.size());
}

// ---- model-driven evaluation ----------------------------------------------------

template <class T>
Tensor<double> stack_pooled(const std::vector<EmbeddingSequence<T>>& seqs) {
  if (seqs.empty()) return Tensor<double>::matrix(0, 0);
  const std::size_t d = seqs[0].pooled.cols();
  Tensor<double> out = Tensor<double>::matrix(seqs.size(), d);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) out.at(i, k) = double(seqs[i].pooled[k]);
  return out;
}

/// Renormalizes rows in double so float32 embeddings pass the unit check.
inline Tensor<double> renormalized(Tensor<double> x) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0;
    for (double v : x.row_span(i)) s += v * v;
    s = std::sqrt(s);
    for (double& v : x.row_span(i)) v /= s;
  }
  return x;
}

struct RetrievalReport {
  RetrievalMetrics metrics;
  SimilarityDiagnostics diagnostics;
  SimilarityMatrix similarity;
  std::size_t queries = 0;
};

/// Text-to-video retrieval over one split: query i should retrieve video i.
template <class T>
RetrievalReport evaluate_retrieval(const Model<T>& model, const Vocabulary& vocab, const Corpus& corpus, Split split, const ClipSource& clips,
                                   bool paragraphs = false) {
  const auto scenes = corpus.split(split);
  if (scenes.size() < 2) throw InvalidArgument(std::string("split '") + split_name(split) + "' needs at least two scenes for retrieval");
  std::vector<EmbeddingSequence<T>> texts, videos;
  for (const SceneRecord* r : scenes) {
    texts.push_back(model.encode_text(vocab.tokenize(paragraphs ? paragraph(r->scene) : r->caption)));
    videos.push_back(model.encode_video(clips.get(*r)));
  }
  RetrievalReport rep;
  rep.similarity = similarity_matrix(renormalized(stack_pooled(texts)), renormalized(stack_pooled(videos)));
  std::vector<std::size_t> gt(scenes.size());
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = i;
  rep.metrics = retrieval_metrics(rep.similarity, gt);
  rep.diagnostics = similarity_diagnostics(rep.similarity, gt);
  rep.queries = scenes.size();
  return rep;
}

/// Predicted answer class (open) or candidate index (multiple-choice).
template <class T>
std::size_t predict_qa(const Model<T>& model, const Vocabulary& vocab, const QaRecord& q, const VideoClip& clip) {
  Graph<T> g(false);
  const auto& logits = g.value(qa_logits(g, model, vocab, q, clip));
  return static_cast<std::size_t>(std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin());
}

struct VqaReport {
  double accuracy = 0;
  double majority_baseline = 0;  // accuracy of always answering the most frequent training target
  std::size_t questions = 0;
};

template <class T>
VqaReport evaluate_vqa(const Model<T>& model, const Vocabulary& vocab, const Corpus& corpus, Split split, QaMode mode, const ClipSource& clips) {
  const auto records = corpus.qa_split(split, mode);
  if (records.empty()) throw InvalidArgument(std::string("no ") + qa_mode_name(mode) + " QA records in split '" + split_name(split) + "'");
  std::vector<std::size_t> pred, truth;
  for (const QaRecord* q : records) {
    pred.push_back(predict_qa(model, vocab, *q, clips.get(corpus.scene(q->scene_id))));
    truth.push_back(mode == QaMode::kOpen ? q->answer : q->correct);
  }
  std::map<std::size_t, std::size_t> freq;
  for (const QaRecord* q : corpus.qa_split(Split::kTrain, mode)) ++freq[mode == QaMode::kOpen ? q->answer : q->correct];
  std::size_t majority = 0, best = 0;
  for (const auto& [k, c] : freq)
    if (c > best) {
      best = c;
      majority = k;
    }
  VqaReport rep;
  rep.accuracy = vqa_accuracy(pred, truth);
  rep.majority_baseline = vqa_accuracy(std::vector<std::size_t>(truth.size(), majority), truth);
  rep.questions = records.size();
  return rep;
}

// ---- efficiency ---------------------------------------------------------------------

struct PathCost {
  std::size_t uni_modal_forwards = 0;
  std::size_t fusion_forwards = 0;
  std::size_t dot_products = 0;
};

struct EfficiencyReport {
  std::size_t queries = 0, videos = 0, rescoring_depth = 0;
  PathCost dual;       // independent encoders + dot products
  PathCost cross;      // fusion over every (query, video) pair
  PathCost rescoring;  // fusion over each query's top-k dual-encoder hits
};

/// Runs the three retrieval paths and reads the encoder counters. Fusion
/// paths consume the cached uni-modal token sequences, so their cost is
/// reported as fusion forwards only.
template <class T>
EfficiencyReport efficiency_probe(const Model<T>& model, const std::vector<TokenizedText>& queries, const std::vector<VideoClip>& videos,
                                  std::size_t k) {
  if (queries.empty() || videos.empty()) throw InvalidArgument("efficiency probe needs at least one query and one video");
  if (k > videos.size()) throw InvalidArgument("rescoring depth k = " + std::to_string(k) + " exceeds the video count");
  EfficiencyReport rep;
  rep.queries = queries.size();
  rep.videos = videos.size();
  rep.rescoring_depth = k;

  model.reset_counters();
  std::vector<EmbeddingSequence<T>> t, v;
  for (const auto& q : queries) t.push_back(model.encode_text(q));
  for (const auto& c : videos) v.push_back(model.encode_video(c));
  std::size_t dots = 0;
  const auto s = similarity_matrix(renormalized(stack_pooled(t)), renormalized(stack_pooled(v)), &dots);
  rep.dual = {model.counters().uni_modal(), model.counters().fusion_forwards, dots};

  auto score = [&](std::size_t i, std::size_t j) {
    Graph<T> g(false);
    EncodedVars ve{g.constant(v[j].tokens), Var{}, v[j].valid}, te{g.constant(t[i].tokens), Var{}, t[i].valid};
    return g.item(model.candidate_score(g, model.fuse(g, ve, te)));
  };

  model.reset_counters();
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < videos.size(); ++j) score(i, j);
  rep.cross = {model.counters().uni_modal(), model.counters().fusion_forwards, 0};

  model.reset_counters();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::vector<std::size_t> cols(videos.size());
    for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = j;
    std::stable_sort(cols.begin(), cols.end(), [&](std::size_t a, std::size_t b) { return s.at(i, a) > s.at(i, b); });
    for (std::size_t r = 0; r < k; ++r) score(i, cols[r]);
  }
  rep.rescoring = {model.counters().uni_modal(), model.counters().fusion_forwards, 0};
  model.reset_counters();
  return rep;
}

// ---- reports ---------------------------------------------------------------------------

inline json to_json(const RetrievalReport& r, const std::string& split) {
  return {{"split", split},
          {"queries", r.queries},
          {"R@1", r.metrics.r1},
          {"R@5", r.metrics.r5},
          {"R@10", r.metrics.r10},
          {"MedR", r.metrics.median_rank},
          {"mean_positive_similarity", r.diagnostics.mean_positive},
          {"mean_margin", r.diagnostics.mean_margin}};
}

inline json to_json(const EfficiencyReport& r) {
  auto path = [](const PathCost& c) {
    return json{{"uni_modal_forwards", c.uni_modal_forwards}, {"fusion_forwards", c.fusion_forwards}, {"dot_products", c.dot_products}};
  };
  return {{"queries", r.queries}, {"videos", r.videos}, {"k", r.rescoring_depth},
          {"dual", path(r.dual)}, {"cross", path(r.cross)}, {"rescoring", path(r.rescoring)}};
}

inline std::string retrieval_table(const RetrievalReport& r, const std::string& split) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "split      queries   R@1     R@5     R@10    MedR    pos_sim  margin\n"
                "%-10s %-9zu %-7.4f %-7.4f %-7.4f %-7.1f %-8.4f %-.4f\n",
                split.c_str(), r.queries, r.metrics.r1, r.metrics.r5, r.metrics.r10, r.metrics.median_rank, r.diagnostics.mean_positive,
                r.diagnostics.mean_margin);
  return buf;
}

inline std::string efficiency_table(const EfficiencyReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "path        uni-modal  fusion    dot-products\n"
                "dual        %-10zu %-9zu %zu\n"
                "cross       %-10zu %-9zu %zu\n"
                "rescore@%-3zu %-10zu %-9zu %zu\n",
                r.dual.uni_modal_forwards, r.dual.fusion_forwards, r.dual.dot_products, r.cross.uni_modal_forwards, r.cross.fusion_forwards,
                r.cross.dot_products, r.rescoring_depth, r.rescoring.uni_modal_forwards, r.rescoring.fusion_forwards, r.rescoring.dot_products);
  return buf;
}

}  // namespace trialign
