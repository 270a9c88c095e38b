// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one [PASS]/[FAIL] line per criterion. Exits non-zero when a
// criterion fails, unless it is listed with --allow-fail.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>

#include "metric_fixtures.hpp"
#include "trialign/trialign.hpp"

namespace {

using namespace trialign;
namespace fs = std::filesystem;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[768];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string worst_of(const std::vector<checks::CheckRow>& rows) {
  const checks::CheckRow* worst = &rows.front();
  for (const auto& r : rows)
    if (!r.pass() || (worst->pass() && r.value / r.tolerance > worst->value / worst->tolerance)) worst = &r;
  return fmt("worst %s %.2e (tol %.0e)", worst->name.c_str(), worst->value, worst->tolerance);
}

// ---- 1 ----------------------------------------------------------------------------

Verdict oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto summary = checks::oracle_agreement(100, {2, 4, 8}, 1e-6);
  const double secs = seconds_since(t0);
  const bool ok = checks::all_pass(summary.rows) && secs < 60;
  return {ok, fmt("%zu batches, %s, %.1fs (limit 60s)", summary.trials, worst_of(summary.rows).c_str(), secs)};
}

// ---- 2 ----------------------------------------------------------------------------

Verdict degenerate_exactness() {
  constexpr double kTau = 0.05, kMargin = 5.0;
  double tma_max = 0, focal_gap = 0;
  bool hinge_zero = true;
  Rng rng(0xACC2, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto parts = tma_total(checks::random_embeddings(1, 6, rng, false), kTau);
    for (double v : {parts.l_v, parts.l_v_prime, parts.l_t, parts.l_t_prime}) tma_max = std::max(tma_max, std::abs(v));

    const std::size_t rows = 1 + rng.below(6), classes = 2 + rng.below(20);
    Tensor<double> logits = Tensor<double>::matrix(rows, classes);
    for (auto& x : logits.values()) x = rng.normal(0, 3);
    std::vector<std::size_t> targets(rows);
    double ce = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      targets[i] = rng.below(classes);
      double mx = logits.at(i, 0);
      for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, logits.at(i, k));
      double z = 0;
      for (std::size_t k = 0; k < classes; ++k) z += std::exp(logits.at(i, k) - mx);
      ce += mx + std::log(z) - logits.at(i, targets[i]);
    }
    focal_gap = std::max(focal_gap, std::abs(focal_mlm<double>(logits, targets, 0.0) - ce / double(rows)));

    // both hinges inactive: s_pos exceeds each masked score by more than margin * tau
    const std::size_t b = 1 + rng.below(8);
    std::vector<double> pos(b), tm(b), vm(b);
    for (std::size_t i = 0; i < b; ++i) {
      pos[i] = rng.uniform(0.3, 1.0);
      tm[i] = pos[i] - kMargin * kTau - rng.uniform(1e-3, 0.5);
      vm[i] = pos[i] - kMargin * kTau - rng.uniform(1e-3, 0.5);
    }
    hinge_zero &= ranking_loss<double>(pos, tm, vm, kTau, kMargin) == 0.0;
  }
  const bool ok = tma_max <= 1e-9 && focal_gap <= 1e-9 && hinge_zero;
  return {ok, fmt("B=1 TMA max %.1e, gamma=0 focal vs CE %.1e (tol 1e-9), inactive hinge %s", tma_max, focal_gap,
                  hinge_zero ? "exactly 0" : "nonzero")};
}

// ---- 3 ----------------------------------------------------------------------------

// Anchor row i's T_e-positive term, with T_m and M as the other positives.
double te_term(const Tensor<double>& a, const Tensor<double>& te, const Tensor<double>& tm, const Tensor<double>& m, std::size_t i) {
  Graph<double> g(false);
  Var terms = exclusive_nce_terms(g, g.constant(a), {g.constant(te), g.constant(tm), g.constant(m)}, 0.05);
  return g.value(terms).at(i, 0);
}

Verdict exclusion_property() {
  Rng rng(0xACC3, 0);
  double max_change = 0, max_grad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 + rng.below(7), d = 2 + rng.below(8);
    auto a = checks::random_unit_rows(b, d, rng), te = checks::random_unit_rows(b, d, rng);
    auto tm = checks::random_unit_rows(b, d, rng), m = checks::random_unit_rows(b, d, rng);
    const std::size_t i = rng.below(b);
    const double base = te_term(a, te, tm, m, i);
    const double scale = std::pow(10.0, rng.uniform(-6, 3));
    auto tm2 = tm, m2 = m;
    for (std::size_t k = 0; k < d; ++k) {
      tm2.at(i, k) += rng.normal(0, scale);
      m2.at(i, k) += rng.normal(0, scale);
    }
    max_change = std::max({max_change, std::abs(te_term(a, te, tm2, m, i) - base), std::abs(te_term(a, te, tm, m2, i) - base)});

    Graph<double> g;
    Var vtm = g.input(tm), vm = g.input(m);
    Var terms = exclusive_nce_terms(g, g.constant(a), {g.constant(te), vtm, vm}, 0.05);
    std::vector<double> pick(b * 3, 0.0);
    pick[i * 3] = 1.0;
    g.backward(g.weighted_sum(terms, pick));
    for (std::size_t k = 0; k < d; ++k) max_grad = std::max({max_grad, std::abs(g.grad(vtm).at(i, k)), std::abs(g.grad(vm).at(i, k))});
  }
  const bool ok = max_change <= 1e-12 && max_grad == 0.0;
  return {ok, fmt("200 perturbations, max term change %.1e (tol 1e-12), max cross-gradient %.1e", max_change, max_grad)};
}

// ---- 4 ----------------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  auto rows = checks::loss_gradients(1e-4);
  const auto enc = checks::encoder_gradients(1e-3);
  const double secs = seconds_since(t0);
  const bool ok = checks::all_pass(rows) && checks::all_pass(enc) && secs < 300;
  return {ok, fmt("%zu loss checks %s; %zu model checks %s; %.1fs (limit 300s)", rows.size(), worst_of(rows).c_str(), enc.size(),
                  worst_of(enc).c_str(), secs)};
}

// ---- 5 ----------------------------------------------------------------------------

Verdict masking_invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  const Vocabulary vocab;
  const std::vector<std::string> pool = {"a",      "red", "square", "should", "will", "sliding", "the",  "calm",  "lake",
                                         "have",   "over", "swan",  "is",     "blue", "circle",  "in",   "green", "background",
                                         "rising", "a",   "black",  "falling"};
  std::size_t failures = 0, video_checked = 0, text_checked = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed, 0xACC5);
    const std::size_t rows = 2 + rng.below(6), cols = 2 + rng.below(6), frames = 1 + rng.below(8);
    const std::size_t s = rows * cols;
    const auto spec = make_video_mask(rows, cols, 0.2, rng);
    const std::size_t n = spec.spatial_indices.size();
    failures += n != round_count(0.2 * double(s));
    failures += std::set<std::size_t>(spec.spatial_indices.begin(), spec.spatial_indices.end()).size() != n;
    const auto flat = spec.patch_indices(frames);
    failures += flat.size() != n * frames;
    for (std::size_t f = 0; f < frames && flat.size() == n * frames; ++f)
      for (std::size_t k = 0; k < n; ++k) failures += flat[f * n + k] != f * s + spec.spatial_indices[k];
    ++video_checked;

    std::vector<std::string> words;
    const std::size_t len = 1 + rng.below(14);
    for (std::size_t i = 0; i < len; ++i) words.push_back(pool[rng.below(pool.size())]);
    const auto text = vocab.tokenize(words, 16);
    std::size_t eligible = 0;
    for (std::size_t i = 0; i < text.size(); ++i)
      eligible += text.ids[i] != Vocabulary::kPad && text.ids[i] != Vocabulary::kCls &&
                  (text.tags[i] == PosTag::kNoun || text.tags[i] == PosTag::kVerb || text.tags[i] == PosTag::kAdj);
    if (eligible == 0) {
      bool threw = false;
      try {
        make_text_mask(text, 0.3, rng);
      } catch (const NoEligibleTokens&) {
        threw = true;
      }
      failures += !threw;
      continue;
    }
    const auto tm = make_text_mask(text, 0.3, rng);
    failures += tm.positions.size() != std::max<std::size_t>(1, round_count(0.3 * double(eligible)));
    for (std::size_t p : tm.positions)
      failures += text.tags[p] == PosTag::kAux || text.ids[p] == Vocabulary::kCls || text.ids[p] == Vocabulary::kPad;
    ++text_checked;
  }
  const auto swan = vocab.tokenize("a black swan swimming in a calm lake");
  Rng rng(0, 0xACC5);
  const auto swan_mask = make_text_mask(swan, 0.3, rng);
  bool swan_ok = swan_mask.positions.size() == 2;
  for (std::size_t p : swan_mask.positions) swan_ok &= swan.tags[p] == PosTag::kNoun || swan.tags[p] == PosTag::kVerb || swan.tags[p] == PosTag::kAdj;
  std::string masked;
  for (std::size_t p : swan_mask.positions) masked += (masked.empty() ? "" : ",") + vocab.word(swan.ids[p]);
  const double secs = seconds_since(t0);
  const bool ok = failures == 0 && swan_ok && secs < 60;
  return {ok, fmt("1000 seeds (%zu video, %zu text masks), %zu violations, swan sentence masks %zu words {%s}, %.1fs", video_checked,
                  text_checked, failures, swan_mask.positions.size(), masked.c_str(), secs)};
}

// ---- 6 ----------------------------------------------------------------------------

Verdict metric_correctness() {
  std::size_t bad = 0;
  for (const auto& f : {trialign::testing::staircase(), trialign::testing::identity_dominant(), trialign::testing::all_ties(),
                        trialign::testing::wide()}) {
    const auto m = retrieval_metrics(f.s, f.gt);
    bad += m.ranks != f.ranks || m.r1 != f.r1 || m.r5 != f.r5 || m.r10 != f.r10 || m.median_rank != f.median_rank;
  }
  const auto stair = retrieval_metrics(trialign::testing::staircase().s, trialign::testing::staircase().gt);
  Rng rng(0xACC6, 0);
  std::size_t variant = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(12), m = n + rng.below(12);
    SimilarityMatrix s = SimilarityMatrix::matrix(n, m);
    for (auto& x : s.values()) x = rng.uniform(-1, 1);
    std::vector<std::size_t> gt(n);
    for (auto& g : gt) g = rng.below(m);
    const auto base = retrieval_metrics(s, gt).ranks;
    for (auto f : {+[](double x) { return std::exp(4 * x); }, +[](double x) { return x * x * x; }, +[](double x) { return 3 * x - 2; },
                   +[](double x) { return std::tanh(x); }}) {
      SimilarityMatrix t = s;
      for (auto& x : t.values()) x = f(x);
      variant += retrieval_metrics(t, gt).ranks != base;
    }
  }
  return {bad == 0 && variant == 0, fmt("4 hand-ranked matrices, %zu mismatches (staircase R@1 %.2f MedR %.1f); 800 monotone transforms, "
                                        "%zu rank changes",
                                        bad, stair.r1, stair.median_rank, variant)};
}

// ---- 7 ----------------------------------------------------------------------------

Verdict efficiency_counters() {
  const RunConfig cfg = checks::micro_config();
  const Corpus corpus = checks::micro_corpus(cfg, 30);
  const Vocabulary vocab;
  const Model<float> model(cfg.model, vocab.size(), 7);
  std::vector<TokenizedText> q;
  std::vector<VideoClip> v;
  for (std::size_t i = 0; i < 10; ++i) q.push_back(vocab.tokenize(corpus.scenes[i].caption));
  for (std::size_t j = 0; j < 20; ++j) v.push_back(render(corpus.scenes[j].render_spec()));
  const auto r = efficiency_probe(model, q, v, 5);
  const bool ok = r.dual.uni_modal_forwards == 30 && r.dual.dot_products == 200 && r.dual.fusion_forwards == 0 &&
                  r.cross.fusion_forwards == 200 && r.rescoring.fusion_forwards == 50;
  return {ok, fmt("N=10 M=20 k=5: dual %zu forwards + %zu dots, cross %zu fusion forwards, rescoring %zu", r.dual.uni_modal_forwards,
                  r.dual.dot_products, r.cross.fusion_forwards, r.rescoring.fusion_forwards)};
}

// ---- 8 ----------------------------------------------------------------------------

struct LearnabilityOptions {
  std::size_t seeds = 5, epochs = 6, n = 1344, side = 16, batch = 16;
};

RetrievalReport pretrain_and_evaluate(const RunConfig& cfg, const Corpus& corpus) {
  Session<float> s(cfg);
  const ClipSource clips;
  pretrain(s, corpus, clips, {});
  return evaluate_retrieval(s.model(), s.vocab(), corpus, Split::kTest, clips);
}

Verdict learnability(const LearnabilityOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t r10_wins = 0, r1_above = 0, queries = 0;
  double pos[2] = {0, 0}, margin[2] = {0, 0}, min_r1 = 1;
  for (std::uint64_t seed = 0; seed < o.seeds; ++seed) {
    RunConfig full;
    full.model.height = full.model.width = o.side;
    full.train.seed = seed;
    full.train.epochs = o.epochs;
    full.train.batch_size = o.batch;
    full.train.precision = "float32";
    RunConfig baseline = full;
    baseline.objective = {false, false, true, true, false};  // InfoNCE + classic MLM
    baseline.loss.gamma = 0;

    CorpusOptions co;
    co.n = o.n;
    co.seed = seed;
    co.frames = full.model.frames;
    co.height = co.width = o.side;
    const Corpus corpus = generate_corpus(co);

    const auto c = pretrain_and_evaluate(full, corpus);
    const auto b = pretrain_and_evaluate(baseline, corpus);
    queries = c.queries;
    const double chance = 1.0 / double(c.queries);
    r1_above += c.metrics.r1 >= 5 * chance;
    min_r1 = std::min(min_r1, c.metrics.r1);
    r10_wins += c.metrics.r10 >= b.metrics.r10;
    pos[0] += c.diagnostics.mean_positive / double(o.seeds);
    pos[1] += b.diagnostics.mean_positive / double(o.seeds);
    margin[0] += c.diagnostics.mean_margin / double(o.seeds);
    margin[1] += b.diagnostics.mean_margin / double(o.seeds);
    std::printf("       seed %llu  full: R@1 %.3f R@10 %.3f pos %.3f margin %.3f | baseline: R@1 %.3f R@10 %.3f pos %.3f margin %.3f\n",
                static_cast<unsigned long long>(seed), c.metrics.r1, c.metrics.r10, c.diagnostics.mean_positive, c.diagnostics.mean_margin,
                b.metrics.r1, b.metrics.r10, b.diagnostics.mean_positive, b.diagnostics.mean_margin);
    std::fflush(stdout);
  }
  const double secs = seconds_since(t0);
  const bool a = r1_above == o.seeds;
  const bool b_r10 = 2 * r10_wins > o.seeds;
  const bool b_sim = pos[0] > pos[1] && margin[0] > margin[1];
  const bool ok = a && b_r10 && b_sim && secs <= 1800;
  return {ok, fmt("(a) R@1 >= 5x chance (%.4f) in %zu/%zu seeds, min %.3f: %s; (b) R@10 >= baseline in %zu/%zu seeds: %s; "
                  "mean pos %.3f vs %.3f, margin %.3f vs %.3f: %s; %.0fs (limit 1800s)",
                  5.0 / double(queries), r1_above, o.seeds, min_r1, a ? "ok" : "no", r10_wins, o.seeds, b_r10 ? "ok" : "no", pos[0], pos[1],
                  margin[0], margin[1], b_sim ? "ok" : "no", secs)};
}

// ---- 9 ----------------------------------------------------------------------------

Verdict reproducibility() {
  RunConfig cfg = checks::micro_config();
  cfg.train.epochs = 3;
  const Corpus corpus = checks::micro_corpus(cfg, 24);
  const ClipSource clips;
  const fs::path dir = fs::temp_directory_path() / "trialign_acceptance_resume";
  fs::remove_all(dir);

  Session<double> full(cfg);
  LoopOptions opts;
  opts.out_dir = dir / "full";
  const auto full_run = pretrain(full, corpus, clips, opts);

  Session<double> first(cfg);
  opts.out_dir = dir / "split";
  opts.stop_after_steps = 13;
  pretrain(first, corpus, clips, opts);
  const Checkpoint saved = load_checkpoint(dir / "split" / kCheckpointFile);
  Session<double> second(saved.config());
  second.resume(saved);
  opts.stop_after_steps.reset();
  pretrain(second, corpus, clips, opts);
  const bool ckpt_same = io::read_file(dir / "full" / kCheckpointFile) == io::read_file(dir / "split" / kCheckpointFile);
  const bool log_same = io::read_file(dir / "full" / kMetricsFile) == io::read_file(dir / "split" / kMetricsFile);

  Session<double> again(cfg);
  const bool seeds_same = pretrain(again, corpus, clips, {}).metrics == full_run.metrics;
  fs::remove_all(dir);
  return {ckpt_same && log_same && seeds_same,
          fmt("interrupt at step 13 of %llu then resume: checkpoint %s, metrics log %s; same seed rerun log %s",
              static_cast<unsigned long long>(full_run.steps), ckpt_same ? "bit-identical" : "differs", log_same ? "identical" : "differs",
              seeds_same ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only, allow_fail;
  LearnabilityOptions learn;
  app.add_option("--only", only, "Run just these criteria")->check(CLI::Range(1, 9));
  app.add_option("--allow-fail", allow_fail, "Criteria whose failure does not change the exit status")->check(CLI::Range(1, 9));
  app.add_option("--learn-seeds", learn.seeds, "Seeds for the learnability comparison")->check(CLI::PositiveNumber);
  app.add_option("--learn-epochs", learn.epochs, "Pre-training epochs for the learnability comparison")->check(CLI::Range(2, 1000));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"oracle equivalence", oracle_equivalence},
      {"degenerate exactness", degenerate_exactness},
      {"exclusion property", exclusion_property},
      {"gradient suite", gradient_suite},
      {"masking invariants", masking_invariants},
      {"metric correctness", metric_correctness},
      {"efficiency counters", efficiency_counters},
      {"learnability", [&] { return learnability(learn); }},
      {"reproducibility", reproducibility},
  };
  int status = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = int(k) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const bool tolerated = std::find(allow_fail.begin(), allow_fail.end(), id) != allow_fail.end();
    std::printf("[%s] %d %s: %s%s\n", v.pass ? "PASS" : "FAIL", id, criteria[k].first, v.detail.c_str(),
                !v.pass && tolerated ? " (failure allowed by --allow-fail)" : "");
    std::fflush(stdout);
    if (!v.pass && !tolerated) status = 1;
  }
  return status;
}
