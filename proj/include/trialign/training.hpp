// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trialign/checkpoint.hpp"
#include "trialign/config.hpp"
#include "trialign/data.hpp"
#include "trialign/encoders.hpp"
#include "trialign/losses.hpp"
#include "trialign/optimizer.hpp"

namespace trialign {

// ---- objectives -----------------------------------------------------------------

struct ObjectiveVars {
  LossBreakdown parts;
  Var total;
};

namespace detail {

inline void check_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericalError(std::string(name) + " is not finite");
}

}  // namespace detail

/// Builds the enabled pre-training terms for one batch on `g`.
///
/// Per sample: V_e, T_e from the complete pair; V_m from the block-masked
/// clip; T_m from the masked caption; M_Vmf = fuse(V_m, T_e) and
/// M_Tmf = fuse(V_e, T_m), whose masked positions also feed the MLM head.
/// Samples without a text mask keep placeholder rows that every loss ignores.
template <class T>
ObjectiveVars pretrain_objective(Graph<T>& g, const Model<T>& model, const RawBatch& batch, const RunConfig& cfg) {
  const auto& obj = cfg.objective;
  const std::size_t b = batch.size();
  if (b == 0) throw InvalidArgument("pretrain_objective: empty batch");
  const bool need_vm = obj.tma || obj.ranking;
  const bool need_tm = obj.tma || obj.ranking || obj.mlm;
  const bool need_mvmf = obj.tma;
  const bool need_mtmf = obj.tma || obj.mlm;

  std::vector<Var> v_e, t_e, v_m, t_m, m_vmf, m_tmf, logits;
  std::vector<std::size_t> targets;
  RowPresence present(b, 1);
  bool any_absent = false;
  for (const auto& s : batch.samples) {
    auto ve = model.encode_video(g, *s.clip);
    auto te = model.encode_text(g, s.text);
    v_e.push_back(ve.pooled);
    t_e.push_back(te.pooled);
    std::optional<EncodedVars> vm;
    if (need_vm) {
      vm = model.encode_video(g, *s.clip, &s.video_mask);
      v_m.push_back(vm->pooled);
    }
    if (need_mvmf) m_vmf.push_back(model.fuse(g, *vm, te).pooled);
    if (need_tm && s.text_mask) {
      auto tm = model.encode_text(g, s.masked_text);
      t_m.push_back(tm.pooled);
      if (need_mtmf) {
        auto fused = model.fuse(g, ve, tm);
        m_tmf.push_back(fused.pooled);
        if (obj.mlm) {
          logits.push_back(model.mlm_logits(g, fused, s.text_mask->positions));
          for (TokenId id : s.text_mask->replaced_ids) targets.push_back(static_cast<std::size_t>(id));
        }
      }
    } else {
      present[t_e.size() - 1] = 0;
      any_absent = true;
      if (need_tm) t_m.push_back(te.pooled);
      if (need_mtmf) m_tmf.push_back(te.pooled);
    }
  }
  if (!any_absent) present.clear();

  const T tau = static_cast<T>(cfg.loss.tau);
  ObjectiveVars out;
  std::vector<Var> terms;
  BatchVars<T> bv;
  bv.v_e = g.concat_rows(v_e);
  bv.t_e = g.concat_rows(t_e);
  if (need_vm) bv.v_m = g.concat_rows(v_m);
  if (need_tm) bv.t_m = g.concat_rows(t_m);
  if (need_mvmf) bv.m_vmf = g.concat_rows(m_vmf);
  if (need_mtmf) bv.m_tmf = g.concat_rows(m_tmf);
  bv.masked_text_present = present;

  if (obj.tma) {
    auto tma = tma_total(g, bv, tau);
    out.parts.l_v = double(g.item(tma.l_v));
    out.parts.l_v_prime = double(g.item(tma.l_v_prime));
    out.parts.l_t = double(g.item(tma.l_t));
    out.parts.l_t_prime = double(g.item(tma.l_t_prime));
    out.parts.l_tma = double(g.item(tma.total));
    terms.push_back(tma.total);
  }
  if (obj.infonce) {
    Var l = symmetric_infonce(g, bv.v_e, bv.t_e, tau);
    out.parts.l_infonce = double(g.item(l));
    terms.push_back(l);
  }
  if (obj.ranking) {
    Var l = ranking_loss(g, paired_similarity(g, bv.v_e, bv.t_e), paired_similarity(g, bv.v_e, bv.t_m), paired_similarity(g, bv.v_m, bv.t_e),
                         tau, static_cast<T>(cfg.loss.margin), present);
    out.parts.l_rank = double(g.item(l));
    terms.push_back(l);
  }
  if (obj.mlm) {
    Var all = logits.empty() ? g.constant(Tensor<T>::matrix(0, model.vocab_size())) : g.concat_rows(logits);
    Var l = focal_mlm(g, all, targets, static_cast<T>(cfg.loss.gamma), cfg.loss.printed_mlm_form);
    out.parts.l_mlm = double(g.item(l));
    terms.push_back(l);
  }
  out.total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = g.add(out.total, terms[i]);
  detail::check_finite(out.parts.l_infonce, "L_infonce");
  out.parts.total = total_loss(out.parts.l_tma, out.parts.l_rank, out.parts.l_mlm) + out.parts.l_infonce;
  return out;
}

/// Symmetric InfoNCE on pooled (V_e, T_e) pairs; the retrieval fine-tuning loss.
template <class T>
ObjectiveVars retrieval_objective(Graph<T>& g, const Model<T>& model, const RawBatch& batch, const RunConfig& cfg) {
  if (batch.size() < 2) throw InvalidArgument("retrieval fine-tuning needs batch size >= 2 (a single pair has no negatives)");
  std::vector<Var> v, t;
  for (const auto& s : batch.samples) {
    v.push_back(model.encode_video(g, *s.clip).pooled);
    t.push_back(model.encode_text(g, s.text).pooled);
  }
  ObjectiveVars out;
  out.total = symmetric_infonce(g, g.concat_rows(v), g.concat_rows(t), static_cast<T>(cfg.loss.tau));
  out.parts.l_infonce = double(g.item(out.total));
  detail::check_finite(out.parts.l_infonce, "L_infonce");
  out.parts.total = out.parts.l_infonce;
  return out;
}

/// Tokens of a question, optionally followed by a candidate answer word.
inline TokenizedText qa_text(const Vocabulary& vocab, const QaRecord& q, std::optional<std::size_t> candidate = std::nullopt) {
  auto words = q.question;
  if (candidate) words.push_back(palette().at(*candidate).name);
  return vocab.tokenize(words);
}

/// Open-ended: answer-class logits [1 x classes]. Multiple-choice: one
/// scalar per candidate [1 x candidates].
template <class T>
Var qa_logits(Graph<T>& g, const Model<T>& model, const Vocabulary& vocab, const QaRecord& q, const VideoClip& clip) {
  auto video = model.encode_video(g, clip);
  if (q.mode == QaMode::kOpen) return model.vqa_logits(g, model.fuse(g, video, model.encode_text(g, qa_text(vocab, q))));
  if (q.candidates.empty()) throw InvalidArgument("multiple-choice record for scene " + std::to_string(q.scene_id) + " has no candidates");
  std::vector<Var> scores;
  for (std::size_t c : q.candidates) scores.push_back(model.candidate_score(g, model.fuse(g, video, model.encode_text(g, qa_text(vocab, q, c)))));
  return g.concat_cols(scores);
}

/// Mean cross-entropy over a batch of QA records.
template <class T>
ObjectiveVars qa_objective(Graph<T>& g, const Model<T>& model, const Vocabulary& vocab, const std::vector<const QaRecord*>& records,
                           const Corpus& corpus, const ClipSource& clips) {
  if (records.empty()) throw InvalidArgument("qa_objective: empty batch");
  Var sum;
  for (const QaRecord* q : records) {
    if (q->mode == QaMode::kOpen && q->answer >= model.config().answer_classes)
      throw InvalidArgument("unknown answer class " + std::to_string(q->answer) + " (model has " + std::to_string(model.config().answer_classes) + ")");
    Var logits = qa_logits(g, model, vocab, *q, clips.get(corpus.scene(q->scene_id)));
    const std::size_t target = q->mode == QaMode::kOpen ? q->answer : q->correct;
    Var ce = focal_mlm(g, logits, {target}, T(0));
    sum = sum.valid() ? g.add(sum, ce) : ce;
  }
  ObjectiveVars out;
  out.total = g.scale(sum, T(1) / T(records.size()));
  out.parts.total = double(g.item(out.total));
  detail::check_finite(out.parts.total, "L_ce");
  return out;
}

// ---- training session -------------------------------------------------------------

/// Model, optimizer and loop position; everything a checkpoint captures.
template <class T>
class Session {
 public:
  explicit Session(RunConfig cfg, std::string kind = "pretrain")
      : cfg_(std::move(cfg)),
        kind_(std::move(kind)),
        model_((cfg_.validate(), cfg_.model), vocab_.size(), cfg_.train.seed),
        opt_(model_.parameters(), cfg_.adamw()),
        epoch_rng_(cfg_.train.seed, stream_id({0xE90C, 0})) {}

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const RunConfig& config() const { return cfg_; }
  const std::string& kind() const { return kind_; }
  const Vocabulary& vocab() const { return vocab_; }
  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return opt_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t step_in_epoch() const { return step_in_epoch_; }
  Rng& epoch_rng() { return epoch_rng_; }

  void set_position(std::uint64_t step, std::uint64_t epoch, std::uint64_t step_in_epoch) {
    step_ = step;
    epoch_ = epoch;
    step_in_epoch_ = step_in_epoch;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config_json = to_json(cfg_).dump();
    c.config_digest = config_digest(cfg_);
    c.kind = kind_;
    c.step = step_;
    c.epoch = epoch_;
    c.step_in_epoch = step_in_epoch_;
    c.rng_states = {epoch_rng_.serialize()};
    c.params = store_parameters(model_.parameters());
    store_optimizer(c, model_.parameters(), opt_);
    return c;
  }

  /// Restores parameters, optimizer state, loop position and Rng states.
  void resume(const Checkpoint& c) {
    if (c.config_digest != config_digest(cfg_))
      throw InvalidArgument("checkpoint config digest does not match the run config; resume with the persisted config");
    if (c.kind != kind_) throw InvalidArgument("checkpoint kind '" + c.kind + "' cannot resume a '" + kind_ + "' run");
    restore_parameters(model_.parameters(), c.params);
    restore_optimizer(opt_, c);
    if (c.rng_states.size() != 1) throw InvalidArgument("checkpoint: expected one Rng state");
    epoch_rng_ = Rng::deserialize(c.rng_states[0]);
    set_position(c.step, c.epoch, c.step_in_epoch);
  }

  /// Loads only the parameter values (initialization for fine-tuning).
  void load_weights(const Checkpoint& c) { restore_parameters(model_.parameters(), c.params); }

 private:
  RunConfig cfg_;
  std::string kind_;
  Vocabulary vocab_;
  Model<T> model_;
  AdamW<T> opt_;
  Rng epoch_rng_;
  std::uint64_t step_ = 0, epoch_ = 0, step_in_epoch_ = 0;
};

struct LoopOptions {
  std::filesystem::path out_dir;                   // empty: no files written
  std::optional<std::uint64_t> stop_after_steps;  // interrupt after this global step count
  std::function<bool()> interrupted;               // polled before every step
  std::function<void(const json&)> on_metrics;
};

struct LoopResult {
  bool completed = false;
  std::uint64_t steps = 0;
  std::vector<json> metrics;
  std::optional<std::filesystem::path> checkpoint_path;
};

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kConfigFile = "config.json";

inline json metrics_record(std::uint64_t step, double lr, const LossBreakdown& p, const std::string& kind) {
  json j = {{"step", step}, {"lr", lr}};
  if (kind == "pretrain") {
    j["L_v"] = p.l_v;
    j["L_v_prime"] = p.l_v_prime;
    j["L_t"] = p.l_t;
    j["L_t_prime"] = p.l_t_prime;
    j["L_rank"] = p.l_rank;
    j["L_mlm"] = p.l_mlm;
    j["L_infonce"] = p.l_infonce;
  } else if (kind == "finetune-retrieval") {
    j["L_infonce"] = p.l_infonce;
  } else {
    j["L_ce"] = p.total;
  }
  j["total"] = p.total;
  return j;
}

namespace detail {

/// Keeps metrics lines with step < `keep_below`; used when resuming.
inline void truncate_metrics(const std::filesystem::path& path, std::uint64_t keep_below) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::uint64_t>() < keep_below) kept += line + "\n";
  }
  in.close();
  io::write_file_atomic(path, kept);
}

template <class T>
void check_gradients(const ParameterSet<T>& params) {
  for (const auto& p : params)
    if (p->trainable && !p->grad.all_finite()) throw NumericalError("gradient of parameter '" + p->name + "' is not finite");
}

}  // namespace detail

/// Epoch/step loop shared by pre-training and both fine-tuning protocols.
/// `objective(g, indices, epoch, step)` builds the loss of one batch.
/// Batches are the shuffled item order cut into floor(n / B) full batches.
template <class T>
LoopResult run_loop(Session<T>& session, std::size_t item_count, const LoopOptions& opts,
                    const std::function<ObjectiveVars(Graph<T>&, const std::vector<std::size_t>&, std::uint64_t, std::uint64_t)>& objective) {
  const auto& cfg = session.config();
  const std::size_t bs = cfg.train.batch_size;
  if (item_count < bs) throw InvalidArgument("training split has " + std::to_string(item_count) + " items, fewer than batch size " + std::to_string(bs));
  const std::uint64_t per_epoch = item_count / bs;
  const std::uint64_t total = per_epoch * cfg.train.epochs;
  const std::uint64_t warmup = per_epoch * cfg.train.warmup_epochs;

  LoopResult result;
  std::ofstream metrics_out;
  std::filesystem::path ckpt_path;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    io::write_file_atomic(opts.out_dir / kConfigFile, config_text(cfg));
    detail::truncate_metrics(opts.out_dir / kMetricsFile, session.step());
    metrics_out.open(opts.out_dir / kMetricsFile, std::ios::app);
    if (!metrics_out) throw IoError("cannot write metrics log in '" + opts.out_dir.string() + "'");
    ckpt_path = opts.out_dir / kCheckpointFile;
  }
  auto save = [&] {
    if (ckpt_path.empty()) return;
    save_checkpoint(ckpt_path, session.checkpoint());
    result.checkpoint_path = ckpt_path;
  };

  auto& params = session.model().parameters();
  while (session.epoch() < cfg.train.epochs) {
    Rng order_rng = session.epoch_rng();
    std::vector<std::size_t> order(item_count);
    for (std::size_t i = 0; i < item_count; ++i) order[i] = i;
    order_rng.shuffle(order.begin(), order.end());
    for (std::uint64_t s = session.step_in_epoch(); s < per_epoch; ++s) {
      if ((opts.stop_after_steps && session.step() >= *opts.stop_after_steps) || (opts.interrupted && opts.interrupted())) {
        save();
        result.steps = session.step();
        return result;
      }
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(s * bs), order.begin() + std::ptrdiff_t((s + 1) * bs));
      const double lr = warmup_cosine_lr(session.step(), warmup, total, cfg.train.lr);
      params.zero_grad();
      LossBreakdown parts;
      {
        Graph<T> g;
        ObjectiveVars o = objective(g, idx, session.epoch(), s);
        parts = o.parts;
        g.backward(o.total);
      }
      detail::check_gradients(params);
      session.optimizer().step(lr);
      json rec = metrics_record(session.step(), lr, parts, session.kind());
      if (metrics_out.is_open()) metrics_out << rec.dump() << "\n" << std::flush;
      if (opts.on_metrics) opts.on_metrics(rec);
      result.metrics.push_back(std::move(rec));
      session.set_position(session.step() + 1, session.epoch(), s + 1);
    }
    session.epoch_rng() = order_rng;
    session.set_position(session.step(), session.epoch() + 1, 0);
    save();
  }
  result.completed = true;
  result.steps = session.step();
  return result;
}

/// Pre-training on the train split.
template <class T>
LoopResult pretrain(Session<T>& session, const Corpus& corpus, const ClipSource& clips, const LoopOptions& opts = {}) {
  const auto& cfg = session.config();
  if ((cfg.objective.tma || cfg.objective.infonce) && cfg.train.batch_size < 2)
    throw InvalidArgument("train.batch_size must be >= 2 for contrastive objectives (B = 1 has no negatives)");
  const auto train = corpus.split(Split::kTrain);
  const auto masking = cfg.effective_masking();
  const bool paragraphs = cfg.data.query_mode == "paragraph";
  return run_loop<T>(session, train.size(), opts, [&](Graph<T>& g, const std::vector<std::size_t>& idx, std::uint64_t epoch, std::uint64_t step) {
    std::vector<const SceneRecord*> slice;
    for (std::size_t i : idx) slice.push_back(train[i]);
    RawBatch batch = make_batch(slice, session.vocab(), cfg.model, masking, clips, cfg.train.seed, epoch, step, paragraphs);
    return pretrain_objective(g, session.model(), batch, cfg);
  });
}

/// Contrastive fine-tuning of the uni-modal encoders and their projection
/// heads; the fusion encoder and task heads stay frozen.
template <class T>
LoopResult finetune_retrieval(Session<T>& session, const Corpus& corpus, const ClipSource& clips, const LoopOptions& opts = {}) {
  const auto& cfg = session.config();
  if (cfg.train.batch_size < 2) throw InvalidArgument("train.batch_size must be >= 2 for retrieval fine-tuning (B = 1 has no negatives)");
  session.model().parameters().set_trainable_prefixes({"video.", "text."});
  const auto train = corpus.split(Split::kTrain);
  const auto masking = cfg.effective_masking();
  const bool paragraphs = cfg.data.query_mode == "paragraph";
  return run_loop<T>(session, train.size(), opts, [&](Graph<T>& g, const std::vector<std::size_t>& idx, std::uint64_t epoch, std::uint64_t step) {
    std::vector<const SceneRecord*> slice;
    for (std::size_t i : idx) slice.push_back(train[i]);
    RawBatch batch = make_batch(slice, session.vocab(), cfg.model, masking, clips, cfg.train.seed, epoch, step, paragraphs);
    return retrieval_objective(g, session.model(), batch, cfg);
  });
}

/// End-to-end QA fine-tuning with cross-entropy over answer classes
/// (open-ended) or candidates (multiple-choice).
template <class T>
LoopResult finetune_vqa(Session<T>& session, const Corpus& corpus, const ClipSource& clips, QaMode mode, const LoopOptions& opts = {}) {
  session.model().parameters().set_all_trainable();
  const auto records = corpus.qa_split(Split::kTrain, mode);
  for (const QaRecord* q : records)
    if (q->answer >= session.model().config().answer_classes) throw InvalidArgument("unknown answer class " + std::to_string(q->answer));
  return run_loop<T>(session, records.size(), opts, [&](Graph<T>& g, const std::vector<std::size_t>& idx, std::uint64_t, std::uint64_t) {
    std::vector<const QaRecord*> batch;
    for (std::size_t i : idx) batch.push_back(records[i]);
    return qa_objective(g, session.model(), session.vocab(), batch, corpus, clips);
  });
}

}  // namespace trialign
