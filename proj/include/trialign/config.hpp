// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <filesystem>
#include <set>
#include <string>

#include "trialign/data.hpp"
#include "trialign/encoders.hpp"
#include "trialign/losses.hpp"
#include "trialign/optimizer.hpp"
#include "trialign/substrate/io.hpp"

namespace trialign {

/// Which objective terms are summed into the training loss.
struct ObjectiveConfig {
  bool tma = true;               // tri-modal alignment
  bool ranking = true;           // pair-wise ranking over masked pairs
  bool mlm = true;               // masked-token prediction on the fused stream
  bool infonce = false;          // symmetric InfoNCE on (V_e, T_e)
  bool semantic_masking = true;  // NOUN/VERB/ADJ masking instead of random tokens

  bool operator==(const ObjectiveConfig&) const = default;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::size_t warmup_epochs = 1;
  double lr = 3e-4;
  double weight_decay = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::string precision = "float32";

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string corpus_dir;
  std::string clip_source = "render";  // "render" or "files"
  std::string query_mode = "caption";  // "caption" or "paragraph"

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  LossHyper loss;
  ObjectiveConfig objective;
  MaskingConfig masking;
  TrainConfig train;
  DataConfig data;
  std::string vqa_mode = "open";

  /// The objective flags decide the text-masking policy.
  MaskingConfig effective_masking() const {
    MaskingConfig m = masking;
    m.text_policy = objective.semantic_masking ? TextMaskPolicy::kSemantic : TextMaskPolicy::kRandom;
    return m;
  }

  void validate() const {
    model.validate();
    loss.validate();
    masking.validate();
    if (!(objective.tma || objective.ranking || objective.mlm || objective.infonce)) throw InvalidArgument("objective: at least one term must be enabled");
    if (train.batch_size < 1) throw InvalidArgument("train.batch_size must be >= 1");
    if (train.epochs < 1) throw InvalidArgument("train.epochs must be >= 1");
    if (train.warmup_epochs >= train.epochs) throw InvalidArgument("train.warmup_epochs must be < train.epochs");
    if (!(train.lr > 0)) throw InvalidArgument("train.lr must be > 0");
    if (!(train.weight_decay >= 0)) throw InvalidArgument("train.weight_decay must be >= 0");
    if (!(train.beta1 >= 0 && train.beta1 < 1 && train.beta2 >= 0 && train.beta2 < 1)) throw InvalidArgument("train.beta1, train.beta2 must lie in [0, 1)");
    if (!(train.eps > 0)) throw InvalidArgument("train.eps must be > 0");
    if (train.precision != "float32" && train.precision != "float64") throw InvalidArgument("train.precision must be float32 or float64");
    if (data.clip_source != "render" && data.clip_source != "files") throw InvalidArgument("data.clip_source must be render or files");
    if (data.query_mode != "caption" && data.query_mode != "paragraph") throw InvalidArgument("data.query_mode must be caption or paragraph");
    parse_qa_mode(vqa_mode);
  }

  AdamWConfig adamw() const { return {train.beta1, train.beta2, train.eps, train.weight_decay}; }

  bool operator==(const RunConfig& o) const {
    return model == o.model && loss.tau == o.loss.tau && loss.margin == o.loss.margin && loss.gamma == o.loss.gamma &&
           loss.printed_mlm_form == o.loss.printed_mlm_form && objective == o.objective && masking.video_ratio == o.masking.video_ratio &&
           masking.text_ratio == o.masking.text_ratio && masking.block_video_mask == o.masking.block_video_mask && train == o.train &&
           data == o.data && vqa_mode == o.vqa_mode;
  }
};

inline json to_json(const RunConfig& c) {
  const auto& m = c.model;
  return {{"model",
           {{"dim", m.dim}, {"heads", m.heads}, {"video_layers", m.video_layers}, {"text_layers", m.text_layers},
            {"fusion_layers", m.fusion_layers}, {"ffn_mult", m.ffn_mult}, {"frames", m.frames}, {"height", m.height},
            {"width", m.width}, {"channels", m.channels}, {"patch", m.patch}, {"max_text_len", m.max_text_len},
            {"answer_classes", m.answer_classes}}},
          {"loss", {{"tau", c.loss.tau}, {"margin", c.loss.margin}, {"gamma", c.loss.gamma}, {"printed_mlm_form", c.loss.printed_mlm_form}}},
          {"objective",
           {{"tma", c.objective.tma}, {"ranking", c.objective.ranking}, {"mlm", c.objective.mlm}, {"infonce", c.objective.infonce},
            {"semantic_masking", c.objective.semantic_masking}}},
          {"masking", {{"video_ratio", c.masking.video_ratio}, {"text_ratio", c.masking.text_ratio}, {"block_video_mask", c.masking.block_video_mask}}},
          {"train",
           {{"batch_size", c.train.batch_size}, {"epochs", c.train.epochs}, {"warmup_epochs", c.train.warmup_epochs}, {"lr", c.train.lr},
            {"weight_decay", c.train.weight_decay}, {"beta1", c.train.beta1}, {"beta2", c.train.beta2}, {"eps", c.train.eps},
            {"seed", c.train.seed}, {"precision", c.train.precision}}},
          {"data", {{"corpus_dir", c.data.corpus_dir}, {"clip_source", c.data.clip_source}, {"query_mode", c.data.query_mode}}},
          {"vqa_mode", c.vqa_mode}};
}

namespace detail {

/// Reads `key` from `obj` into `out` when present, with a type check.
template <class V>
void read_key(const json& obj, const std::string& section, const char* key, V& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw InvalidArgument("config: " + section + key + " has the wrong type");
  }
}

inline void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw InvalidArgument("config: " + (section.empty() ? std::string("top level") : section) + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!ok.count(it.key())) throw InvalidArgument("config: unknown key '" + section + it.key() + "'");
}

}  // namespace detail

/// Overlays the keys present in `j` onto `base`; unknown keys are rejected.
inline RunConfig merge_config(RunConfig c, const json& j) {
  using detail::read_key;
  using detail::reject_unknown;
  reject_unknown(j, "", {"model", "loss", "objective", "masking", "train", "data", "vqa_mode"});
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, "model.", {"dim", "heads", "video_layers", "text_layers", "fusion_layers", "ffn_mult", "frames", "height", "width",
                                 "channels", "patch", "max_text_len", "answer_classes"});
    read_key(m, "model.", "dim", c.model.dim);
    read_key(m, "model.", "heads", c.model.heads);
    read_key(m, "model.", "video_layers", c.model.video_layers);
    read_key(m, "model.", "text_layers", c.model.text_layers);
    read_key(m, "model.", "fusion_layers", c.model.fusion_layers);
    read_key(m, "model.", "ffn_mult", c.model.ffn_mult);
    read_key(m, "model.", "frames", c.model.frames);
    read_key(m, "model.", "height", c.model.height);
    read_key(m, "model.", "width", c.model.width);
    read_key(m, "model.", "channels", c.model.channels);
    read_key(m, "model.", "patch", c.model.patch);
    read_key(m, "model.", "max_text_len", c.model.max_text_len);
    read_key(m, "model.", "answer_classes", c.model.answer_classes);
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    reject_unknown(l, "loss.", {"tau", "margin", "gamma", "printed_mlm_form"});
    read_key(l, "loss.", "tau", c.loss.tau);
    read_key(l, "loss.", "margin", c.loss.margin);
    read_key(l, "loss.", "gamma", c.loss.gamma);
    read_key(l, "loss.", "printed_mlm_form", c.loss.printed_mlm_form);
  }
  if (j.contains("objective")) {
    const json& o = j["objective"];
    reject_unknown(o, "objective.", {"tma", "ranking", "mlm", "infonce", "semantic_masking"});
    read_key(o, "objective.", "tma", c.objective.tma);
    read_key(o, "objective.", "ranking", c.objective.ranking);
    read_key(o, "objective.", "mlm", c.objective.mlm);
    read_key(o, "objective.", "infonce", c.objective.infonce);
    read_key(o, "objective.", "semantic_masking", c.objective.semantic_masking);
  }
  if (j.contains("masking")) {
    const json& m = j["masking"];
    reject_unknown(m, "masking.", {"video_ratio", "text_ratio", "block_video_mask"});
    read_key(m, "masking.", "video_ratio", c.masking.video_ratio);
    read_key(m, "masking.", "text_ratio", c.masking.text_ratio);
    read_key(m, "masking.", "block_video_mask", c.masking.block_video_mask);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, "train.", {"batch_size", "epochs", "warmup_epochs", "lr", "weight_decay", "beta1", "beta2", "eps", "seed", "precision"});
    read_key(t, "train.", "batch_size", c.train.batch_size);
    read_key(t, "train.", "epochs", c.train.epochs);
    read_key(t, "train.", "warmup_epochs", c.train.warmup_epochs);
    read_key(t, "train.", "lr", c.train.lr);
    read_key(t, "train.", "weight_decay", c.train.weight_decay);
    read_key(t, "train.", "beta1", c.train.beta1);
    read_key(t, "train.", "beta2", c.train.beta2);
    read_key(t, "train.", "eps", c.train.eps);
    read_key(t, "train.", "seed", c.train.seed);
    read_key(t, "train.", "precision", c.train.precision);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, "data.", {"corpus_dir", "clip_source", "query_mode"});
    read_key(d, "data.", "corpus_dir", c.data.corpus_dir);
    read_key(d, "data.", "clip_source", c.data.clip_source);
    read_key(d, "data.", "query_mode", c.data.query_mode);
  }
  read_key(j, "", "vqa_mode", c.vqa_mode);
  return c;
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c = merge_config(RunConfig{}, j);
  c.validate();
  return c;
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(what + ": " + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return config_from_json(parse_json_text(io::read_file(path), path.string()));
}

inline std::string config_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// FNV-1a over the canonical JSON of the configuration.
inline std::uint64_t config_digest(const RunConfig& c) { return io::fnv1a(to_json(c).dump()); }

}  // namespace trialign
