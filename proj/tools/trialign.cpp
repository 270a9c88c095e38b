// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: corpus generation, pre-training, fine-tuning,
// evaluation and the self-check suites.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "trialign/trialign.hpp"

namespace fs = std::filesystem;
using namespace trialign;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

/// Thrown for failed checks; maps to the numerical-failure exit code.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
  return code;
}

// ---- configuration ---------------------------------------------------------------

struct ConfigFlags {
  std::string config_path;
  std::string corpus;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::vector<std::string> sets;  // key.path=value, value parsed as JSON (bare strings allowed)
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--corpus", f.corpus, "corpus directory (overrides data.corpus_dir)");
  cmd->add_option("--epochs", f.epochs, "overrides train.epochs");
  cmd->add_option("--batch-size", f.batch_size, "overrides train.batch_size");
  cmd->add_option("--lr", f.lr, "overrides train.lr");
  cmd->add_option("--seed", f.seed, "overrides train.seed");
  cmd->add_option("--precision", f.precision, "overrides train.precision")->check(CLI::IsMember({"float32", "float64"}));
  cmd->add_option("--set", f.sets, "override any key, e.g. --set loss.gamma=1.5 (repeatable)");
}

json parse_set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects key.path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json out = json::object();
  json* node = &out;
  std::size_t start = 0;
  for (std::size_t dot; (dot = path.find('.', start)) != std::string::npos; start = dot + 1) node = &(*node)[path.substr(start, dot - start)];
  (*node)[path.substr(start)] = value;
  return out;
}

/// Defaults, then `base` (a file or a checkpoint's config), then flags.
RunConfig resolve_config(const ConfigFlags& f, std::optional<RunConfig> base = std::nullopt) {
  RunConfig c = base.value_or(RunConfig{});
  if (!f.config_path.empty()) c = merge_config(c, parse_json_text(io::read_file(f.config_path), f.config_path));
  for (const auto& s : f.sets) c = merge_config(c, parse_set(s));
  if (!f.corpus.empty()) c.data.corpus_dir = f.corpus;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.lr) c.train.lr = *f.lr;
  if (f.seed) c.train.seed = *f.seed;
  if (!f.precision.empty()) c.train.precision = f.precision;
  c.validate();
  return c;
}

Corpus load_corpus(const RunConfig& c) {
  if (c.data.corpus_dir.empty()) throw InvalidArgument("no corpus: set data.corpus_dir or pass --corpus (create one with gen-data)");
  if (!fs::exists(fs::path(c.data.corpus_dir) / CorpusFiles::kManifest))
    throw IoError("corpus directory '" + c.data.corpus_dir + "' has no " + CorpusFiles::kManifest);
  return read_corpus(c.data.corpus_dir);
}

ClipSource clip_source(const RunConfig& c) { return c.data.clip_source == "files" ? ClipSource(c.data.corpus_dir) : ClipSource(); }

// ---- training commands -------------------------------------------------------------

struct TrainFlags {
  ConfigFlags config;
  std::string out;
  std::string init;
  std::string mode;
  bool resume = false;
  std::optional<std::uint64_t> stop_after;
  bool quiet = false;
};

LoopOptions loop_options(const TrainFlags& f) {
  LoopOptions opts;
  opts.out_dir = f.out;
  opts.stop_after_steps = f.stop_after;
  opts.interrupted = [] { return g_interrupted.load(); };
  if (!f.quiet)
    opts.on_metrics = [](const json& rec) {
      const auto step = rec.at("step").get<std::uint64_t>();
      if (step % 10 == 0) std::fprintf(stderr, "step %6llu  lr %.3e  total %.5f\n", (unsigned long long)step, rec.at("lr").get<double>(), rec.at("total").get<double>());
    };
  return opts;
}

void report(const LoopResult& r, const fs::path& out) {
  json summary = {{"completed", r.completed}, {"steps", r.steps}, {"out", out.string()}};
  if (r.checkpoint_path) summary["checkpoint"] = r.checkpoint_path->string();
  if (!r.metrics.empty()) summary["final_total"] = r.metrics.back().at("total");
  std::cout << summary.dump() << std::endl;
}

template <class T>
LoopResult train_with(const RunConfig& cfg, const std::string& kind, const TrainFlags& f, const std::optional<Checkpoint>& resume_from,
                      const std::optional<Checkpoint>& init) {
  Session<T> session(cfg, kind);
  if (resume_from)
    session.resume(*resume_from);
  else if (init)
    session.load_weights(*init);
  const Corpus corpus = load_corpus(cfg);
  const ClipSource clips = clip_source(cfg);
  const auto opts = loop_options(f);
  if (kind == "pretrain") return pretrain(session, corpus, clips, opts);
  if (kind == "finetune-retrieval") return finetune_retrieval(session, corpus, clips, opts);
  return finetune_vqa(session, corpus, clips, parse_qa_mode(cfg.vqa_mode), opts);
}

int run_training(const std::string& kind, TrainFlags& f) {
  const fs::path out = f.out;
  const fs::path ckpt_path = out / kCheckpointFile;
  std::optional<Checkpoint> resume_from, init;
  RunConfig cfg;
  if (f.resume && fs::exists(ckpt_path)) {
    resume_from = load_checkpoint(ckpt_path);
    // a resumed run always continues under its persisted configuration
    cfg = resume_from->config();
    if (!f.config.config_path.empty() || !f.config.sets.empty()) {
      const RunConfig requested = resolve_config(f.config, cfg);
      if (!(requested == cfg)) throw InvalidArgument("--resume: the given configuration differs from the one persisted in " + ckpt_path.string());
    }
  } else {
    if (!f.init.empty()) init = load_checkpoint(f.init);
    cfg = resolve_config(f.config, init ? std::optional<RunConfig>(init->config()) : std::nullopt);
    if (!f.mode.empty()) {
      parse_qa_mode(f.mode);
      cfg.vqa_mode = f.mode;
    }
    if (fs::exists(ckpt_path) && !f.resume)
      throw InvalidArgument("output directory '" + out.string() + "' already holds a checkpoint; pass --resume or choose another --out");
  }
  const LoopResult r = cfg.train.precision == "float64" ? train_with<double>(cfg, kind, f, resume_from, init)
                                                        : train_with<float>(cfg, kind, f, resume_from, init);
  report(r, out);
  return 0;
}

// ---- evaluation commands ----------------------------------------------------------

struct EvalFlags {
  std::string ckpt;
  std::string split = "test";
  std::string mode;
  std::string corpus;
  std::string out;
};

RunConfig eval_config(const Checkpoint& c, const EvalFlags& f) {
  RunConfig cfg = c.config();
  if (!f.corpus.empty()) cfg.data.corpus_dir = f.corpus;
  return cfg;
}

void emit(const json& rec, const std::string& text, const EvalFlags& f, const char* file) {
  std::cout << text << rec.dump() << std::endl;
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    io::write_file_atomic(fs::path(f.out) / file, rec.dump() + "\n");
  }
}

template <class T>
int eval_retrieval_with(const Checkpoint& ckpt, const EvalFlags& f) {
  const RunConfig cfg = eval_config(ckpt, f);
  Session<T> session(cfg, ckpt.kind);
  session.load_weights(ckpt);
  const Corpus corpus = load_corpus(cfg);
  const auto rep = evaluate_retrieval(session.model(), session.vocab(), corpus, parse_split(f.split), clip_source(cfg), cfg.data.query_mode == "paragraph");
  emit(to_json(rep, f.split), retrieval_table(rep, f.split), f, "retrieval_report.jsonl");
  return 0;
}

template <class T>
int eval_vqa_with(const Checkpoint& ckpt, const EvalFlags& f) {
  const RunConfig cfg = eval_config(ckpt, f);
  Session<T> session(cfg, ckpt.kind);
  session.load_weights(ckpt);
  const Corpus corpus = load_corpus(cfg);
  const QaMode mode = parse_qa_mode(f.mode.empty() ? cfg.vqa_mode : f.mode);
  const auto rep = evaluate_vqa(session.model(), session.vocab(), corpus, parse_split(f.split), mode, clip_source(cfg));
  const json rec = {{"split", f.split}, {"mode", qa_mode_name(mode)}, {"questions", rep.questions}, {"accuracy", rep.accuracy},
                    {"majority_baseline", rep.majority_baseline}};
  char buf[256];
  std::snprintf(buf, sizeof(buf), "split      mode  questions  accuracy  majority\n%-10s %-5s %-10zu %-9.4f %.4f\n", f.split.c_str(),
                qa_mode_name(mode), rep.questions, rep.accuracy, rep.majority_baseline);
  emit(rec, buf, f, "vqa_report.jsonl");
  return 0;
}

template <class Fn>
int dispatch_precision(const Checkpoint& ckpt, Fn&& fn) {
  return ckpt.config().train.precision == "float64" ? fn(double{}) : fn(float{});
}

// ---- self checks ------------------------------------------------------------------

int print_checks(const std::vector<checks::CheckRow>& rows, const char* header) {
  std::cout << checks::format_rows(rows, header);
  if (!checks::all_pass(rows)) throw CheckFailed("one or more checks exceeded their tolerance");
  return 0;
}

int efficiency(std::size_t n, std::size_t m, std::size_t k, const ConfigFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  CorpusOptions opt;
  opt.n = std::max(n, m);
  opt.seed = cfg.train.seed;
  opt.frames = cfg.model.frames;
  opt.height = cfg.model.height;
  opt.width = cfg.model.width;
  const Corpus corpus = generate_corpus(opt);
  const Vocabulary vocab;
  Model<float> model(cfg.model, vocab.size(), cfg.train.seed);
  std::vector<TokenizedText> queries;
  std::vector<VideoClip> videos;
  for (std::size_t i = 0; i < n; ++i) queries.push_back(vocab.tokenize(corpus.scenes[i].caption));
  for (std::size_t j = 0; j < m; ++j) videos.push_back(render(corpus.scenes[j].render_spec()));
  const auto rep = efficiency_probe(model, queries, videos, k);
  std::cout << efficiency_table(rep) << to_json(rep).dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  CLI::App app{"trialign: tri-modal video-text alignment on a synthetic corpus"};
  app.require_subcommand(1);

  std::size_t gen_n = 1000;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  CorpusOptions gen_opt;
  bool gen_no_clips = false;
  auto* gen = app.add_subcommand("gen-data", "generate a corpus: manifest.jsonl, qa.jsonl, clips/");
  gen->add_option("--n", gen_n, "number of scenes")->required();
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--frames", gen_opt.frames, "frames per clip");
  gen->add_option("--height", gen_opt.height, "frame height");
  gen->add_option("--width", gen_opt.width, "frame width");
  gen->add_option("--image-fraction", gen_opt.image_fraction, "share of still scenes stored as one-frame images");
  gen->add_flag("--no-clips", gen_no_clips, "write manifests only; clips are then rendered on the fly");

  TrainFlags pre_f, ret_f, vqa_f;
  auto add_train = [&](const char* name, const char* help, TrainFlags& f, bool needs_init) {
    auto* cmd = app.add_subcommand(name, help);
    add_config_flags(cmd, f.config);
    cmd->add_option("--out", f.out, "output directory")->required();
    if (needs_init) cmd->add_option("--init", f.init, "checkpoint to initialize from")->check(CLI::ExistingFile);
    cmd->add_flag("--resume", f.resume, "continue from <out>/checkpoint.bin when present");
    cmd->add_option("--stop-after", f.stop_after, "stop (and checkpoint) once this many global steps are done");
    cmd->add_flag("--quiet", f.quiet, "no progress lines on stderr");
    return cmd;
  };
  auto* pre = add_train("pretrain", "pre-train with the configured objective", pre_f, false);
  auto* ret = add_train("finetune-retrieval", "contrastive fine-tuning of the uni-modal encoders", ret_f, true);
  auto* vqa = add_train("finetune-vqa", "end-to-end QA fine-tuning", vqa_f, true);
  vqa->add_option("--mode", vqa_f.mode, "open or mc")->check(CLI::IsMember({"open", "mc"}));

  EvalFlags er_f, ev_f;
  auto add_eval = [&](const char* name, const char* help, EvalFlags& f) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--ckpt", f.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--split", f.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--corpus", f.corpus, "corpus directory (overrides the checkpoint's data.corpus_dir)");
    cmd->add_option("--out", f.out, "also write the JSON report under this directory");
    return cmd;
  };
  auto* eval_ret = add_eval("eval-retrieval", "text-to-video retrieval metrics and similarity diagnostics", er_f);
  auto* eval_vqa = add_eval("eval-vqa", "QA accuracy against the majority-class baseline", ev_f);
  eval_vqa->add_option("--mode", ev_f.mode, "open or mc (default: the checkpoint's vqa_mode)")->check(CLI::IsMember({"open", "mc"}));

  std::string component = "all";
  auto* gc = app.add_subcommand("grad-check", "central-difference gradient checks");
  gc->add_option("--component", component, "losses, encoders or all")->check(CLI::IsMember({"losses", "encoders", "all"}));

  std::size_t trials = 100;
  auto* oc = app.add_subcommand("oracle-check", "fast losses versus nested-loop float64 references");
  oc->add_option("--trials", trials, "random batches per batch size")->check(CLI::PositiveNumber);

  std::size_t eff_n = 10, eff_m = 20, eff_k = 5;
  ConfigFlags eff_cfg;
  auto* eff = app.add_subcommand("efficiency", "encoder-forward and dot-product counts of the retrieval paths");
  eff->add_option("--n", eff_n, "text queries")->check(CLI::PositiveNumber);
  eff->add_option("--m", eff_m, "videos")->check(CLI::PositiveNumber);
  eff->add_option("--k", eff_k, "rescoring depth");
  eff->add_option("--config", eff_cfg.config_path, "JSON run configuration (model geometry)")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 1);
  }

  try {
    if (*gen) {
      gen_opt.n = gen_n;
      gen_opt.seed = gen_seed;
      const Corpus corpus = generate_corpus(gen_opt);
      fs::create_directories(gen_out);
      write_corpus(gen_out, corpus, !gen_no_clips);
      std::cout << json{{"out", gen_out}, {"scenes", corpus.scenes.size()}, {"qa", corpus.qa.size()},
                        {"train", corpus.split(Split::kTrain).size()}, {"val", corpus.split(Split::kVal).size()},
                        {"test", corpus.split(Split::kTest).size()}}.dump()
                << std::endl;
      return 0;
    }
    if (*pre) return run_training("pretrain", pre_f);
    if (*ret) return run_training("finetune-retrieval", ret_f);
    if (*vqa) return run_training("finetune-vqa", vqa_f);
    if (*eval_ret) {
      const Checkpoint ckpt = load_checkpoint(er_f.ckpt);
      return dispatch_precision(ckpt, [&](auto t) { return eval_retrieval_with<decltype(t)>(ckpt, er_f); });
    }
    if (*eval_vqa) {
      const Checkpoint ckpt = load_checkpoint(ev_f.ckpt);
      return dispatch_precision(ckpt, [&](auto t) { return eval_vqa_with<decltype(t)>(ckpt, ev_f); });
    }
    if (*gc) {
      std::vector<checks::CheckRow> rows;
      if (component != "encoders") rows = checks::loss_gradients();
      if (component != "losses")
        for (auto& r : checks::encoder_gradients()) rows.push_back(std::move(r));
      return print_checks(rows, "max_rel_err");
    }
    if (*oc) {
      const auto s = checks::oracle_agreement(trials);
      std::cout << s.trials << " random batches at B in {2, 4, 8}\n";
      return print_checks(s.rows, "max_abs_dev");
    }
    if (*eff) return efficiency(eff_n, eff_m, eff_k, eff_cfg);
  } catch (const NumericalError& e) {
    return fail("numerical", e.what(), 2);
  } catch (const CheckFailed& e) {
    return fail("check_failed", e.what(), 2);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 1);
  } catch (const InvalidArgument& e) {
    return fail("invalid_argument", e.what(), 1);
  } catch (const IoError& e) {
    return fail("io", e.what(), 1);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("io", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
