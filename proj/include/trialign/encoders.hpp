// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/masking.hpp"
#include "trialign/substrate/graph.hpp"
#include "trialign/substrate/parameters.hpp"
#include "trialign/substrate/rng.hpp"
#include "trialign/text.hpp"

namespace trialign {

/// Geometry and widths of the three-encoder model.
struct ModelConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t video_layers = 2;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t ffn_mult = 4;
  std::size_t frames = 4;  // maximum frames per clip; a one-frame clip is an image
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t max_text_len = 16;
  std::size_t answer_classes = 8;

  std::size_t grid_rows() const { return height / patch; }
  std::size_t grid_cols() const { return width / patch; }
  std::size_t spatial_patches() const { return grid_rows() * grid_cols(); }
  std::size_t patch_width() const { return patch * patch * channels; }

  void validate() const {
    require(dim > 0 && heads > 0 && dim % heads == 0, "model.dim must be a positive multiple of model.heads");
    require(patch > 0 && height % patch == 0, "model.height must be divisible by model.patch");
    require(width % patch == 0, "model.width must be divisible by model.patch");
    require(frames >= 1, "model.frames must be >= 1");
    require(channels >= 1, "model.channels must be >= 1");
    require(max_text_len >= 2, "model.max_text_len must be >= 2");
    require(ffn_mult >= 1, "model.ffn_mult must be >= 1");
    require(answer_classes >= 1, "model.answer_classes must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Frames x height x width x channels, values in [0, 1].
struct VideoClip {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  float& at(std::size_t f, std::size_t y, std::size_t x, std::size_t c) {
    return pixels[((f * height + y) * width + x) * channels + c];
  }
  float at(std::size_t f, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[((f * height + y) * width + x) * channels + c];
  }
  bool operator==(const VideoClip&) const = default;
};

/// Token sequence plus unit-norm pooled projection, as plain tensors.
template <class T>
struct EmbeddingSequence {
  Tensor<T> tokens;                  // [n x D]
  Tensor<T> pooled;                  // [1 x D], unit norm
  std::vector<std::uint8_t> valid;   // attention key mask per token
};

template <class T>
struct FusedSequence {
  Tensor<T> tokens;  // [(K + L) x D]
  Tensor<T> pooled;  // [1 x D] projection of the [CLS] slot, unit norm
  std::size_t video_tokens = 0;
};

/// Graph-side counterparts used during training.
struct EncodedVars {
  Var tokens;
  Var pooled;
  std::vector<std::uint8_t> valid;
};

struct FusedVars {
  Var tokens;
  Var cls;     // raw fused [CLS] output [1 x D]
  Var pooled;  // unit-norm projection of cls
  std::size_t video_tokens = 0;
};

/// Forward-call counters used by the efficiency harness.
struct EncoderCounters {
  std::size_t video_forwards = 0;
  std::size_t text_forwards = 0;
  std::size_t fusion_forwards = 0;
  std::size_t uni_modal() const { return video_forwards + text_forwards; }
};

namespace layers {

template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Linear create(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    Linear l;
    l.weight = &ps.add_normal(name + ".w", {in, out}, 1.0 / std::sqrt(double(in)), rng);
    if (with_bias) l.bias = &ps.add_constant(name + ".b", {1, out}, T(0));
    return l;
  }

  Var operator()(Graph<T>& g, Var x) const {
    Var y = g.matmul(x, g.param(*weight));
    return bias ? g.add_row(y, g.param(*bias)) : y;
  }
};

template <class T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static LayerNorm create(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
    return {&ps.add_constant(name + ".g", {1, dim}, T(1)), &ps.add_constant(name + ".b", {1, dim}, T(0))};
  }

  Var operator()(Graph<T>& g, Var x) const { return g.layer_norm(x, g.param(*gain), g.param(*bias)); }
};

/// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
template <class T>
struct Block {
  LayerNorm<T> ln1, ln2;
  Linear<T> q, k, v, out, fc1, fc2;
  std::size_t heads = 1;

  static Block create(ParameterSet<T>& ps, const std::string& name, std::size_t dim, std::size_t heads, std::size_t ffn_mult, Rng& rng) {
    Block b;
    b.heads = heads;
    b.ln1 = LayerNorm<T>::create(ps, name + ".ln1", dim);
    b.q = Linear<T>::create(ps, name + ".attn.q", dim, dim, rng);
    b.k = Linear<T>::create(ps, name + ".attn.k", dim, dim, rng);
    b.v = Linear<T>::create(ps, name + ".attn.v", dim, dim, rng);
    b.out = Linear<T>::create(ps, name + ".attn.out", dim, dim, rng);
    b.ln2 = LayerNorm<T>::create(ps, name + ".ln2", dim);
    b.fc1 = Linear<T>::create(ps, name + ".ffn.fc1", dim, dim * ffn_mult, rng);
    b.fc2 = Linear<T>::create(ps, name + ".ffn.fc2", dim * ffn_mult, dim, rng);
    return b;
  }

  Var operator()(Graph<T>& g, Var x, const std::vector<std::uint8_t>& key_valid) const {
    Var h = ln1(g, x);
    Var a = g.attention(q(g, h), k(g, h), v(g, h), heads, key_valid);
    x = g.add(x, out(g, a));
    Var f = fc2(g, g.gelu(fc1(g, ln2(g, x))));
    return g.add(x, f);
  }
};

template <class T>
struct Stack {
  std::vector<Block<T>> blocks;
  LayerNorm<T> final_norm;

  static Stack create(ParameterSet<T>& ps, const std::string& name, std::size_t depth, const ModelConfig& cfg, Rng& rng) {
    Stack s;
    for (std::size_t i = 0; i < depth; ++i)
      s.blocks.push_back(Block<T>::create(ps, name + ".block" + std::to_string(i), cfg.dim, cfg.heads, cfg.ffn_mult, rng));
    s.final_norm = LayerNorm<T>::create(ps, name + ".ln_f", cfg.dim);
    return s;
  }

  Var operator()(Graph<T>& g, Var x, const std::vector<std::uint8_t>& key_valid) const {
    for (const auto& b : blocks) x = b(g, x, key_valid);
    return final_norm(g, x);
  }
};

}  // namespace layers

/// Video encoder, text encoder and fusion encoder with their pooled
/// projections, plus the task heads (masked-token prediction, open-ended and
/// multiple-choice QA).
template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t seed) : cfg_(cfg), vocab_size_(vocab_size) {
    cfg_.validate();
    require(vocab_size > 3, "vocabulary too small");
    Rng rng(seed, stream_id({0x1417, 0}));
    const std::size_t d = cfg_.dim;
    video_.patch = layers::Linear<T>::create(params_, "video.patch", cfg_.patch_width(), d, rng);
    video_.pos_space = &params_.add_normal("video.pos_space", {cfg_.spatial_patches(), d}, 0.02, rng);
    video_.pos_time = &params_.add_normal("video.pos_time", {cfg_.frames, d}, 0.02, rng);
    video_.mask_token = &params_.add_normal("video.mask_token", {1, d}, 0.02, rng);
    video_.stack = layers::Stack<T>::create(params_, "video", cfg_.video_layers, cfg_, rng);
    video_.proj = layers::Linear<T>::create(params_, "video.proj", d, d, rng, false);

    text_.tokens = &params_.add_normal("text.tok", {vocab_size, d}, 0.02, rng);
    text_.pos = &params_.add_normal("text.pos", {cfg_.max_text_len, d}, 0.02, rng);
    text_.stack = layers::Stack<T>::create(params_, "text", cfg_.text_layers, cfg_, rng);
    text_.proj = layers::Linear<T>::create(params_, "text.proj", d, d, rng, false);

    fusion_.stack = layers::Stack<T>::create(params_, "fusion", cfg_.fusion_layers, cfg_, rng);
    fusion_.proj = layers::Linear<T>::create(params_, "fusion.proj", d, d, rng, false);

    mlm_ = layers::Linear<T>::create(params_, "head.mlm", d, vocab_size, rng);
    vqa_hidden_ = layers::Linear<T>::create(params_, "head.vqa.fc1", d, d, rng);
    vqa_out_ = layers::Linear<T>::create(params_, "head.vqa.fc2", d, cfg_.answer_classes, rng);
    mc_hidden_ = layers::Linear<T>::create(params_, "head.mc.fc1", d, d, rng);
    mc_out_ = layers::Linear<T>::create(params_, "head.mc.fc2", d, 1, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  EncoderCounters& counters() const { return counters_; }
  void reset_counters() const { counters_ = {}; }

  /// Throws ShapeError naming the first field that disagrees with the config.
  void validate_clip(const VideoClip& clip) const {
    if (clip.frames < 1 || clip.frames > cfg_.frames)
      throw ShapeError("clip.frames = " + std::to_string(clip.frames) + ", expected 1.." + std::to_string(cfg_.frames));
    if (clip.height != cfg_.height) throw ShapeError("clip.height = " + std::to_string(clip.height) + ", expected " + std::to_string(cfg_.height));
    if (clip.width != cfg_.width) throw ShapeError("clip.width = " + std::to_string(clip.width) + ", expected " + std::to_string(cfg_.width));
    if (clip.channels != cfg_.channels)
      throw ShapeError("clip.channels = " + std::to_string(clip.channels) + ", expected " + std::to_string(cfg_.channels));
    if (clip.pixels.size() != clip.frames * clip.height * clip.width * clip.channels)
      throw ShapeError("clip.pixels has " + std::to_string(clip.pixels.size()) + " values for the declared geometry");
  }

  /// Patchify, embed, swap masked patches for the mask token, add space-time
  /// positions, run the video stack. Pooled = normalize(proj(mean of tokens)).
  EncodedVars encode_video(Graph<T>& g, const VideoClip& clip, const VideoMaskSpec* mask = nullptr) const {
    validate_clip(clip);
    const std::size_t s = cfg_.spatial_patches();
    if (mask) {
      if (mask->spatial_count != s) throw ShapeError("video mask covers " + std::to_string(mask->spatial_count) + " spatial positions, clip has " + std::to_string(s));
      for (std::size_t idx : mask->spatial_indices)
        if (idx >= s) throw InvalidArgument("video mask index " + std::to_string(idx) + " out of range " + std::to_string(s));
    }
    return encode_patches(g, g.constant(patchify(clip)), mask);
  }

  /// encode_video on an already patchified clip [frames*S x P*P*C]; the patch
  /// matrix may be a graph input, which exposes pixel gradients.
  EncodedVars encode_patches(Graph<T>& g, Var patches, const VideoMaskSpec* mask = nullptr) const {
    const std::size_t s = cfg_.spatial_patches();
    const std::size_t k = g.rows(patches);
    if (g.cols(patches) != cfg_.patch_width() || k % s != 0 || k / s < 1 || k / s > cfg_.frames)
      throw ShapeError("patch matrix " + std::to_string(k) + "x" + std::to_string(g.cols(patches)) + " does not match the video geometry");
    if (mask && mask->spatial_count != s) throw ShapeError("video mask covers " + std::to_string(mask->spatial_count) + " spatial positions, clip has " + std::to_string(s));
    ++counters_.video_forwards;
    Var x = video_.patch(g, patches);
    if (mask && !mask->spatial_indices.empty()) x = g.replace_rows(x, mask->patch_indices(k / s), g.param(*video_.mask_token));
    std::vector<std::size_t> space(k), time(k);
    for (std::size_t i = 0; i < k; ++i) {
      space[i] = i % s;
      time[i] = i / s;
    }
    x = g.add(x, g.add(g.gather_rows(g.param(*video_.pos_space), space), g.gather_rows(g.param(*video_.pos_time), time)));
    std::vector<std::uint8_t> valid(k, 1);
    Var tokens = video_.stack(g, x, valid);
    Var pooled = g.l2_normalize_rows(video_.proj(g, g.mean_rows(tokens)));
    return {tokens, pooled, std::move(valid)};
  }

  /// Token + position embeddings through the text stack; [PAD] keys are
  /// masked. Pooled = normalize(proj([CLS] output)).
  EncodedVars encode_text(Graph<T>& g, const TokenizedText& text) const {
    if (text.ids.empty() || text.ids[0] != Vocabulary::kCls) throw InvalidArgument("text: index 0 must be [CLS]");
    if (text.ids.size() > cfg_.max_text_len) throw InvalidArgument("text: length " + std::to_string(text.ids.size()) + " exceeds max " + std::to_string(cfg_.max_text_len));
    std::vector<std::size_t> ids(text.ids.size()), pos(text.ids.size());
    std::vector<std::uint8_t> valid(text.ids.size());
    for (std::size_t i = 0; i < text.ids.size(); ++i) {
      const TokenId id = text.ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) throw InvalidArgument("text: unknown token id " + std::to_string(id) + " at position " + std::to_string(i));
      ids[i] = static_cast<std::size_t>(id);
      pos[i] = i;
      valid[i] = id != Vocabulary::kPad;
    }
    ++counters_.text_forwards;
    Var x = g.add(g.embedding(g.param(*text_.tokens), ids), g.gather_rows(g.param(*text_.pos), pos));
    Var tokens = text_.stack(g, x, valid);
    Var pooled = g.l2_normalize_rows(text_.proj(g, g.slice_rows(tokens, 0, 1)));
    return {tokens, pooled, std::move(valid)};
  }

  /// Concatenates video then text tokens and runs the fusion stack. The
  /// [CLS] slot sits at index K (the first text position).
  FusedVars fuse(Graph<T>& g, const EncodedVars& video, const EncodedVars& text) const {
    if (g.cols(video.tokens) != g.cols(text.tokens))
      throw ShapeError("fuse: video width " + std::to_string(g.cols(video.tokens)) + " != text width " + std::to_string(g.cols(text.tokens)));
    if (g.cols(video.tokens) != cfg_.dim) throw ShapeError("fuse: token width " + std::to_string(g.cols(video.tokens)) + " != model.dim " + std::to_string(cfg_.dim));
    ++counters_.fusion_forwards;
    const std::size_t k = g.rows(video.tokens);
    std::vector<std::uint8_t> valid = video.valid;
    valid.insert(valid.end(), text.valid.begin(), text.valid.end());
    Var tokens = fusion_.stack(g, g.concat_rows({video.tokens, text.tokens}), valid);
    Var cls = g.slice_rows(tokens, k, 1);
    Var pooled = g.l2_normalize_rows(fusion_.proj(g, cls));
    return {tokens, cls, pooled, k};
  }

  /// Vocabulary logits at the given text positions of a fused sequence.
  Var mlm_logits(Graph<T>& g, const FusedVars& fused, const std::vector<std::size_t>& text_positions) const {
    std::vector<std::size_t> rows;
    rows.reserve(text_positions.size());
    for (std::size_t p : text_positions) rows.push_back(fused.video_tokens + p);
    return mlm_(g, g.gather_rows(fused.tokens, rows));
  }

  /// Answer-class logits [1 x answer_classes] from the fused [CLS] output.
  Var vqa_logits(Graph<T>& g, const FusedVars& fused) const { return vqa_out_(g, g.gelu(vqa_hidden_(g, fused.cls))); }

  /// Scalar candidate score [1 x 1] from the fused [CLS] output.
  Var candidate_score(Graph<T>& g, const FusedVars& fused) const { return mc_out_(g, g.gelu(mc_hidden_(g, fused.cls))); }

  // ---- value-level convenience (no gradient tracking) --------------------

  EmbeddingSequence<T> encode_video(const VideoClip& clip, const VideoMaskSpec* mask = nullptr) const {
    Graph<T> g(false);
    auto e = encode_video(g, clip, mask);
    return {g.value(e.tokens), g.value(e.pooled), e.valid};
  }

  EmbeddingSequence<T> encode_text(const TokenizedText& text) const {
    Graph<T> g(false);
    auto e = encode_text(g, text);
    return {g.value(e.tokens), g.value(e.pooled), e.valid};
  }

  FusedSequence<T> fuse(const EmbeddingSequence<T>& video, const EmbeddingSequence<T>& text) const {
    if (video.tokens.cols() != text.tokens.cols())
      throw ShapeError("fuse: video width " + std::to_string(video.tokens.cols()) + " != text width " + std::to_string(text.tokens.cols()));
    if (video.valid.size() != video.tokens.rows() || text.valid.size() != text.tokens.rows()) throw ShapeError("fuse: key mask length mismatch");
    Graph<T> g(false);
    EncodedVars v{g.constant(video.tokens), Var{}, video.valid};
    EncodedVars t{g.constant(text.tokens), Var{}, text.valid};
    auto f = fuse(g, v, t);
    return {g.value(f.tokens), g.value(f.pooled), f.video_tokens};
  }

  /// [K x P*P*C] patch matrix, frame-major then row-major over the patch grid.
  Tensor<T> patchify(const VideoClip& clip) const {
    const std::size_t p = cfg_.patch, gr = cfg_.grid_rows(), gc = cfg_.grid_cols(), c = clip.channels;
    const std::size_t k = clip.frames * gr * gc, w = p * p * c;
    Tensor<T> out = Tensor<T>::matrix(k, w);
    for (std::size_t f = 0; f < clip.frames; ++f)
      for (std::size_t r = 0; r < gr; ++r)
        for (std::size_t q = 0; q < gc; ++q) {
          T* row = out.data() + ((f * gr + r) * gc + q) * w;
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              for (std::size_t ch = 0; ch < c; ++ch) *row++ = static_cast<T>(clip.at(f, r * p + y, q * p + x, ch));
        }
    return out;
  }

 private:
  struct VideoParts {
    layers::Linear<T> patch;
    Parameter<T>* pos_space = nullptr;
    Parameter<T>* pos_time = nullptr;
    Parameter<T>* mask_token = nullptr;
    layers::Stack<T> stack;
    layers::Linear<T> proj;
  };
  struct TextParts {
    Parameter<T>* tokens = nullptr;
    Parameter<T>* pos = nullptr;
    layers::Stack<T> stack;
    layers::Linear<T> proj;
  };
  struct FusionParts {
    layers::Stack<T> stack;
    layers::Linear<T> proj;
  };

  ModelConfig cfg_;
  std::size_t vocab_size_;
  ParameterSet<T> params_;
  VideoParts video_;
  TextParts text_;
  FusionParts fusion_;
  layers::Linear<T> mlm_, vqa_hidden_, vqa_out_, mc_hidden_, mc_out_;
  mutable EncoderCounters counters_;
};

}  // namespace trialign
