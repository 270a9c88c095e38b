// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trialign/encoders.hpp"
#include "trialign/masking.hpp"
#include "trialign/substrate/io.hpp"
#include "trialign/text.hpp"

namespace trialign {

using json = nlohmann::json;

// ---- scene vocabulary -------------------------------------------------------

struct Color {
  const char* name;
  std::array<float, 3> rgb;
};

inline const std::array<Color, 8>& palette() {
  static const std::array<Color, 8> colors = {{{"red", {0.90f, 0.10f, 0.10f}},
                                               {"green", {0.10f, 0.75f, 0.20f}},
                                               {"blue", {0.15f, 0.25f, 0.95f}},
                                               {"yellow", {0.95f, 0.90f, 0.10f}},
                                               {"purple", {0.60f, 0.15f, 0.75f}},
                                               {"orange", {1.00f, 0.55f, 0.05f}},
                                               {"white", {0.97f, 0.97f, 0.97f}},
                                               {"black", {0.03f, 0.03f, 0.03f}}}};
  return colors;
}

enum class ShapeKind : std::uint8_t { kSquare, kCircle, kTriangle, kBar };
enum class Motion : std::uint8_t { kLeft, kRight, kUp, kDown, kStill, kSpin };

inline constexpr std::size_t kShapeCount = 4;
inline constexpr std::size_t kMotionCount = 6;

inline const char* shape_name(ShapeKind s) {
  static const char* names[] = {"square", "circle", "triangle", "bar"};
  return names[static_cast<std::size_t>(s)];
}

inline const char* motion_name(Motion m) {
  static const char* names[] = {"left", "right", "up", "down", "still", "spin"};
  return names[static_cast<std::size_t>(m)];
}

/// Caption words for each motion.
inline std::vector<std::string> motion_words(Motion m) {
  switch (m) {
    case Motion::kLeft: return {"sliding", "left"};
    case Motion::kRight: return {"sliding", "right"};
    case Motion::kUp: return {"rising"};
    case Motion::kDown: return {"falling"};
    case Motion::kStill: return {"resting"};
    case Motion::kSpin: return {"spinning"};
  }
  return {};
}

template <class E, std::size_t N>
E parse_enum(const std::string& s, const char* what, const char* (*name)(E)) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == name(static_cast<E>(i))) return static_cast<E>(i);
  throw InvalidArgument(std::string("unknown ") + what + " '" + s + "'");
}

inline std::size_t color_index(const std::string& s) {
  for (std::size_t i = 0; i < palette().size(); ++i)
    if (s == palette()[i].name) return i;
  throw InvalidArgument("unknown color '" + s + "'");
}

struct SceneSpec {
  ShapeKind shape = ShapeKind::kSquare;
  std::size_t color = 0;
  Motion motion = Motion::kStill;
  std::size_t background = 1;
  std::size_t frames = 4;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const {
    if (color >= palette().size() || background >= palette().size()) throw InvalidArgument("scene: color index out of range");
    if (color == background) throw InvalidArgument("scene: foreground and background colors must differ");
    if (frames < 1 || height < 4 || width < 4) throw InvalidArgument("scene: frames >= 1 and height, width >= 4 required");
  }

  bool operator==(const SceneSpec&) const = default;
};

/// Number of distinct (shape, color, motion, background) combinations.
inline constexpr std::size_t kSceneCapacity = kShapeCount * 8 * kMotionCount * 7;

// ---- rendering --------------------------------------------------------------

namespace detail {

// Inside test in object-local coordinates, radius-normalized.
inline bool shape_contains(ShapeKind s, double u, double v) {
  switch (s) {
    case ShapeKind::kSquare: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kCircle: {
      // a disc with a 60-degree wedge cut out, so rotation is visible
      if (u * u + v * v > 1.0) return false;
      return !(u > 0 && std::abs(v) < u * std::tan(std::numbers::pi / 6));
    }
    case ShapeKind::kTriangle: {
      if (v < -0.9 || v > 0.8) return false;
      return std::abs(u) <= (v + 0.9) / 1.7 * 0.9;
    }
    case ShapeKind::kBar: return std::abs(u) <= 1.0 && std::abs(v) <= 0.3;
  }
  return false;
}

}  // namespace detail

/// Object centre (x, y) and rotation for frame f, in pixels and radians.
inline std::array<double, 3> scene_pose(const SceneSpec& s, std::size_t f) {
  const double t = s.frames > 1 ? double(f) / double(s.frames - 1) : 0.5;
  const double cx = 0.5 * double(s.width), cy = 0.5 * double(s.height);
  const double sweep_x = 0.45 * double(s.width), sweep_y = 0.45 * double(s.height);
  switch (s.motion) {
    case Motion::kLeft: return {cx + sweep_x * (0.5 - t), cy, 0.0};
    case Motion::kRight: return {cx - sweep_x * (0.5 - t), cy, 0.0};
    case Motion::kUp: return {cx, cy + sweep_y * (0.5 - t), 0.0};
    case Motion::kDown: return {cx, cy - sweep_y * (0.5 - t), 0.0};
    case Motion::kStill: return {cx, cy, 0.0};
    case Motion::kSpin: return {cx, cy, double(f) * std::numbers::pi / 3.0};
  }
  return {cx, cy, 0.0};
}

/// Rasterizes the moving shape with 2x2 supersampling; values in [0, 1].
inline VideoClip render(const SceneSpec& s, std::size_t channels = 3) {
  s.validate();
  if (channels != 3) throw InvalidArgument("render: only 3 channels are supported");
  VideoClip clip{s.frames, s.height, s.width, channels, {}};
  clip.pixels.resize(s.frames * s.height * s.width * channels);
  const auto& fg = palette()[s.color].rgb;
  const auto& bg = palette()[s.background].rgb;
  const double radius = 0.22 * double(std::min(s.height, s.width));
  for (std::size_t f = 0; f < s.frames; ++f) {
    const auto [cx, cy, angle] = scene_pose(s, f);
    const double c = std::cos(angle), sn = std::sin(angle);
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) {
            const double px = double(x) + 0.25 + 0.5 * sx - cx, py = double(y) + 0.25 + 0.5 * sy - cy;
            const double u = (c * px + sn * py) / radius, v = (-sn * px + c * py) / radius;
            hits += detail::shape_contains(s.shape, u, v);
          }
        const float a = float(hits) / 4.0f;
        for (std::size_t ch = 0; ch < 3; ++ch) clip.at(f, y, x, ch) = a * fg[ch] + (1.0f - a) * bg[ch];
      }
  }
  return clip;
}

/// "a <color> <shape> <motion words> over a <background> background"
inline std::vector<std::string> caption(const SceneSpec& s) {
  std::vector<std::string> w = {"a", palette()[s.color].name, shape_name(s.shape)};
  for (auto& m : motion_words(s.motion)) w.push_back(m);
  for (const char* tail : {"over", "a"}) w.push_back(tail);
  w.push_back(palette()[s.background].name);
  w.push_back("background");
  return w;
}

/// Caption followed by a second sentence about the same scene, as a
/// paragraph-style query.
inline std::vector<std::string> paragraph(const SceneSpec& s) {
  auto w = caption(s);
  for (const std::string& x : {std::string("the"), std::string(palette()[s.color].name), std::string(shape_name(s.shape)), std::string("is")})
    w.push_back(x);
  for (auto& m : motion_words(s.motion)) w.push_back(m);
  return w;
}

// ---- manifest -----------------------------------------------------------------

enum class Split : std::uint8_t { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  static const char* names[] = {"train", "val", "test"};
  return names[static_cast<std::size_t>(s)];
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw InvalidArgument("unknown split '" + s + "' (expected train, val or test)");
}

struct SceneRecord {
  std::size_t id = 0;
  SceneSpec scene;
  bool image = false;  // rendered as a single frame
  std::vector<std::string> caption;
  Split split = Split::kTrain;

  SceneSpec render_spec() const {
    SceneSpec s = scene;
    if (image) s.frames = 1;
    return s;
  }
  bool operator==(const SceneRecord&) const = default;
};

enum class QaMode : std::uint8_t { kOpen, kMultipleChoice };

inline const char* qa_mode_name(QaMode m) { return m == QaMode::kOpen ? "open" : "mc"; }

inline QaMode parse_qa_mode(const std::string& s) {
  if (s == "open" || s == "open-ended") return QaMode::kOpen;
  if (s == "mc" || s == "multiple-choice") return QaMode::kMultipleChoice;
  throw InvalidArgument("unknown QA mode '" + s + "' (expected open or mc)");
}

/// Answer classes are palette colours. In multiple-choice mode
/// `candidates` holds class ids and `correct` indexes the right one.
struct QaRecord {
  std::size_t scene_id = 0;
  Split split = Split::kTrain;
  QaMode mode = QaMode::kOpen;
  std::vector<std::string> question;
  std::size_t answer = 0;
  std::vector<std::size_t> candidates;
  std::size_t correct = 0;

  bool operator==(const QaRecord&) const = default;
};

inline std::vector<std::string> answer_words() {
  std::vector<std::string> out;
  for (const auto& c : palette()) out.push_back(c.name);
  return out;
}

struct Corpus {
  std::vector<SceneRecord> scenes;
  std::vector<QaRecord> qa;

  std::vector<const SceneRecord*> split(Split s) const {
    std::vector<const SceneRecord*> out;
    for (const auto& r : scenes)
      if (r.split == s) out.push_back(&r);
    return out;
  }
  std::vector<const QaRecord*> qa_split(Split s, QaMode mode) const {
    std::vector<const QaRecord*> out;
    for (const auto& q : qa)
      if (q.split == s && q.mode == mode) out.push_back(&q);
    return out;
  }
  const SceneRecord& scene(std::size_t id) const {
    if (id >= scenes.size() || scenes[id].id != id) throw InvalidArgument("unknown scene id " + std::to_string(id));
    return scenes[id];
  }
};

struct CorpusOptions {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::size_t frames = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  double image_fraction = 0.5;  // share of "still" scenes stored as one-frame images
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

/// Samples `n` distinct scene specs, splits them train/val/test and emits an
/// open-ended and a 4-way multiple-choice question for every scene.
inline Corpus generate_corpus(const CorpusOptions& opt) {
  if (opt.n < 1) throw InvalidArgument("corpus size n must be >= 1");
  if (opt.n > kSceneCapacity)
    throw InvalidArgument("corpus size n = " + std::to_string(opt.n) + " exceeds the distinct-scene capacity " + std::to_string(kSceneCapacity));
  if (!(opt.image_fraction >= 0 && opt.image_fraction <= 1)) throw InvalidArgument("image_fraction must lie in [0, 1]");
  if (!(opt.train_fraction > 0 && opt.val_fraction >= 0 && opt.train_fraction + opt.val_fraction <= 1))
    throw InvalidArgument("split fractions must be positive and sum to at most 1");
  std::vector<SceneSpec> all;
  all.reserve(kSceneCapacity);
  for (std::size_t sh = 0; sh < kShapeCount; ++sh)
    for (std::size_t c = 0; c < palette().size(); ++c)
      for (std::size_t m = 0; m < kMotionCount; ++m)
        for (std::size_t b = 0; b < palette().size(); ++b) {
          if (b == c) continue;
          all.push_back({static_cast<ShapeKind>(sh), c, static_cast<Motion>(m), b, opt.frames, opt.height, opt.width});
        }
  Rng rng(opt.seed, stream_id({0xC0, 1}));
  rng.shuffle(all.begin(), all.end());
  const std::size_t n_train = std::max<std::size_t>(1, round_count(opt.train_fraction * double(opt.n)));
  const std::size_t n_val = std::min(opt.n - n_train, round_count(opt.val_fraction * double(opt.n)));

  Corpus corpus;
  for (std::size_t i = 0; i < opt.n; ++i) {
    SceneRecord r;
    r.id = i;
    r.scene = all[i];
    r.scene.validate();
    r.image = r.scene.motion == Motion::kStill && rng.uniform() < opt.image_fraction;
    r.caption = caption(r.scene);
    r.split = i < n_train ? Split::kTrain : i < n_train + n_val ? Split::kVal : Split::kTest;
    corpus.scenes.push_back(std::move(r));
  }
  for (const auto& r : corpus.scenes) {
    const std::vector<std::string> q = {"what", "color", "is", "the", shape_name(r.scene.shape)};
    corpus.qa.push_back({r.id, r.split, QaMode::kOpen, q, r.scene.color, {}, 0});
    QaRecord mc{r.id, r.split, QaMode::kMultipleChoice, q, r.scene.color, {}, 0};
    std::vector<std::size_t> distractors;
    for (std::size_t c = 0; c < palette().size(); ++c)
      if (c != r.scene.color) distractors.push_back(c);
    rng.shuffle(distractors.begin(), distractors.end());
    mc.candidates = {r.scene.color, distractors[0], distractors[1], distractors[2]};
    rng.shuffle(mc.candidates.begin(), mc.candidates.end());
    mc.correct = static_cast<std::size_t>(std::find(mc.candidates.begin(), mc.candidates.end(), r.scene.color) - mc.candidates.begin());
    corpus.qa.push_back(std::move(mc));
  }
  return corpus;
}

// ---- JSON lines ---------------------------------------------------------------

inline json to_json(const SceneRecord& r) {
  return {{"id", r.id},
          {"shape", shape_name(r.scene.shape)},
          {"color", palette()[r.scene.color].name},
          {"motion", motion_name(r.scene.motion)},
          {"background", palette()[r.scene.background].name},
          {"frames", r.scene.frames},
          {"height", r.scene.height},
          {"width", r.scene.width},
          {"image", r.image},
          {"caption", join_words(r.caption)},
          {"split", split_name(r.split)}};
}

inline json to_json(const QaRecord& q) {
  json j = {{"scene_id", q.scene_id},
            {"split", split_name(q.split)},
            {"mode", qa_mode_name(q.mode)},
            {"question", join_words(q.question)},
            {"answer", q.answer},
            {"answer_word", palette().at(q.answer).name}};
  if (q.mode == QaMode::kMultipleChoice) {
    j["candidates"] = q.candidates;
    j["correct"] = q.correct;
  }
  return j;
}

namespace detail {

inline const json& field(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw InvalidArgument("line " + std::to_string(line) + ": missing key '" + key + "'");
  return j.at(key);
}

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InvalidArgument(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      f(j, lineno);
    } catch (const json::exception& e) {
      throw InvalidArgument(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace detail

inline SceneRecord scene_from_json(const json& j, std::size_t line = 0) {
  using detail::field;
  SceneRecord r;
  r.id = field(j, "id", line).get<std::size_t>();
  r.scene.shape = parse_enum<ShapeKind, kShapeCount>(field(j, "shape", line).get<std::string>(), "shape", shape_name);
  r.scene.color = color_index(field(j, "color", line).get<std::string>());
  r.scene.motion = parse_enum<Motion, kMotionCount>(field(j, "motion", line).get<std::string>(), "motion", motion_name);
  r.scene.background = color_index(field(j, "background", line).get<std::string>());
  r.scene.frames = field(j, "frames", line).get<std::size_t>();
  r.scene.height = field(j, "height", line).get<std::size_t>();
  r.scene.width = field(j, "width", line).get<std::size_t>();
  r.scene.validate();
  r.image = field(j, "image", line).get<bool>();
  r.caption = split_words(field(j, "caption", line).get<std::string>());
  if (r.caption != caption(r.scene)) throw InvalidArgument("line " + std::to_string(line) + ": caption does not match the scene");
  r.split = parse_split(field(j, "split", line).get<std::string>());
  return r;
}

inline QaRecord qa_from_json(const json& j, std::size_t line = 0) {
  using detail::field;
  QaRecord q;
  q.scene_id = field(j, "scene_id", line).get<std::size_t>();
  q.split = parse_split(field(j, "split", line).get<std::string>());
  q.mode = parse_qa_mode(field(j, "mode", line).get<std::string>());
  q.question = split_words(field(j, "question", line).get<std::string>());
  q.answer = field(j, "answer", line).get<std::size_t>();
  if (q.answer >= palette().size()) throw InvalidArgument("line " + std::to_string(line) + ": unknown answer class " + std::to_string(q.answer));
  if (q.mode == QaMode::kMultipleChoice) {
    q.candidates = field(j, "candidates", line).get<std::vector<std::size_t>>();
    q.correct = field(j, "correct", line).get<std::size_t>();
    if (q.correct >= q.candidates.size() || q.candidates[q.correct] != q.answer)
      throw InvalidArgument("line " + std::to_string(line) + ": correct candidate does not hold the answer");
    for (std::size_t c : q.candidates)
      if (c >= palette().size()) throw InvalidArgument("line " + std::to_string(line) + ": unknown candidate class " + std::to_string(c));
  }
  return q;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  io::write_file_atomic(path, out);
}

/// Layout under a corpus directory.
struct CorpusFiles {
  static constexpr const char* kManifest = "manifest.jsonl";
  static constexpr const char* kQa = "qa.jsonl";
  static constexpr const char* kClips = "clips";
};

/// Raw little-endian float32 pixels plus a JSON shape sidecar.
inline void write_clip(const std::filesystem::path& stem, const VideoClip& clip) {
  std::string bytes;
  bytes.reserve(clip.pixels.size() * 4);
  for (float v : clip.pixels) io::put_le(bytes, v);
  io::write_file_atomic(stem.string() + ".f32", bytes);
  const json header = {{"frames", clip.frames}, {"height", clip.height}, {"width", clip.width},
                       {"channels", clip.channels}, {"dtype", "float32"}, {"byte_order", "little"}};
  io::write_file_atomic(stem.string() + ".json", header.dump() + "\n");
}

inline VideoClip read_clip(const std::filesystem::path& stem) {
  const json h = json::parse(io::read_file(stem.string() + ".json"));
  if (h.value("dtype", "") != "float32" || h.value("byte_order", "") != "little") throw IoError(stem.string() + ".json: expected little-endian float32");
  VideoClip clip{h.at("frames").get<std::size_t>(), h.at("height").get<std::size_t>(), h.at("width").get<std::size_t>(),
                 h.at("channels").get<std::size_t>(), {}};
  const std::string bytes = io::read_file(stem.string() + ".f32");
  const std::size_t n = clip.frames * clip.height * clip.width * clip.channels;
  if (bytes.size() != n * 4) throw IoError(stem.string() + ".f32: expected " + std::to_string(n * 4) + " bytes, found " + std::to_string(bytes.size()));
  io::Reader r(bytes, stem.string() + ".f32");
  clip.pixels.resize(n);
  for (auto& v : clip.pixels) v = r.get<float>();
  return clip;
}

inline std::filesystem::path clip_stem(const std::filesystem::path& dir, std::size_t id) {
  return dir / CorpusFiles::kClips / ("scene_" + std::to_string(id));
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, bool with_clips = true) {
  std::vector<json> scenes, qa;
  for (const auto& r : corpus.scenes) scenes.push_back(to_json(r));
  for (const auto& q : corpus.qa) qa.push_back(to_json(q));
  write_jsonl(dir / CorpusFiles::kManifest, scenes);
  write_jsonl(dir / CorpusFiles::kQa, qa);
  if (with_clips)
    for (const auto& r : corpus.scenes) write_clip(clip_stem(dir, r.id), render(r.render_spec()));
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  detail::for_each_jsonl(dir / CorpusFiles::kManifest, [&](const json& j, std::size_t line) { c.scenes.push_back(scene_from_json(j, line)); });
  std::set<std::size_t> ids;
  for (std::size_t i = 0; i < c.scenes.size(); ++i) {
    if (!ids.insert(c.scenes[i].id).second) throw InvalidArgument("manifest: duplicate id " + std::to_string(c.scenes[i].id));
    if (c.scenes[i].id != i) throw InvalidArgument("manifest: ids must be 0..n-1 in order");
  }
  if (std::filesystem::exists(dir / CorpusFiles::kQa))
    detail::for_each_jsonl(dir / CorpusFiles::kQa, [&](const json& j, std::size_t line) {
      QaRecord q = qa_from_json(j, line);
      if (!ids.count(q.scene_id)) throw InvalidArgument("qa line " + std::to_string(line) + ": unknown scene id " + std::to_string(q.scene_id));
      c.qa.push_back(std::move(q));
    });
  return c;
}

// ---- clips and batches --------------------------------------------------------

/// Supplies clips by rendering the spec or by reading the stored arrays.
class ClipSource {
 public:
  ClipSource() = default;
  explicit ClipSource(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const VideoClip& get(const SceneRecord& r) const {
    auto it = cache_.find(r.id);
    if (it != cache_.end()) return it->second;
    VideoClip clip = dir_ ? read_clip(clip_stem(*dir_, r.id)) : render(r.render_spec());
    return cache_.emplace(r.id, std::move(clip)).first->second;
  }

 private:
  std::optional<std::filesystem::path> dir_;
  mutable std::map<std::size_t, VideoClip> cache_;
};

struct MaskingConfig {
  double video_ratio = 0.2;
  double text_ratio = 0.3;
  bool block_video_mask = true;
  TextMaskPolicy text_policy = TextMaskPolicy::kSemantic;

  void validate() const {
    if (!(video_ratio > 0 && video_ratio < 1)) throw InvalidArgument("masking.video_ratio must lie in (0, 1)");
    if (!(text_ratio > 0 && text_ratio < 1)) throw InvalidArgument("masking.text_ratio must lie in (0, 1)");
  }
};

/// One sample's inputs: the complete pair plus both masked views.
struct RawSample {
  std::size_t scene_id = 0;
  const VideoClip* clip = nullptr;
  TokenizedText text;
  VideoMaskSpec video_mask;
  std::optional<TextMaskSpec> text_mask;  // absent when no token is eligible
  TokenizedText masked_text;              // equals `text` when text_mask is absent
};

struct RawBatch {
  std::vector<RawSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t text_mask_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.text_mask.has_value();
    return n;
  }
};

/// Per-sample stream: masks depend only on (seed, epoch, step, scene id).
inline Rng sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t step, std::uint64_t scene_id) {
  return Rng(seed, stream_id({0xBA7C, epoch, step, scene_id}));
}

inline RawBatch make_batch(const std::vector<const SceneRecord*>& slice, const Vocabulary& vocab, const ModelConfig& model,
                           const MaskingConfig& masking, const ClipSource& clips, std::uint64_t seed, std::uint64_t epoch,
                           std::uint64_t step, bool paragraphs = false) {
  if (slice.empty()) throw InvalidArgument("make_batch: empty slice");
  masking.validate();
  RawBatch batch;
  for (const SceneRecord* r : slice) {
    Rng rng = sample_rng(seed, epoch, step, r->id);
    RawSample s;
    s.scene_id = r->id;
    s.clip = &clips.get(*r);
    s.text = vocab.tokenize(paragraphs ? paragraph(r->scene) : r->caption);
    vocab.validate(s.text, model.max_text_len);
    s.video_mask = masking.block_video_mask ? make_video_mask(model.grid_rows(), model.grid_cols(), masking.video_ratio, rng)
                                            : make_video_mask(model.spatial_patches(), masking.video_ratio, rng);
    try {
      s.text_mask = make_text_mask(s.text, masking.text_ratio, rng, masking.text_policy);
      s.masked_text = apply_text_mask(s.text, *s.text_mask);
    } catch (const NoEligibleTokens&) {
      s.masked_text = s.text;
    }
    batch.samples.push_back(std::move(s));
  }
  return batch;
}

}  // namespace trialign
