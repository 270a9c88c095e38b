// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "trialign/data.hpp"
#include "trialign/text.hpp"

namespace trialign {
namespace {

namespace fs = std::filesystem;

SceneSpec spec(ShapeKind shape, const char* color, Motion motion, const char* bg) {
  return {shape, color_index(color), motion, color_index(bg), 4, 32, 32};
}

// Coverage-weighted centroid of the foreground in frame f.
std::pair<double, double> centroid(const VideoClip& c, const SceneSpec& s, std::size_t f) {
  const auto& bg = palette()[s.background].rgb;
  const auto& fg = palette()[s.color].rgb;
  std::size_t ch = 0;
  while (ch < 3 && fg[ch] == bg[ch]) ++ch;
  double w = 0, x = 0, y = 0;
  for (std::size_t yy = 0; yy < c.height; ++yy)
    for (std::size_t xx = 0; xx < c.width; ++xx) {
      const double a = (c.at(f, yy, xx, ch) - bg[ch]) / (fg[ch] - bg[ch]);
      w += a;
      x += a * double(xx);
      y += a * double(yy);
    }
  return {x / w, y / w};
}

TEST(Render, StillFramesAreIdentical) {
  const auto s = spec(ShapeKind::kCircle, "red", Motion::kStill, "blue");
  const auto clip = render(s);
  const std::size_t frame = 32 * 32 * 3;
  for (std::size_t f = 1; f < 4; ++f)
    for (std::size_t i = 0; i < frame; ++i) ASSERT_EQ(clip.pixels[f * frame + i], clip.pixels[i]);
}

TEST(Render, LeftMotionMovesCentroidLeft) {
  const auto s = spec(ShapeKind::kSquare, "yellow", Motion::kLeft, "black");
  const auto clip = render(s);
  for (std::size_t f = 1; f < 4; ++f) EXPECT_LT(centroid(clip, s, f).first, centroid(clip, s, f - 1).first);
}

TEST(Render, DirectionsOfTheOtherMotions) {
  const auto clip_r = render(spec(ShapeKind::kBar, "white", Motion::kRight, "green"));
  const auto clip_u = render(spec(ShapeKind::kBar, "white", Motion::kUp, "green"));
  const auto s_r = spec(ShapeKind::kBar, "white", Motion::kRight, "green");
  const auto s_u = spec(ShapeKind::kBar, "white", Motion::kUp, "green");
  EXPECT_GT(centroid(clip_r, s_r, 3).first, centroid(clip_r, s_r, 0).first);
  EXPECT_LT(centroid(clip_u, s_u, 3).second, centroid(clip_u, s_u, 0).second);
}

TEST(Render, DeterministicAndInRange) {
  const auto s = spec(ShapeKind::kTriangle, "purple", Motion::kSpin, "orange");
  const auto a = render(s), b = render(s);
  EXPECT_EQ(a.pixels, b.pixels);
  for (float v : a.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  // a spinning triangle is not rotation invariant under 60 degree steps
  EXPECT_NE(std::vector<float>(a.pixels.begin(), a.pixels.begin() + 3072), std::vector<float>(a.pixels.begin() + 3072, a.pixels.begin() + 6144));
}

TEST(Render, RejectsEqualColors) {
  EXPECT_THROW(render(spec(ShapeKind::kSquare, "red", Motion::kStill, "red")), InvalidArgument);
}

TEST(Caption, TemplateExample) {
  EXPECT_EQ(join_words(caption(spec(ShapeKind::kSquare, "red", Motion::kLeft, "blue"))), "a red square sliding left over a blue background");
}

TEST(Caption, InjectiveOverAllSpecs) {
  CorpusOptions opt;
  opt.n = kSceneCapacity;
  const Corpus c = generate_corpus(opt);
  std::set<std::string> seen;
  for (const auto& r : c.scenes) EXPECT_TRUE(seen.insert(join_words(r.caption)).second) << join_words(r.caption);
}

TEST(Caption, PosTagsAreLexiconExact) {
  const auto words = caption(spec(ShapeKind::kCircle, "green", Motion::kDown, "white"));
  const auto tags = pos_tag(words);
  ASSERT_EQ(words.size(), tags.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "green" || words[i] == "white") {
      EXPECT_EQ(tags[i], PosTag::kAdj);
    }
    if (words[i] == "circle" || words[i] == "background") {
      EXPECT_EQ(tags[i], PosTag::kNoun);
    }
    if (words[i] == "falling") {
      EXPECT_EQ(tags[i], PosTag::kVerb);
    }
    EXPECT_NE(Lexicon::builtin().find(words[i]), nullptr) << words[i];
  }
}

TEST(Corpus, DeterministicForSeed) {
  CorpusOptions opt;
  opt.n = 100;
  opt.seed = 7;
  const Corpus a = generate_corpus(opt), b = generate_corpus(opt);
  EXPECT_EQ(a.scenes, b.scenes);
  EXPECT_EQ(a.qa, b.qa);
  opt.seed = 8;
  EXPECT_NE(generate_corpus(opt).scenes, a.scenes);
}

TEST(Corpus, SplitsPartitionIds) {
  CorpusOptions opt;
  opt.n = 100;
  const Corpus c = generate_corpus(opt);
  std::set<std::size_t> ids;
  std::size_t total = 0;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (const auto* r : c.split(s)) ids.insert(r->id);
    total += c.split(s).size();
  }
  EXPECT_EQ(total, 100u);
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_EQ(c.split(Split::kTrain).size(), 80u);
  EXPECT_EQ(c.split(Split::kVal).size(), 10u);
  EXPECT_EQ(c.split(Split::kTest).size(), 10u);
}

TEST(Corpus, SpecsAreDistinct) {
  CorpusOptions opt;
  opt.n = 500;
  const Corpus c = generate_corpus(opt);
  std::set<std::tuple<int, std::size_t, int, std::size_t>> keys;
  for (const auto& r : c.scenes)
    EXPECT_TRUE(keys.insert({int(r.scene.shape), r.scene.color, int(r.scene.motion), r.scene.background}).second);
}

TEST(Corpus, QaRecordsAreConsistent) {
  CorpusOptions opt;
  opt.n = 60;
  const Corpus c = generate_corpus(opt);
  EXPECT_EQ(c.qa.size(), 120u);
  for (const auto& q : c.qa) {
    const auto& s = c.scene(q.scene_id).scene;
    EXPECT_EQ(q.answer, s.color);
    EXPECT_EQ(q.question.back(), shape_name(s.shape));
    if (q.mode == QaMode::kMultipleChoice) {
      ASSERT_EQ(q.candidates.size(), 4u);
      EXPECT_EQ(std::count(q.candidates.begin(), q.candidates.end(), s.color), 1);
      EXPECT_EQ(q.candidates[q.correct], s.color);
    }
  }
}

TEST(Corpus, ImagesAreOneFrameStillScenes) {
  CorpusOptions opt;
  opt.n = 400;
  const Corpus c = generate_corpus(opt);
  std::size_t images = 0;
  for (const auto& r : c.scenes)
    if (r.image) {
      ++images;
      EXPECT_EQ(r.scene.motion, Motion::kStill);
      EXPECT_EQ(render(r.render_spec()).frames, 1u);
    }
  EXPECT_GT(images, 0u);
}

TEST(Corpus, CapacityAndArgumentErrors) {
  CorpusOptions opt;
  opt.n = kSceneCapacity + 1;
  try {
    generate_corpus(opt);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(kSceneCapacity)), std::string::npos);
  }
  opt.n = 0;
  EXPECT_THROW(generate_corpus(opt), InvalidArgument);
}

class CorpusFilesTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("trialign_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CorpusFilesTest, RoundTripWithClips) {
  CorpusOptions opt;
  opt.n = 20;
  opt.seed = 3;
  opt.height = opt.width = 16;
  const Corpus c = generate_corpus(opt);
  write_corpus(dir_, c);
  const Corpus back = read_corpus(dir_);
  EXPECT_EQ(back.scenes, c.scenes);
  EXPECT_EQ(back.qa, c.qa);
  ClipSource files(dir_), rendered;
  for (const auto& r : c.scenes) EXPECT_EQ(files.get(r).pixels, rendered.get(r).pixels);
}

TEST_F(CorpusFilesTest, RejectsMalformedManifest) {
  io::write_file_atomic(dir_ / CorpusFiles::kManifest, "{\"id\": 0}\n");
  EXPECT_THROW(read_corpus(dir_), InvalidArgument);
  io::write_file_atomic(dir_ / CorpusFiles::kManifest, "not json\n");
  EXPECT_THROW(read_corpus(dir_), InvalidArgument);
}

TEST_F(CorpusFilesTest, RejectsTruncatedClip) {
  CorpusOptions opt;
  opt.n = 2;
  const Corpus c = generate_corpus(opt);
  write_corpus(dir_, c);
  io::write_file_atomic(clip_stem(dir_, 0).string() + ".f32", "abcd");
  EXPECT_THROW(read_clip(clip_stem(dir_, 0)), IoError);
}

// ---- batches ---------------------------------------------------------------------

TEST(MakeBatch, OneVideoMaskPerSampleAndReproducible) {
  CorpusOptions opt;
  opt.n = 40;
  const Corpus c = generate_corpus(opt);
  const Vocabulary vocab;
  ModelConfig model;
  MaskingConfig masking;
  ClipSource clips;
  const auto train = c.split(Split::kTrain);
  const std::vector<const SceneRecord*> slice(train.begin(), train.begin() + 8);
  const auto a = make_batch(slice, vocab, model, masking, clips, 1, 2, 3);
  const auto b = make_batch(slice, vocab, model, masking, clips, 1, 2, 3);
  const auto other = make_batch(slice, vocab, model, masking, clips, 1, 2, 4);
  ASSERT_EQ(a.size(), 8u);
  std::size_t text_masks = 0;
  bool any_difference = false;
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(a.samples[i].video_mask.spatial_indices, b.samples[i].video_mask.spatial_indices);
    EXPECT_EQ(a.samples[i].video_mask.spatial_indices.size(), 3u);  // round(0.2 * 16)
    ASSERT_EQ(a.samples[i].text_mask.has_value(), b.samples[i].text_mask.has_value());
    if (a.samples[i].text_mask) {
      ++text_masks;
      EXPECT_EQ(a.samples[i].text_mask->positions, b.samples[i].text_mask->positions);
      EXPECT_EQ(a.samples[i].masked_text.ids, b.samples[i].masked_text.ids);
    }
    any_difference |= a.samples[i].video_mask.spatial_indices != other.samples[i].video_mask.spatial_indices;
  }
  EXPECT_LE(text_masks, 8u);
  EXPECT_TRUE(any_difference);
}

TEST(MakeBatch, CaptionMasksThirtyPercentOfContentWords) {
  CorpusOptions opt;
  opt.n = 30;
  const Corpus c = generate_corpus(opt);
  const Vocabulary vocab;
  std::vector<const SceneRecord*> slice;
  for (const auto& r : c.scenes) slice.push_back(&r);
  ClipSource clips;
  const auto batch = make_batch(slice, vocab, ModelConfig{}, MaskingConfig{}, clips, 0, 0, 0);
  for (const auto& s : batch.samples) {
    std::size_t eligible = 0;
    for (PosTag t : s.text.tags) eligible += t == PosTag::kNoun || t == PosTag::kVerb || t == PosTag::kAdj;
    ASSERT_TRUE(s.text_mask.has_value());
    EXPECT_EQ(s.text_mask->positions.size(), round_count(0.3 * double(eligible)));
  }
}

TEST(MakeBatch, RejectsEmptySliceAndOverlongText) {
  const Vocabulary vocab;
  ClipSource clips;
  EXPECT_THROW(make_batch({}, vocab, ModelConfig{}, MaskingConfig{}, clips, 0, 0, 0), InvalidArgument);
  CorpusOptions opt;
  opt.n = 2;
  const Corpus c = generate_corpus(opt);
  ModelConfig small;
  small.max_text_len = 4;
  EXPECT_THROW(make_batch({&c.scenes[0]}, vocab, small, MaskingConfig{}, clips, 0, 0, 0), InvalidArgument);
}

}  // namespace
}  // namespace trialign
