// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/substrate/rng.hpp"
#include "trialign/text.hpp"

namespace trialign {

/// Nearest integer, halves rounded away from zero.
inline std::size_t round_count(double x) { return static_cast<std::size_t>(std::llround(x)); }

/// Spatial patch positions masked in every frame of a clip.
struct VideoMaskSpec {
  std::vector<std::size_t> spatial_indices;  // sorted, distinct, each < spatial_count
  std::size_t spatial_count = 0;
  double ratio = 0.0;

  /// Flattened patch indices (frame-major) for a clip with `frames` frames.
  std::vector<std::size_t> patch_indices(std::size_t frames) const {
    std::vector<std::size_t> out;
    out.reserve(frames * spatial_indices.size());
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t s : spatial_indices) out.push_back(f * spatial_count + s);
    return out;
  }

  bool operator==(const VideoMaskSpec&) const = default;
};

struct TextMaskSpec {
  std::vector<std::size_t> positions;  // ascending
  std::vector<TokenId> replaced_ids;   // original ids, parallel to positions

  bool empty() const { return positions.empty(); }
  bool operator==(const TextMaskSpec&) const = default;
};

class DegenerateMask : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class NoEligibleTokens : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

namespace detail {

inline std::size_t video_mask_count(std::size_t spatial_count, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("video mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  if (spatial_count == 0) throw InvalidArgument("video mask: spatial position count must be >= 1");
  const std::size_t n = round_count(ratio * double(spatial_count));
  if (n == 0)
    throw DegenerateMask("video mask: round(" + std::to_string(ratio) + " * " + std::to_string(spatial_count) +
                         ") = 0 positions; raise the ratio or the patch grid");
  return n;
}

}  // namespace detail

/// Uniformly samples round(ratio * S) distinct spatial cells, one at a time.
inline VideoMaskSpec make_video_mask(std::size_t spatial_count, double ratio, Rng& rng) {
  const std::size_t n = detail::video_mask_count(spatial_count, ratio);
  VideoMaskSpec spec{rng.sample_without_replacement(spatial_count, n), spatial_count, ratio};
  std::sort(spec.spatial_indices.begin(), spec.spatial_indices.end());
  return spec;
}

/// Block-wise variant on a grid_rows x grid_cols patch grid: rectangles of
/// random area and aspect are laid down until round(ratio * S) cells are
/// covered; a block that would overshoot contributes only the cells needed.
inline VideoMaskSpec make_video_mask(std::size_t grid_rows, std::size_t grid_cols, double ratio, Rng& rng) {
  const std::size_t s = grid_rows * grid_cols;
  const std::size_t n = detail::video_mask_count(s, ratio);
  std::vector<std::uint8_t> taken(s, 0);
  std::size_t count = 0;
  for (int attempt = 0; attempt < 64 && count < n; ++attempt) {
    const std::size_t remaining = n - count;
    const double area = 1.0 + double(rng.below(remaining));
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const std::size_t h = std::clamp<std::size_t>(round_count(std::sqrt(area * aspect)), 1, grid_rows);
    const std::size_t w = std::clamp<std::size_t>(round_count(std::sqrt(area / aspect)), 1, grid_cols);
    const std::size_t top = rng.below(grid_rows - h + 1);
    const std::size_t left = rng.below(grid_cols - w + 1);
    for (std::size_t r = top; r < top + h && count < n; ++r)
      for (std::size_t c = left; c < left + w && count < n; ++c)
        if (!taken[r * grid_cols + c]) {
          taken[r * grid_cols + c] = 1;
          ++count;
        }
  }
  while (count < n) {
    const std::size_t cell = rng.below(s);
    if (!taken[cell]) {
      taken[cell] = 1;
      ++count;
    }
  }
  VideoMaskSpec spec{{}, s, ratio};
  for (std::size_t i = 0; i < s; ++i)
    if (taken[i]) spec.spatial_indices.push_back(i);
  return spec;
}

enum class TextMaskPolicy {
  kSemantic,  // NOUN, VERB, ADJ only
  kRandom,    // any word token (classic MLM)
};

inline bool mask_eligible(PosTag tag, TextMaskPolicy policy) {
  if (tag == PosTag::kSpecial) return false;
  if (policy == TextMaskPolicy::kRandom) return true;
  return tag == PosTag::kNoun || tag == PosTag::kVerb || tag == PosTag::kAdj;
}

/// Masks round(ratio * |eligible|) eligible positions, at least one.
inline TextMaskSpec make_text_mask(const TokenizedText& text, double ratio, Rng& rng,
                                   TextMaskPolicy policy = TextMaskPolicy::kSemantic) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("text mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  if (text.tags.size() != text.ids.size()) throw InvalidArgument("text mask: text is not tagged");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < text.ids.size(); ++i)
    if (text.ids[i] != Vocabulary::kPad && text.ids[i] != Vocabulary::kCls && text.ids[i] != Vocabulary::kMask &&
        mask_eligible(text.tags[i], policy))
      eligible.push_back(i);
  if (eligible.empty()) throw NoEligibleTokens("text mask: no eligible tokens");
  const std::size_t n = std::max<std::size_t>(1, round_count(ratio * double(eligible.size())));
  auto picks = rng.sample_without_replacement(eligible.size(), n);
  std::sort(picks.begin(), picks.end());
  TextMaskSpec spec;
  for (std::size_t k : picks) {
    spec.positions.push_back(eligible[k]);
    spec.replaced_ids.push_back(text.ids[eligible[k]]);
  }
  return spec;
}

inline TokenizedText apply_text_mask(const TokenizedText& text, const TextMaskSpec& spec) {
  if (spec.positions.size() != spec.replaced_ids.size()) throw InvalidArgument("text mask: positions and replaced ids differ in length");
  TokenizedText out = text;
  for (std::size_t p : spec.positions) {
    if (p >= out.ids.size()) throw InvalidArgument("text mask: position " + std::to_string(p) + " out of range " + std::to_string(out.ids.size()));
    out.ids[p] = Vocabulary::kMask;
  }
  return out;
}

inline TokenizedText restore_text_mask(const TokenizedText& masked, const TextMaskSpec& spec) {
  TokenizedText out = masked;
  for (std::size_t k = 0; k < spec.positions.size(); ++k) {
    if (spec.positions[k] >= out.ids.size()) throw InvalidArgument("text mask: position out of range");
    out.ids[spec.positions[k]] = spec.replaced_ids[k];
  }
  return out;
}

}  // namespace trialign
