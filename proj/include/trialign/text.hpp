// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "trialign/error.hpp"

namespace trialign {

enum class PosTag : std::uint8_t { kNoun, kVerb, kAdj, kAux, kOther, kSpecial };

inline const char* tag_name(PosTag t) {
  switch (t) {
    case PosTag::kNoun: return "NOUN";
    case PosTag::kVerb: return "VERB";
    case PosTag::kAdj: return "ADJ";
    case PosTag::kAux: return "AUX";
    case PosTag::kOther: return "OTHER";
    case PosTag::kSpecial: return "SPECIAL";
  }
  return "OTHER";
}

inline PosTag parse_tag(std::string_view s) {
  if (s == "NOUN") return PosTag::kNoun;
  if (s == "VERB") return PosTag::kVerb;
  if (s == "ADJ") return PosTag::kAdj;
  if (s == "AUX") return PosTag::kAux;
  if (s == "OTHER") return PosTag::kOther;
  throw InvalidArgument("unknown POS tag '" + std::string(s) + "'");
}

/// Auxiliary verbs. Always tagged AUX unless the lexicon says otherwise, and
/// therefore never eligible for semantic masking.
inline const std::vector<std::string>& aux_stoplist() {
  static const std::vector<std::string> words = {
      "be", "am", "is", "are", "was", "were", "been", "have", "has", "had", "do",
      "does", "did", "will", "would", "shall", "should", "can", "could", "may", "might", "must"};
  return words;
}

/// Word -> tag table, kept in insertion order.
class Lexicon {
 public:
  void add(const std::string& word, PosTag tag) {
    auto [it, inserted] = tags_.emplace(word, tag);
    if (inserted)
      order_.push_back(word);
    else
      it->second = tag;
  }

  const PosTag* find(const std::string& word) const {
    auto it = tags_.find(word);
    return it == tags_.end() ? nullptr : &it->second;
  }

  const std::vector<std::string>& words() const { return order_; }

  /// Covers every word the synthetic corpus and its QA templates emit.
  static Lexicon builtin() {
    Lexicon lex;
    for (const char* w : {"red", "green", "blue", "yellow", "purple", "orange", "white", "black"}) lex.add(w, PosTag::kAdj);
    for (const char* w : {"square", "circle", "triangle", "bar", "background"}) lex.add(w, PosTag::kNoun);
    for (const char* w : {"sliding", "rising", "falling", "resting", "spinning"}) lex.add(w, PosTag::kVerb);
    for (const char* w : {"left", "right", "a", "the", "over", "what", "in"}) lex.add(w, PosTag::kOther);
    lex.add("color", PosTag::kNoun);
    // a caption outside the synthetic grammar, used as a fixture
    for (const char* w : {"swan", "lake"}) lex.add(w, PosTag::kNoun);
    lex.add("swimming", PosTag::kVerb);
    lex.add("calm", PosTag::kAdj);
    return lex;
  }

  /// Plain text, one `word<TAB>TAG` per line; blank lines and `#` comments skipped.
  static Lexicon parse(std::istream& in) {
    Lexicon lex;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) throw InvalidArgument("lexicon line " + std::to_string(lineno) + ": expected word<TAB>TAG");
      lex.add(line.substr(0, tab), parse_tag(line.substr(tab + 1)));
    }
    return lex;
  }

  static Lexicon load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon '" + path + "'");
    return parse(in);
  }

  void write(std::ostream& out) const {
    for (const auto& w : order_) out << w << '\t' << tag_name(tags_.at(w)) << '\n';
  }

  bool operator==(const Lexicon& other) const { return order_ == other.order_ && tags_ == other.tags_; }

 private:
  std::map<std::string, PosTag> tags_;
  std::vector<std::string> order_;
};

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

/// Lexicon lookup, then the AUX stoplist, then suffix rules; OTHER otherwise.
inline PosTag pos_tag_word(const std::string& word, const Lexicon& lex) {
  if (const PosTag* t = lex.find(word)) return *t;
  for (const auto& aux : aux_stoplist())
    if (word == aux) return PosTag::kAux;
  if (ends_with(word, "ing") || ends_with(word, "ed")) return PosTag::kVerb;
  if (ends_with(word, "ly")) return PosTag::kOther;
  if (ends_with(word, "ous") || ends_with(word, "ful") || ends_with(word, "ive")) return PosTag::kAdj;
  return PosTag::kOther;
}

inline std::vector<PosTag> pos_tag(const std::vector<std::string>& words, const Lexicon& lex = Lexicon::builtin()) {
  std::vector<PosTag> tags;
  tags.reserve(words.size());
  for (const auto& w : words) tags.push_back(pos_tag_word(w, lex));
  return tags;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

using TokenId = std::int32_t;

struct TokenizedText {
  std::vector<TokenId> ids;
  std::vector<PosTag> tags;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenizedText&) const = default;
};

/// Token ids for the special symbols and every lexicon + stoplist word.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kMask = 2;

  explicit Vocabulary(const Lexicon& lex = Lexicon::builtin()) : lexicon_(lex) {
    for (const char* s : {"[PAD]", "[CLS]", "[MASK]"}) push(s);
    for (const auto& w : lex.words()) push(w);
    for (const auto& w : aux_stoplist()) push(w);
  }

  std::size_t size() const { return words_.size(); }
  const Lexicon& lexicon() const { return lexicon_; }

  TokenId id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw InvalidArgument("word '" + word + "' is not in the vocabulary");
    return it->second;
  }
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  const std::string& word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw InvalidArgument("token id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id)];
  }
  bool valid(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < words_.size(); }

  /// [CLS] + words, tagged; padded with [PAD] up to `pad_to` when given.
  TokenizedText tokenize(const std::vector<std::string>& words, std::size_t pad_to = 0) const {
    TokenizedText t;
    t.ids.push_back(kCls);
    t.tags.push_back(PosTag::kSpecial);
    const auto tags = pos_tag(words, lexicon_);
    for (std::size_t i = 0; i < words.size(); ++i) {
      t.ids.push_back(id(words[i]));
      t.tags.push_back(tags[i]);
    }
    while (t.ids.size() < pad_to) {
      t.ids.push_back(kPad);
      t.tags.push_back(PosTag::kSpecial);
    }
    return t;
  }

  TokenizedText tokenize(std::string_view sentence, std::size_t pad_to = 0) const {
    return tokenize(split_words(sentence), pad_to);
  }

  std::string decode(const TokenizedText& t) const {
    std::string out;
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
      if (i) out += ' ';
      out += word(t.ids[i]);
    }
    return out;
  }

  /// Throws unless `t` starts with [CLS], uses known ids, has [PAD] only as a
  /// suffix and fits in `max_len`.
  void validate(const TokenizedText& t, std::size_t max_len) const {
    if (t.ids.empty() || t.ids[0] != kCls) throw InvalidArgument("text: index 0 must be [CLS]");
    if (t.tags.size() != t.ids.size()) throw InvalidArgument("text: tag count does not match token count");
    if (t.ids.size() > max_len) throw InvalidArgument("text: length " + std::to_string(t.ids.size()) + " exceeds max " + std::to_string(max_len));
    bool in_pad = false;
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
      if (!valid(t.ids[i])) throw InvalidArgument("text: unknown token id " + std::to_string(t.ids[i]) + " at position " + std::to_string(i));
      if (t.ids[i] == kPad)
        in_pad = true;
      else if (in_pad)
        throw InvalidArgument("text: [PAD] must only appear as a suffix");
      if (i > 0 && t.ids[i] == kCls) throw InvalidArgument("text: [CLS] only allowed at index 0");
    }
  }

  static std::size_t unpadded_length(const TokenizedText& t) {
    std::size_t n = t.ids.size();
    while (n > 0 && t.ids[n - 1] == kPad) --n;
    return n;
  }

 private:
  void push(const std::string& w) {
    if (ids_.count(w)) return;
    ids_[w] = static_cast<TokenId>(words_.size());
    words_.push_back(w);
  }

  Lexicon lexicon_;
  std::vector<std::string> words_;
  std::map<std::string, TokenId> ids_;
};

}  // namespace trialign
