// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Byte-pair-encoding tokenizer with a reserved special-token layer.
//
// Id layout of a Vocabulary, dense and in this order:
//
//   [0, A)             atoms (single code points, sorted by code point)
//   [A, A+M)           merge results, in merge order
//   [A+M, A+M+S)       special tokens (<PHON_START>, <PHON_END>, <SOS>, <EOS>)
//   [A+M+S, +count)    discrete speech tokens
//
// Text inside <PHON_START>...<PHON_END> is never merged: every notation
// symbol maps to exactly one atom id.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/notation.hpp"
#include "uttertune/utf8.hpp"

namespace uttertune::tokenizer {

using TokenId = std::int32_t;

inline constexpr std::string_view kPhonStart = "<PHON_START>";
inline constexpr std::string_view kPhonEnd = "<PHON_END>";
inline constexpr std::string_view kSpeechStart = "<SOS>";
inline constexpr std::string_view kEndOfSpeech = "<EOS>";

inline const std::vector<std::string>& default_special_tokens() {
  static const std::vector<std::string> specials{std::string(kPhonStart), std::string(kPhonEnd),
                                                 std::string(kSpeechStart),
                                                 std::string(kEndOfSpeech)};
  return specials;
}

inline constexpr int kVocabFormatVersion = 1;

class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(std::vector<std::string> atoms, std::vector<std::pair<std::string, std::string>> merges,
             std::vector<std::string> special_tokens, std::int32_t speech_token_count,
             std::uint64_t seed)
      : atoms_(std::move(atoms)),
        merges_(std::move(merges)),
        specials_(std::move(special_tokens)),
        speech_count_(speech_token_count),
        seed_(seed) {
    index();
  }

  const std::vector<std::string>& atoms() const { return atoms_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::vector<std::string>& special_tokens() const { return specials_; }
  std::uint64_t seed() const { return seed_; }

  std::int32_t text_size() const { return static_cast<std::int32_t>(atoms_.size() + merges_.size()); }
  TokenId speech_token_offset() const {
    return text_size() + static_cast<std::int32_t>(specials_.size());
  }
  std::int32_t speech_token_count() const { return speech_count_; }
  std::int32_t size() const { return speech_token_offset() + speech_count_; }

  bool is_speech(TokenId id) const {
    return id >= speech_token_offset() && id < speech_token_offset() + speech_count_;
  }
  bool is_special(TokenId id) const { return id >= text_size() && id < speech_token_offset(); }

  TokenId special_id(std::string_view literal) const {
    for (std::size_t i = 0; i < specials_.size(); ++i) {
      if (specials_[i] == literal) return text_size() + static_cast<TokenId>(i);
    }
    throw Error(ErrorCode::kUnknownTokenId, "no special token " + std::string(literal));
  }
  TokenId phon_start() const { return special_id(kPhonStart); }
  TokenId phon_end() const { return special_id(kPhonEnd); }
  TokenId speech_start() const { return special_id(kSpeechStart); }
  TokenId end_of_speech() const { return special_id(kEndOfSpeech); }

  /// Atom id of a single code point, or -1.
  TokenId atom_id(char32_t cp) const {
    auto it = atom_index_.find(cp);
    return it == atom_index_.end() ? -1 : it->second;
  }

  /// (left, right) -> merged id, keyed by merge rank order.
  const std::vector<std::pair<std::pair<TokenId, TokenId>, TokenId>>& merge_ids() const {
    return merge_ids_;
  }

  /// Text surface of a token.
  std::string token_string(TokenId id) const {
    if (id < 0 || id >= size()) {
      throw Error(ErrorCode::kUnknownTokenId, "token id " + std::to_string(id) + " out of range");
    }
    if (id < text_size()) return strings_[static_cast<std::size_t>(id)];
    if (id < speech_token_offset()) return specials_[static_cast<std::size_t>(id - text_size())];
    return "<SPEECH_" + std::to_string(id - speech_token_offset()) + ">";
  }

  bool operator==(const Vocabulary& o) const {
    return atoms_ == o.atoms_ && merges_ == o.merges_ && specials_ == o.specials_ &&
           speech_count_ == o.speech_count_ && seed_ == o.seed_;
  }

 private:
  void index() {
    strings_.clear();
    atom_index_.clear();
    merge_ids_.clear();
    std::unordered_map<std::string, TokenId> first_id;
    for (const auto& a : atoms_) {
      const auto cps = utf8::decode(a);
      if (cps.size() != 1) {
        throw Error(ErrorCode::kCorruptFile, "atom '" + a + "' is not a single code point");
      }
      const auto id = static_cast<TokenId>(strings_.size());
      atom_index_.emplace(cps[0], id);
      first_id.emplace(a, id);
      strings_.push_back(a);
    }
    for (const auto& [l, r] : merges_) {
      auto li = first_id.find(l);
      auto ri = first_id.find(r);
      if (li == first_id.end() || ri == first_id.end()) {
        throw Error(ErrorCode::kCorruptFile, "merge references unknown token");
      }
      // Two merges can spell the same string; the first id is canonical so
      // that id-level merging matches string-level training.
      const auto id = static_cast<TokenId>(strings_.size());
      strings_.push_back(l + r);
      const TokenId canonical = first_id.emplace(l + r, id).first->second;
      merge_ids_.push_back({{li->second, ri->second}, canonical});
    }
  }

  std::vector<std::string> atoms_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> specials_;
  std::int32_t speech_count_ = 0;
  std::uint64_t seed_ = 0;

  std::vector<std::string> strings_;
  std::unordered_map<char32_t, TokenId> atom_index_;
  std::vector<std::pair<std::pair<TokenId, TokenId>, TokenId>> merge_ids_;
};

namespace detail {

inline bool contains_special(std::string_view text, const std::vector<std::string>& specials) {
  for (const auto& s : specials) {
    if (text.find(s) != std::string_view::npos) return true;
  }
  return false;
}

// Splits `text` on every special literal; the literals themselves are dropped.
inline std::vector<std::string> split_on_specials(std::string_view text,
                                                  const std::vector<std::string>& specials) {
  std::vector<std::string> pieces;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t best = std::string_view::npos;
    std::size_t best_len = 0;
    for (const auto& s : specials) {
      const auto at = text.find(s, pos);
      if (at < best) {
        best = at;
        best_len = s.size();
      }
    }
    if (best == std::string_view::npos) {
      if (pos < text.size()) pieces.emplace_back(text.substr(pos));
      break;
    }
    if (best > pos) pieces.emplace_back(text.substr(pos, best - pos));
    pos = best + best_len;
  }
  return pieces;
}

}  // namespace detail

struct BpeOptions {
  /// Atoms plus merges; specials and speech tokens are not counted.
  std::size_t target_vocab_size = 0;
  std::uint64_t seed = 0;
  std::int32_t speech_token_count = 0;
};

/// Classic BPE: repeatedly merge the most frequent adjacent pair. Ties go to
/// the lexicographically smaller (left, right) pair by byte order. Special
/// literals are cut out of the corpus before counting and no merge may
/// produce one.
inline Vocabulary train_bpe(const std::vector<std::string>& corpus, const BpeOptions& opts) {
  const auto& specials = default_special_tokens();

  std::map<std::vector<std::string>, std::size_t> words;
  std::map<char32_t, bool> atom_set;
  for (const auto& text : corpus) {
    for (const auto& piece : detail::split_on_specials(text, specials)) {
      std::vector<std::string> symbols;
      for (char32_t cp : utf8::decode(piece)) {
        atom_set[cp] = true;
        symbols.push_back(utf8::encode(cp));
      }
      if (!symbols.empty()) ++words[symbols];
    }
  }
  std::vector<std::string> atoms;
  for (const auto& [cp, _] : atom_set) atoms.push_back(utf8::encode(cp));

  if (atoms.empty()) {
    throw Error(ErrorCode::kVocabTooSmall, "corpus contains no symbols");
  }
  if (opts.target_vocab_size < atoms.size()) {
    throw Error(ErrorCode::kVocabTooSmall, "target size " + std::to_string(opts.target_vocab_size) +
                                               " is below the " + std::to_string(atoms.size()) +
                                               " atomic symbols");
  }

  std::vector<std::vector<std::string>> seqs;
  std::vector<std::size_t> counts;
  for (auto& [w, c] : words) {
    seqs.push_back(w);
    counts.push_back(c);
  }

  std::vector<std::pair<std::string, std::string>> merges;
  while (atoms.size() + merges.size() < opts.target_vocab_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (std::size_t w = 0; w < seqs.size(); ++w) {
      const auto& s = seqs[w];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) pair_counts[{s[i], s[i + 1]}] += counts[w];
    }
    // std::map iterates in lexicographic order, so strict > keeps the
    // smallest pair among equal counts.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, c] : pair_counts) {
      if (c > best_count && std::find(specials.begin(), specials.end(), pair.first + pair.second) ==
                                specials.end()) {
        best = &pair;
        best_count = c;
      }
    }
    if (best == nullptr) break;
    const auto merged = *best;
    merges.push_back(merged);
    for (auto& s : seqs) {
      std::vector<std::string> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == merged.first && s[i + 1] == merged.second) {
          next.push_back(merged.first + merged.second);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
    }
  }
  return Vocabulary(std::move(atoms), std::move(merges), specials, opts.speech_token_count,
                    opts.seed);
}

struct PlainSpan {
  std::string text;
  bool operator==(const PlainSpan&) const = default;
};

struct PhonemeSpan {
  notation::PhonemeAnnotation annotation;
  bool operator==(const PhonemeSpan&) const = default;
};

using Span = std::variant<PlainSpan, PhonemeSpan>;

struct TaggedText {
  std::vector<Span> spans;

  /// Text form with tags; phoneme spans use the canonical rendering.
  std::string surface() const {
    std::string out;
    for (const auto& span : spans) {
      if (const auto* p = std::get_if<PlainSpan>(&span)) {
        out += p->text;
      } else {
        out += kPhonStart;
        out += notation::render_annotation(std::get<PhonemeSpan>(span).annotation);
        out += kPhonEnd;
      }
    }
    return out;
  }

  bool has_phoneme_span() const {
    return std::any_of(spans.begin(), spans.end(),
                       [](const Span& s) { return std::holds_alternative<PhonemeSpan>(s); });
  }

  bool operator==(const TaggedText&) const = default;
};

inline TaggedText parse_tagged(std::string_view text) {
  TaggedText out;
  std::size_t pos = 0;
  auto cp_offset = [&](std::size_t byte) { return utf8::decode(text.substr(0, byte)).size(); };
  while (pos < text.size()) {
    const auto open = text.find(kPhonStart, pos);
    const auto close = text.find(kPhonEnd, pos);
    if (close < open) {
      throw Error(ErrorCode::kUnbalancedTags, "<PHON_END> without <PHON_START>", cp_offset(close));
    }
    if (open == std::string_view::npos) {
      out.spans.emplace_back(PlainSpan{std::string(text.substr(pos))});
      break;
    }
    if (open > pos) out.spans.emplace_back(PlainSpan{std::string(text.substr(pos, open - pos))});

    const std::size_t body = open + kPhonStart.size();
    const auto next_open = text.find(kPhonStart, body);
    const auto end = text.find(kPhonEnd, body);
    if (end == std::string_view::npos) {
      if (next_open != std::string_view::npos) {
        throw Error(ErrorCode::kNestedTags, "<PHON_START> inside a phoneme span", cp_offset(next_open));
      }
      throw Error(ErrorCode::kUnbalancedTags, "<PHON_START> without <PHON_END>", cp_offset(open));
    }
    if (next_open < end) {
      throw Error(ErrorCode::kNestedTags, "<PHON_START> inside a phoneme span", cp_offset(next_open));
    }
    try {
      out.spans.emplace_back(PhonemeSpan{notation::parse_annotation(text.substr(body, end - body))});
    } catch (const Error& e) {
      const std::size_t base = cp_offset(body);
      const std::size_t at = e.position() == Error::npos ? base : base + e.position();
      throw Error(ErrorCode::kInvalidAnnotation,
                  "phoneme span: " + std::string(to_string(e.code())) + ": " + e.detail(), at);
    }
    pos = end + kPhonEnd.size();
  }
  return out;
}

namespace detail {

inline void append_atoms(std::vector<TokenId>& out, std::string_view text, const Vocabulary& vocab) {
  std::size_t i = 0;
  for (char32_t cp : utf8::decode(text)) {
    const TokenId id = vocab.atom_id(cp);
    if (id < 0) {
      throw Error(ErrorCode::kUncoveredSymbol, "'" + utf8::encode(cp) + "' is not in the vocabulary", i);
    }
    out.push_back(id);
    ++i;
  }
}

inline void apply_merges(std::vector<TokenId>& ids, const Vocabulary& vocab) {
  for (const auto& [pair, merged] : vocab.merge_ids()) {
    if (ids.size() < 2) return;
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (r + 1 < ids.size() && ids[r] == pair.first && ids[r + 1] == pair.second) {
        ids[w++] = merged;
        ++r;
      } else {
        ids[w++] = ids[r];
      }
    }
    ids.resize(w);
  }
}

}  // namespace detail

/// Plain text through the merge table, in merge order.
inline std::vector<TokenId> encode_plain(std::string_view text, const Vocabulary& vocab) {
  if (detail::contains_special(text, vocab.special_tokens())) {
    throw Error(ErrorCode::kReservedLiteral, "special token literal inside plain text");
  }
  std::vector<TokenId> ids;
  detail::append_atoms(ids, text, vocab);
  detail::apply_merges(ids, vocab);
  return ids;
}

inline std::vector<TokenId> encode(const TaggedText& tagged, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& span : tagged.spans) {
    if (const auto* p = std::get_if<PlainSpan>(&span)) {
      const auto part = encode_plain(p->text, vocab);
      ids.insert(ids.end(), part.begin(), part.end());
    } else {
      ids.push_back(vocab.phon_start());
      detail::append_atoms(ids, notation::render_annotation(std::get<PhonemeSpan>(span).annotation),
                           vocab);
      ids.push_back(vocab.phon_end());
    }
  }
  return ids;
}

inline std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.token_string(id);
  return out;
}

namespace detail {

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i == s.size()) throw Error(ErrorCode::kCorruptFile, "dangling escape");
    switch (s[i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      default: throw Error(ErrorCode::kCorruptFile, "unknown escape");
    }
  }
  return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace detail

/// Versioned UTF-8 text form. Identical vocabularies serialize to identical
/// bytes on every platform.
inline std::string serialize_vocabulary(const Vocabulary& v) {
  std::ostringstream os;
  os << "uttertune-vocab\t" << kVocabFormatVersion << '\n';
  os << "atoms\t" << v.atoms().size() << "\tmerges\t" << v.merges().size() << "\tspecials\t"
     << v.special_tokens().size() << "\tspeech_offset\t" << v.speech_token_offset()
     << "\tspeech_count\t" << v.speech_token_count() << "\tseed\t" << v.seed() << '\n';
  for (const auto& a : v.atoms()) os << "atom\t" << detail::escape(a) << '\n';
  for (const auto& [l, r] : v.merges())
    os << "merge\t" << detail::escape(l) << '\t' << detail::escape(r) << '\n';
  for (const auto& s : v.special_tokens())
    os << "special\t" << detail::escape(s) << '\t' << v.special_id(s) << '\n';
  os << "end\n";
  return os.str();
}

inline Vocabulary parse_vocabulary(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto next = [&]() -> std::vector<std::string> {
    if (!std::getline(is, line)) throw Error(ErrorCode::kCorruptFile, "vocabulary file truncated");
    return detail::split_tabs(line);
  };
  auto header = next();
  if (header.size() != 2 || header[0] != "uttertune-vocab") {
    throw Error(ErrorCode::kCorruptFile, "not a vocabulary file");
  }
  if (header[1] != std::to_string(kVocabFormatVersion)) {
    throw Error(ErrorCode::kVersionMismatch, "vocabulary version " + header[1]);
  }
  auto counts = next();
  if (counts.size() != 12) throw Error(ErrorCode::kCorruptFile, "bad vocabulary count line");
  const auto n_atoms = std::stoul(counts[1]);
  const auto n_merges = std::stoul(counts[3]);
  const auto n_specials = std::stoul(counts[5]);
  const auto speech_offset = std::stol(counts[7]);
  const auto speech_count = static_cast<std::int32_t>(std::stol(counts[9]));
  const auto seed = std::stoull(counts[11]);

  std::vector<std::string> atoms;
  for (std::size_t i = 0; i < n_atoms; ++i) {
    auto f = next();
    if (f.size() != 2 || f[0] != "atom") throw Error(ErrorCode::kCorruptFile, "bad atom line");
    atoms.push_back(detail::unescape(f[1]));
  }
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t i = 0; i < n_merges; ++i) {
    auto f = next();
    if (f.size() != 3 || f[0] != "merge") throw Error(ErrorCode::kCorruptFile, "bad merge line");
    merges.emplace_back(detail::unescape(f[1]), detail::unescape(f[2]));
  }
  std::vector<std::string> specials;
  for (std::size_t i = 0; i < n_specials; ++i) {
    auto f = next();
    if (f.size() != 3 || f[0] != "special") throw Error(ErrorCode::kCorruptFile, "bad special line");
    specials.push_back(detail::unescape(f[1]));
  }
  if (next() != std::vector<std::string>{"end"}) {
    throw Error(ErrorCode::kCorruptFile, "missing end marker");
  }
  Vocabulary v(std::move(atoms), std::move(merges), std::move(specials), speech_count, seed);
  if (v.speech_token_offset() != speech_offset) {
    throw Error(ErrorCode::kCorruptFile, "speech offset does not match counts");
  }
  return v;
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIoError, "cannot write " + path);
  os << serialize_vocabulary(v);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_vocabulary(ss.str());
}

}  // namespace uttertune::tokenizer
