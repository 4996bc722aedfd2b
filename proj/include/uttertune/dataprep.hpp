// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic homograph corpus and its pronunciation oracle.
//
// Every grapheme is a two-kanji word with one or more readings. Gold speech
// tokens are the (mora, pitch) codes of the sampled readings, so a model's
// pronunciation and accent can be checked exactly.

#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttertune/error.hpp"
#include "uttertune/notation.hpp"
#include "uttertune/rng.hpp"
#include "uttertune/tokenizer.hpp"
#include "uttertune/utf8.hpp"

namespace uttertune::dataprep {

using notation::PhonemeAnnotation;
using notation::Pitch;
using tokenizer::TokenId;

/// The morae the stand-in codec can voice, in code order.
inline const std::vector<std::string>& mora_inventory() {
  static const std::vector<std::string> inv = {"ア", "イ", "ウ", "エ", "オ", "カ", "キ", "ク", "コ", "サ",
                                               "シ", "ス", "タ", "チ", "ツ", "テ", "ト", "ナ", "ニ", "ハ",
                                               "マ", "ミ", "メ", "モ", "ラ", "リ", "リョ", "ー", "ッ", "ン"};
  return inv;
}

inline constexpr std::int32_t kSpeechTokenCount = 60;

/// Index into mora_inventory(), or -1.
inline int mora_id(const std::string& surface) {
  const auto& inv = mora_inventory();
  const auto it = std::find(inv.begin(), inv.end(), surface);
  return it == inv.end() ? -1 : static_cast<int>(it - inv.begin());
}

struct SpeechTokenCode {
  int mora_id = 0;
  Pitch pitch = Pitch::kLow;
  bool operator==(const SpeechTokenCode&) const = default;
};

/// Codec index in [0, kSpeechTokenCount): 2 * mora_id + (pitch == H).
inline std::int32_t code_index(const SpeechTokenCode& c) {
  return 2 * c.mora_id + (c.pitch == Pitch::kHigh ? 1 : 0);
}

inline SpeechTokenCode code_from_index(std::int32_t index) {
  if (index < 0 || index >= kSpeechTokenCount) {
    throw Error(ErrorCode::kDecodeError, "speech code " + std::to_string(index) + " outside the codec range");
  }
  return {index / 2, (index % 2) ? Pitch::kHigh : Pitch::kLow};
}

inline TokenId encode_code(const SpeechTokenCode& c, TokenId speech_offset) { return speech_offset + code_index(c); }

inline SpeechTokenCode decode_code(TokenId id, TokenId speech_offset) {
  if (id < speech_offset || id >= speech_offset + kSpeechTokenCount) {
    throw Error(ErrorCode::kDecodeError, "token id " + std::to_string(id) + " is not a speech token");
  }
  return code_from_index(id - speech_offset);
}

/// Codec indices for the annotation (speech ids minus the speech offset).
inline std::vector<std::int32_t> render_codes(const PhonemeAnnotation& a) {
  if (a.phrases.empty()) throw Error(ErrorCode::kEmptyPhrase, "annotation has no phrases");
  const auto pitch = notation::derive_pitch(a);
  std::vector<std::int32_t> out;
  std::size_t k = 0;
  for (const auto& phrase : a.phrases) {
    if (phrase.morae.empty()) throw Error(ErrorCode::kEmptyPhrase, "annotation has an empty phrase");
    for (const auto& m : phrase.morae) {
      const int id = mora_id(m.str());
      if (id < 0) throw Error(ErrorCode::kUnknownMora, "mora '" + m.str() + "' is not in the inventory");
      out.push_back(code_index({id, pitch.levels[k++]}));
    }
  }
  return out;
}

/// Gold speech-token ids for an annotation.
inline std::vector<TokenId> render_oracle(const PhonemeAnnotation& a, TokenId speech_offset) {
  auto codes = render_codes(a);
  for (auto& c : codes) c += speech_offset;
  return codes;
}

/// Hypothesis kana and pitch levels from codec indices.
inline std::pair<std::vector<std::string>, std::vector<Pitch>> decode_codes(const std::vector<std::int32_t>& codes) {
  std::pair<std::vector<std::string>, std::vector<Pitch>> out;
  for (auto c : codes) {
    const auto sc = code_from_index(c);
    out.first.push_back(mora_inventory()[static_cast<std::size_t>(sc.mora_id)]);
    out.second.push_back(sc.pitch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lexicon

enum class WordClass { kNoun, kOther };

inline const char* word_class_name(WordClass c) { return c == WordClass::kNoun ? "noun" : "other"; }

struct Reading {
  PhonemeAnnotation annotation;
  double weight = 1.0;
  bool operator==(const Reading&) const = default;
};

struct LexiconEntry {
  std::string grapheme;
  std::vector<Reading> readings;
  WordClass pos = WordClass::kNoun;

  bool ambiguous() const { return readings.size() >= 2; }
  bool operator==(const LexiconEntry&) const = default;
};

struct Lexicon {
  std::vector<LexiconEntry> entries;

  std::vector<std::size_t> indices(bool (*pred)(const LexiconEntry&)) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (pred(entries[i])) out.push_back(i);
    return out;
  }
  bool operator==(const Lexicon&) const = default;
};

inline bool is_ambiguous_noun(const LexiconEntry& e) { return e.pos == WordClass::kNoun && e.ambiguous(); }
inline bool is_noun(const LexiconEntry& e) { return e.pos == WordClass::kNoun; }
inline bool is_unambiguous(const LexiconEntry& e) { return !e.ambiguous(); }

struct LexiconOptions {
  std::size_t graphemes = 40;
  std::size_t ambiguous_nouns = 12;
  std::size_t unambiguous_nouns = 16;
  std::size_t min_morae = 2;
  std::size_t max_morae = 5;
  /// Chance that a reading of four or more morae is split into two phrases.
  double split_probability = 0.15;
  /// Prior weights of the three readings of an ambiguous noun: the common
  /// reading, a homophone with a different accent, a different word.
  std::vector<double> ambiguous_priors = {0.55, 0.25, 0.20};
  std::uint64_t seed = 0;
};

namespace detail {

// Two-kanji graphemes are drawn from this pool without reuse.
inline const std::u32string& kanji_pool() {
  static const std::u32string pool =
      U"山川田中木林森花草竹石金銀鉄水火土風雨雪雲空海島池湖光星月日年時分春夏秋冬朝昼夜東西南北左右上"
      U"下前後内外門車船道橋町村都県国家店駅校寺社玉糸虫貝犬牛馬鳥魚米麦茶酒肉皮羽角";
  return pool;
}

inline bool standalone(const std::string& m) { return m == "ー" || m == "ッ" || m == "ン"; }

// One phrase of `len` morae. Phrases never start with ー, ッ or ン; ッ is
// never final and is followed by a full mora; ー never follows ー, ッ or ン.
inline std::vector<notation::Mora> random_phrase(Rng& rng, std::size_t len) {
  const auto& inv = mora_inventory();
  std::vector<notation::Mora> out;
  std::string prev;
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> w(inv.size(), 1.0);
    for (std::size_t k = 0; k < inv.size(); ++k) {
      const std::string& m = inv[k];
      if (standalone(m)) w[k] = 0.35;
      const bool first = (i == 0), last = (i + 1 == len);
      if (standalone(m) && first) w[k] = 0;
      if (m == "ッ" && last) w[k] = 0;
      if (standalone(m) && prev == "ッ") w[k] = 0;
      if (m == "ー" && (prev == "ー" || prev == "ン")) w[k] = 0;
      if (m == "ン" && prev == "ン") w[k] = 0;
    }
    prev = inv[rng.categorical(w)];
    out.push_back(notation::Mora{utf8::decode(prev)});
  }
  return out;
}

inline std::optional<std::size_t> random_nucleus(Rng& rng, std::size_t len) {
  if (rng.bernoulli(0.35)) return std::nullopt;
  return 1 + rng.below(len);
}

inline PhonemeAnnotation random_reading(Rng& rng, const LexiconOptions& opts) {
  const std::size_t len = opts.min_morae + rng.below(opts.max_morae - opts.min_morae + 1);
  PhonemeAnnotation a;
  if (len >= 4 && rng.bernoulli(opts.split_probability)) {
    const std::size_t first = 2 + rng.below(len - 3);
    for (std::size_t part : {first, len - first}) {
      notation::AccentPhrase p;
      p.morae = random_phrase(rng, part);
      p.nucleus = random_nucleus(rng, part);
      a.phrases.push_back(std::move(p));
    }
  } else {
    notation::AccentPhrase p;
    p.morae = random_phrase(rng, len);
    p.nucleus = random_nucleus(rng, len);
    a.phrases.push_back(std::move(p));
  }
  return a;
}

// Same morae and phrasing, different pitch pattern.
inline PhonemeAnnotation reaccent(Rng& rng, const PhonemeAnnotation& a) {
  const auto pitch = notation::derive_pitch(a);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    PhonemeAnnotation b = a;
    for (auto& p : b.phrases) p.nucleus = random_nucleus(rng, p.morae.size());
    if (notation::derive_pitch(b) != pitch) return b;
  }
  throw Error(ErrorCode::kInvalidConfig, "could not find a contrasting accent");
}

}  // namespace detail

/// Deterministic lexicon: `ambiguous_nouns` nouns with three readings,
/// `unambiguous_nouns` single-reading nouns, and single-reading other words.
/// Apart from the deliberate homophone pairs, no two readings share kana.
inline Lexicon generate_lexicon(const LexiconOptions& opts) {
  const auto& pool = detail::kanji_pool();
  if (opts.graphemes == 0) throw Error(ErrorCode::kEmptyLexicon, "lexicon must have at least one grapheme");
  if (2 * opts.graphemes > pool.size()) {
    throw Error(ErrorCode::kInvalidConfig, "at most " + std::to_string(pool.size() / 2) + " graphemes are supported");
  }
  if (opts.ambiguous_nouns + opts.unambiguous_nouns > opts.graphemes || opts.min_morae < 2 ||
      opts.max_morae < opts.min_morae || opts.ambiguous_priors.size() != 3) {
    throw Error(ErrorCode::kInvalidConfig, "inconsistent lexicon options");
  }
  Rng rng(opts.seed);
  std::vector<char32_t> kanji(pool.begin(), pool.end());
  rng.shuffle(kanji);
  std::set<std::string> used_kana;
  auto fresh = [&]() {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      PhonemeAnnotation a = detail::random_reading(rng, opts);
      if (used_kana.insert(notation::plain_kana(a)).second) return a;
    }
    throw Error(ErrorCode::kInvalidConfig, "reading space exhausted");
  };

  Lexicon lex;
  for (std::size_t i = 0; i < opts.graphemes; ++i) {
    LexiconEntry e;
    e.grapheme = utf8::encode(std::u32string{kanji[2 * i], kanji[2 * i + 1]});
    if (i < opts.ambiguous_nouns) {
      e.pos = WordClass::kNoun;
      const PhonemeAnnotation r0 = fresh();
      const PhonemeAnnotation r1 = detail::reaccent(rng, r0);
      const PhonemeAnnotation r2 = fresh();
      e.readings = {{r0, opts.ambiguous_priors[0]}, {r1, opts.ambiguous_priors[1]}, {r2, opts.ambiguous_priors[2]}};
    } else {
      e.pos = i < opts.ambiguous_nouns + opts.unambiguous_nouns ? WordClass::kNoun : WordClass::kOther;
      e.readings = {{fresh(), 1.0}};
    }
    lex.entries.push_back(std::move(e));
  }
  return lex;
}

/// Tab-separated: grapheme, class, then one "annotation:weight" per reading.
inline std::string serialize_lexicon(const Lexicon& lex) {
  std::string out = "# grapheme\tclass\treading:weight ...\n";
  char buf[40];
  for (const auto& e : lex.entries) {
    out += e.grapheme + "\t" + word_class_name(e.pos);
    for (const auto& r : e.readings) {
      std::snprintf(buf, sizeof buf, "%.17g", r.weight);
      out += "\t" + notation::render_annotation(r.annotation) + ":" + buf;
    }
    out += "\n";
  }
  return out;
}

inline Lexicon parse_lexicon(const std::string& text) {
  Lexicon lex;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = tokenizer::detail::split_tabs(line);
    if (fields.size() < 3) throw Error(ErrorCode::kCorruptFile, "lexicon line " + std::to_string(lineno));
    LexiconEntry e;
    e.grapheme = fields[0];
    if (fields[1] == "noun") {
      e.pos = WordClass::kNoun;
    } else if (fields[1] == "other") {
      e.pos = WordClass::kOther;
    } else {
      throw Error(ErrorCode::kCorruptFile, "lexicon line " + std::to_string(lineno) + ": unknown class");
    }
    for (std::size_t i = 2; i < fields.size(); ++i) {
      const auto colon = fields[i].rfind(':');
      if (colon == std::string::npos) {
        throw Error(ErrorCode::kCorruptFile, "lexicon line " + std::to_string(lineno) + ": missing weight");
      }
      Reading r;
      r.annotation = notation::parse_annotation(fields[i].substr(0, colon));
      r.weight = std::stod(fields[i].substr(colon + 1));
      if (!(r.weight > 0)) throw Error(ErrorCode::kCorruptFile, "reading weights must be positive");
      e.readings.push_back(std::move(r));
    }
    lex.entries.push_back(std::move(e));
  }
  return lex;
}

inline void save_lexicon(const Lexicon& lex, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIoError, "cannot write " + path);
  os << serialize_lexicon(lex);
}

inline Lexicon load_lexicon(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_lexicon(ss.str());
}

// ---------------------------------------------------------------------------
// Sentences

enum class Surface { kGrapheme, kKana, kTagged };

struct SentenceWord {
  std::size_t entry = 0;
  std::size_t reading = 0;
  Surface surface = Surface::kGrapheme;
  bool operator==(const SentenceWord&) const = default;
};

inline std::string word_text(const Lexicon& lex, const SentenceWord& w) {
  const auto& e = lex.entries.at(w.entry);
  const auto& a = e.readings.at(w.reading).annotation;
  switch (w.surface) {
    case Surface::kGrapheme: return e.grapheme;
    case Surface::kKana: return notation::plain_kana(a);
    case Surface::kTagged:
      return std::string(tokenizer::kPhonStart) + notation::render_annotation(a) + std::string(tokenizer::kPhonEnd);
  }
  return {};
}

inline std::string sentence_text(const Lexicon& lex, const std::vector<SentenceWord>& words) {
  std::string out;
  for (const auto& w : words) out += word_text(lex, w);
  return out;
}

inline std::vector<std::int32_t> sentence_codes(const Lexicon& lex, const std::vector<SentenceWord>& words) {
  std::vector<std::int32_t> out;
  for (const auto& w : words) {
    const auto c = render_codes(lex.entries.at(w.entry).readings.at(w.reading).annotation);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

/// Grapheme combinations reserved for evaluation: FNV-1a of the entry index
/// sequence, one in five held out.
inline bool is_held_out(const std::vector<SentenceWord>& words) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& w : words) {
    for (int b = 0; b < 4; ++b) {
      h ^= (w.entry >> (8 * b)) & 0xFF;
      h *= 1099511628211ULL;
    }
  }
  return h % 5 == 0;
}

/// One corpus line. `target_ids` are codec indices in [0, kSpeechTokenCount);
/// add the vocabulary's speech offset to get token ids.
struct CorpusRecord {
  std::string id;
  std::string input_text;
  std::vector<std::int32_t> target_ids;
  std::vector<SentenceWord> words;
  /// Index into `words` of the tagged word, or -1.
  int tagged_word = -1;

  bool operator==(const CorpusRecord&) const = default;
};

struct CorpusOptions {
  std::size_t sentences = 4000;
  double tag_fraction = 0.0;
  /// Chance that an untagged word is written in katakana instead of its
  /// grapheme.
  double kana_fraction = 0.0;
  std::size_t min_words = 2;
  std::size_t max_words = 6;
  std::uint64_t seed = 0;
};

struct AmbiguityCheck {
  std::size_t entry = 0;
  std::vector<std::size_t> counts;
  double chi_square = 0.0;
  double p_value = 1.0;
};

/// Goodness of fit of observed reading counts against the lexicon priors, for
/// every ambiguous noun. Throws AmbiguityCheck when a noun shows fewer than two
/// readings or its counts are implausible under the priors (p < 1e-6).
inline std::vector<AmbiguityCheck> check_ambiguity(const Lexicon& lex, const std::vector<CorpusRecord>& corpus) {
  std::map<std::size_t, std::vector<std::size_t>> counts;
  for (auto i : lex.indices(is_ambiguous_noun)) counts[i].assign(lex.entries[i].readings.size(), 0);
  for (const auto& r : corpus)
    for (const auto& w : r.words)
      if (counts.count(w.entry)) ++counts[w.entry][w.reading];
  std::vector<AmbiguityCheck> out;
  for (const auto& [entry, c] : counts) {
    AmbiguityCheck chk;
    chk.entry = entry;
    chk.counts = c;
    std::size_t total = 0, seen = 0;
    double wsum = 0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      total += c[k];
      seen += c[k] > 0;
      wsum += lex.entries[entry].readings[k].weight;
    }
    if (seen < 2) {
      throw Error(ErrorCode::kAmbiguityCheck, "'" + lex.entries[entry].grapheme + "' shows fewer than two readings");
    }
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double expected = static_cast<double>(total) * lex.entries[entry].readings[k].weight / wsum;
      chk.chi_square += (static_cast<double>(c[k]) - expected) * (static_cast<double>(c[k]) - expected) / expected;
    }
    const double df = static_cast<double>(c.size() - 1);
    chk.p_value = boost::math::gamma_q(df / 2.0, chk.chi_square / 2.0);
    if (chk.p_value < 1e-6) {
      throw Error(ErrorCode::kAmbiguityCheck,
                  "reading counts of '" + lex.entries[entry].grapheme + "' do not follow the priors");
    }
    out.push_back(chk);
  }
  return out;
}

/// Training sentences of 2-6 words drawn uniformly from the lexicon, readings
/// drawn from their priors. Held-out combinations are skipped. With
/// probability `tag_fraction` one noun of the sentence is written as a tagged
/// phoneme span.
inline std::vector<CorpusRecord> build_corpus(const Lexicon& lex, const CorpusOptions& opts) {
  if (lex.entries.empty()) throw Error(ErrorCode::kEmptyLexicon, "lexicon has no entries");
  if (lex.indices(is_ambiguous_noun).empty()) {
    throw Error(ErrorCode::kInvalidConfig, "lexicon has no noun with two or more readings");
  }
  if (opts.min_words < 1 || opts.max_words < opts.min_words || opts.tag_fraction < 0 || opts.tag_fraction > 1 ||
      opts.kana_fraction < 0 || opts.kana_fraction > 1) {
    throw Error(ErrorCode::kInvalidConfig, "inconsistent corpus options");
  }
  Rng rng(opts.seed);
  std::vector<CorpusRecord> out;
  while (out.size() < opts.sentences) {
    const std::size_t n = opts.min_words + rng.below(opts.max_words - opts.min_words + 1);
    std::vector<SentenceWord> words(n);
    for (auto& w : words) {
      w.entry = rng.below(lex.entries.size());
      std::vector<double> weights;
      for (const auto& r : lex.entries[w.entry].readings) weights.push_back(r.weight);
      w.reading = rng.categorical(weights);
    }
    if (is_held_out(words)) continue;
    CorpusRecord rec;
    std::vector<std::size_t> nouns;
    for (std::size_t i = 0; i < n; ++i)
      if (lex.entries[words[i].entry].pos == WordClass::kNoun) nouns.push_back(i);
    if (!nouns.empty() && rng.bernoulli(opts.tag_fraction)) {
      rec.tagged_word = static_cast<int>(nouns[rng.below(nouns.size())]);
      words[static_cast<std::size_t>(rec.tagged_word)].surface = Surface::kTagged;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<int>(i) != rec.tagged_word && rng.bernoulli(opts.kana_fraction)) words[i].surface = Surface::kKana;
    }
    rec.id = "s" + std::to_string(out.size());
    rec.input_text = sentence_text(lex, words);
    rec.target_ids = sentence_codes(lex, words);
    rec.words = std::move(words);
    out.push_back(std::move(rec));
  }
  check_ambiguity(lex, out);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation sets

enum class InputMode { kPlain, kKana, kTagged };

inline const char* mode_name(InputMode m) {
  switch (m) {
    case InputMode::kPlain: return "plain";
    case InputMode::kKana: return "kana";
    case InputMode::kTagged: return "tagged";
  }
  return "?";
}

inline InputMode parse_mode(const std::string& s) {
  if (s == "plain") return InputMode::kPlain;
  if (s == "kana") return InputMode::kKana;
  if (s == "tagged") return InputMode::kTagged;
  throw Error(ErrorCode::kInvalidConfig, "mode must be plain, kana or tagged, got '" + s + "'");
}

/// One evaluation sentence in every input variant. The scored word spans gold
/// morae [target_begin, target_end).
struct EvalItem {
  std::string id;
  std::vector<SentenceWord> words;
  std::string plain;
  std::string kana;
  std::string tagged;
  std::vector<std::int32_t> gold_codes;
  std::optional<std::size_t> target_word;
  std::size_t target_begin = 0;
  std::size_t target_end = 0;

  const std::string& input(InputMode m) const {
    return m == InputMode::kPlain ? plain : m == InputMode::kKana ? kana : tagged;
  }
  bool operator==(const EvalItem&) const = default;
};

struct EvalSets {
  /// Unambiguous words only; every variant is the plain text.
  std::vector<EvalItem> test_set_1;
  /// One ambiguous noun with a prescribed reading (uniform over its readings);
  /// plain = grapheme, kana = unmarked katakana, tagged = phoneme span.
  std::vector<EvalItem> test_set_2;
  /// One accented unambiguous word in katakana (the scored word, never tagged)
  /// plus one ambiguous noun: plain = grapheme, tagged = phoneme span.
  std::vector<EvalItem> leakage_set;
};

struct EvalSetOptions {
  std::size_t test_set_1 = 200;
  std::size_t test_set_2 = 300;
  std::size_t leakage = 240;
  std::size_t min_words = 2;
  std::size_t max_words = 6;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> mora_span(const Lexicon& lex, const std::vector<SentenceWord>& words,
                                                     std::size_t target) {
  std::size_t begin = 0;
  for (std::size_t i = 0; i < target; ++i) {
    begin += lex.entries[words[i].entry].readings[words[i].reading].annotation.mora_count();
  }
  const auto len = lex.entries[words[target].entry].readings[words[target].reading].annotation.mora_count();
  return {begin, begin + len};
}

inline std::string variant(const Lexicon& lex, std::vector<SentenceWord> words, std::optional<std::size_t> slot,
                           Surface s) {
  if (slot) words[*slot].surface = s;
  return sentence_text(lex, words);
}

inline bool accented(const PhonemeAnnotation& a) {
  for (const auto& p : a.phrases)
    if (p.nucleus) return true;
  return false;
}

}  // namespace detail

/// Builds the three evaluation sets. Every grapheme combination is held out
/// from build_corpus.
inline EvalSets build_eval_sets(const Lexicon& lex, const EvalSetOptions& opts) {
  const auto ambiguous = lex.indices(is_ambiguous_noun);
  const auto plain_words = lex.indices(is_unambiguous);
  std::vector<std::size_t> accented_words;
  for (auto i : plain_words)
    if (detail::accented(lex.entries[i].readings[0].annotation)) accented_words.push_back(i);
  if (ambiguous.empty() || plain_words.empty() || accented_words.empty()) {
    throw Error(ErrorCode::kEmptyLexicon, "lexicon lacks ambiguous, unambiguous or accented words");
  }
  Rng rng(opts.seed);
  auto pick = [&](const std::vector<std::size_t>& from) { return SentenceWord{from[rng.below(from.size())], 0}; };
  auto length = [&]() { return opts.min_words + rng.below(opts.max_words - opts.min_words + 1); };
  auto draw_held_out = [&](auto&& make) {
    while (true) {
      auto words = make();
      if (is_held_out(words)) return words;
    }
  };

  EvalSets sets;
  for (std::size_t i = 0; i < opts.test_set_1; ++i) {
    auto words = draw_held_out([&] {
      std::vector<SentenceWord> w(length());
      for (auto& x : w) x = pick(plain_words);
      return w;
    });
    EvalItem it;
    it.id = "t1-" + std::to_string(i);
    it.plain = it.kana = it.tagged = sentence_text(lex, words);
    it.gold_codes = sentence_codes(lex, words);
    it.words = std::move(words);
    sets.test_set_1.push_back(std::move(it));
  }

  for (std::size_t i = 0; i < opts.test_set_2; ++i) {
    std::size_t slot = 0;
    auto words = draw_held_out([&] {
      std::vector<SentenceWord> w(length());
      for (auto& x : w) x = pick(plain_words);
      slot = rng.below(w.size());
      w[slot] = pick(ambiguous);
      w[slot].reading = rng.below(lex.entries[w[slot].entry].readings.size());
      return w;
    });
    EvalItem it;
    it.id = "t2-" + std::to_string(i);
    it.plain = detail::variant(lex, words, slot, Surface::kGrapheme);
    it.kana = detail::variant(lex, words, slot, Surface::kKana);
    it.tagged = detail::variant(lex, words, slot, Surface::kTagged);
    it.gold_codes = sentence_codes(lex, words);
    it.target_word = slot;
    std::tie(it.target_begin, it.target_end) = detail::mora_span(lex, words, slot);
    it.words = std::move(words);
    sets.test_set_2.push_back(std::move(it));
  }

  for (std::size_t i = 0; i < opts.leakage; ++i) {
    std::size_t kana_slot = 0, tag_slot = 0;
    auto words = draw_held_out([&] {
      std::vector<SentenceWord> w(std::max<std::size_t>(length(), 2));
      for (auto& x : w) x = pick(plain_words);
      kana_slot = rng.below(w.size());
      tag_slot = (kana_slot + 1 + rng.below(w.size() - 1)) % w.size();
      w[kana_slot] = pick(accented_words);
      w[kana_slot].surface = Surface::kKana;
      w[tag_slot] = pick(ambiguous);
      w[tag_slot].reading = rng.below(lex.entries[w[tag_slot].entry].readings.size());
      return w;
    });
    EvalItem it;
    it.id = "lk-" + std::to_string(i);
    it.plain = detail::variant(lex, words, tag_slot, Surface::kGrapheme);
    it.kana = it.plain;
    it.tagged = detail::variant(lex, words, tag_slot, Surface::kTagged);
    it.gold_codes = sentence_codes(lex, words);
    it.target_word = kana_slot;
    std::tie(it.target_begin, it.target_end) = detail::mora_span(lex, words, kana_slot);
    it.words = std::move(words);
    sets.leakage_set.push_back(std::move(it));
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json words_json(const Lexicon& lex, const std::vector<SentenceWord>& words) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& w : words) {
    const auto& e = lex.entries.at(w.entry);
    arr.push_back({{"entry", w.entry},
                   {"grapheme", e.grapheme},
                   {"reading", w.reading},
                   {"annotation", notation::render_annotation(e.readings.at(w.reading).annotation)},
                   {"surface", w.surface == Surface::kGrapheme ? "grapheme"
                               : w.surface == Surface::kKana  ? "kana"
                                                              : "tagged"}});
  }
  return arr;
}

inline std::vector<SentenceWord> words_from_json(const nlohmann::json& arr) {
  std::vector<SentenceWord> out;
  for (const auto& w : arr) {
    SentenceWord s;
    s.entry = w.at("entry").get<std::size_t>();
    s.reading = w.at("reading").get<std::size_t>();
    const auto surface = w.at("surface").get<std::string>();
    s.surface = surface == "grapheme" ? Surface::kGrapheme : surface == "kana" ? Surface::kKana : Surface::kTagged;
    out.push_back(s);
  }
  return out;
}

/// One JSON object per line: input_text, target_ids, metadata.
inline std::string serialize_corpus(const Lexicon& lex, const std::vector<CorpusRecord>& corpus) {
  std::string out;
  for (const auto& r : corpus) {
    nlohmann::ordered_json j;
    j["input_text"] = r.input_text;
    j["target_ids"] = r.target_ids;
    j["metadata"] = {{"sentence_id", r.id}, {"tagged_word", r.tagged_word}, {"words", words_json(lex, r.words)}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<CorpusRecord> parse_corpus(const std::string& text) {
  std::vector<CorpusRecord> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusRecord r;
      r.input_text = j.at("input_text").get<std::string>();
      r.target_ids = j.at("target_ids").get<std::vector<std::int32_t>>();
      const auto& m = j.at("metadata");
      r.id = m.at("sentence_id").get<std::string>();
      r.tagged_word = m.at("tagged_word").get<int>();
      r.words = words_from_json(m.at("words"));
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruptFile, "corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string serialize_eval_items(const Lexicon& lex, const std::vector<EvalItem>& items) {
  std::string out;
  for (const auto& it : items) {
    nlohmann::ordered_json j;
    j["id"] = it.id;
    j["plain"] = it.plain;
    j["kana"] = it.kana;
    j["tagged"] = it.tagged;
    j["gold_codes"] = it.gold_codes;
    j["target_word"] = it.target_word ? static_cast<long long>(*it.target_word) : -1LL;
    j["target_begin"] = it.target_begin;
    j["target_end"] = it.target_end;
    j["words"] = words_json(lex, it.words);
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<EvalItem> parse_eval_items(const std::string& text) {
  std::vector<EvalItem> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EvalItem it;
      it.id = j.at("id").get<std::string>();
      it.plain = j.at("plain").get<std::string>();
      it.kana = j.at("kana").get<std::string>();
      it.tagged = j.at("tagged").get<std::string>();
      it.gold_codes = j.at("gold_codes").get<std::vector<std::int32_t>>();
      const auto tw = j.at("target_word").get<long long>();
      if (tw >= 0) it.target_word = static_cast<std::size_t>(tw);
      it.target_begin = j.at("target_begin").get<std::size_t>();
      it.target_end = j.at("target_end").get<std::size_t>();
      it.words = words_from_json(j.at("words"));
      out.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruptFile, "eval set line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token-level views

/// Plain sentences plus one line holding every kana atom and the two marks, so
/// BPE learns merges only inside graphemes while every notation symbol stays
/// coverable.
inline std::vector<std::string> vocabulary_corpus(const Lexicon& lex, const std::vector<CorpusRecord>& corpus) {
  std::vector<std::string> out;
  for (const auto& r : corpus) {
    auto words = r.words;
    for (auto& w : words) w.surface = Surface::kGrapheme;
    out.push_back(sentence_text(lex, words));
  }
  std::set<char32_t> atoms;
  for (const auto& m : mora_inventory())
    for (char32_t c : utf8::decode(m)) atoms.insert(c);
  std::u32string line(atoms.begin(), atoms.end());
  line += U"'/";
  // One character per line: single characters contribute no pairs.
  for (char32_t c : line) out.push_back(utf8::encode(c));
  return out;
}

}  // namespace uttertune::dataprep
