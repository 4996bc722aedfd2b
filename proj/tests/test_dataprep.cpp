// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "generators.hpp"
#include "uttertune/dataprep.hpp"

using namespace uttertune;
using namespace uttertune::dataprep;

namespace {

ErrorCode error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error";
  return ErrorCode::kInvalidConfig;
}

const Lexicon& lexicon() {
  static const Lexicon lex = generate_lexicon(LexiconOptions{});
  return lex;
}

std::size_t count(const std::string& s, std::string_view needle) {
  std::size_t n = 0;
  for (auto at = s.find(needle); at != std::string::npos; at = s.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST(RenderOracle, AccentedOnFirstMora) {
  // チ is mora 13 and ミ mora 21: (チ,H) then (ミ,L).
  const auto a = notation::parse_annotation("チ'ミ");
  EXPECT_EQ(render_codes(a), (std::vector<std::int32_t>{27, 42}));
  EXPECT_EQ(render_oracle(a, 100), (std::vector<TokenId>{127, 142}));
}

TEST(RenderOracle, UnaccentedRises) {
  // ア is mora 0 and メ mora 22: (ア,L) then (メ,H).
  EXPECT_EQ(render_codes(notation::parse_annotation("アメ")), (std::vector<std::int32_t>{0, 45}));
}

TEST(RenderOracle, ConcatenatesPhrases) {
  const auto two = render_codes(notation::parse_annotation("チ'ミ/アメ"));
  EXPECT_EQ(two, (std::vector<std::int32_t>{27, 42, 0, 45}));
}

TEST(RenderOracle, PitchAndMoraAgreeWithNotation) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto a = gen::inventory_annotation(rng);
    const auto [kana, pitch] = decode_codes(render_codes(a));
    ASSERT_EQ(pitch, notation::derive_pitch(a).levels);
    std::vector<std::string> morae;
    for (const auto& p : a.phrases)
      for (const auto& m : p.morae) morae.push_back(m.str());
    ASSERT_EQ(kana, morae);
  }
}

TEST(RenderOracle, Errors) {
  EXPECT_EQ(error_of([] { render_codes(PhonemeAnnotation{}); }), ErrorCode::kEmptyPhrase);
  EXPECT_EQ(error_of([] { render_codes(notation::parse_annotation("ヌ")); }), ErrorCode::kUnknownMora);
  PhonemeAnnotation a = notation::parse_annotation("アメ");
  a.phrases.emplace_back();
  EXPECT_EQ(error_of([&] { render_codes(a); }), ErrorCode::kEmptyPhrase);
}

TEST(Codec, EveryCodeRoundTrips) {
  std::set<TokenId> ids;
  for (int m = 0; m < static_cast<int>(mora_inventory().size()); ++m) {
    for (Pitch p : {Pitch::kLow, Pitch::kHigh}) {
      const SpeechTokenCode c{m, p};
      const TokenId id = encode_code(c, 7);
      ASSERT_EQ(decode_code(id, 7), c);
      ids.insert(id);
    }
  }
  EXPECT_EQ(ids.size(), static_cast<std::size_t>(kSpeechTokenCount));
  EXPECT_EQ(*ids.begin(), 7);
  EXPECT_EQ(*ids.rbegin(), 7 + kSpeechTokenCount - 1);
}

TEST(Codec, OutOfRangeIdsAreDecodeErrors) {
  EXPECT_EQ(error_of([] { decode_code(6, 7); }), ErrorCode::kDecodeError);
  EXPECT_EQ(error_of([] { decode_code(7 + kSpeechTokenCount, 7); }), ErrorCode::kDecodeError);
  EXPECT_EQ(error_of([] { code_from_index(-1); }), ErrorCode::kDecodeError);
}

TEST(Codec, InventoryIsDistinctAndParseable) {
  const auto& inv = mora_inventory();
  EXPECT_EQ(inv.size() * 2, static_cast<std::size_t>(kSpeechTokenCount));
  EXPECT_EQ(std::set<std::string>(inv.begin(), inv.end()).size(), inv.size());
  for (const auto& m : inv) EXPECT_EQ(notation::segment_morae(m).size(), 1u) << m;
}

TEST(Lexicon, ShapeFollowsOptions) {
  const auto& lex = lexicon();
  const LexiconOptions o;
  ASSERT_EQ(lex.entries.size(), o.graphemes);
  EXPECT_EQ(lex.indices(is_ambiguous_noun).size(), o.ambiguous_nouns);
  EXPECT_EQ(lex.indices(is_noun).size(), o.ambiguous_nouns + o.unambiguous_nouns);
  std::set<std::string> graphemes;
  for (const auto& e : lex.entries) {
    graphemes.insert(e.grapheme);
    ASSERT_TRUE(e.readings.size() == 1 || e.readings.size() == 3) << e.grapheme;
    for (const auto& r : e.readings) {
      EXPECT_GE(r.annotation.mora_count(), o.min_morae);
      EXPECT_LE(r.annotation.mora_count(), o.max_morae);
      EXPECT_NO_THROW(render_codes(r.annotation));
    }
    if (e.ambiguous()) {
      for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(e.readings[k].weight, o.ambiguous_priors[k]);
      // The second reading shares kana with the first but not the accent.
      EXPECT_EQ(notation::plain_kana(e.readings[1].annotation), notation::plain_kana(e.readings[0].annotation));
      EXPECT_NE(notation::derive_pitch(e.readings[1].annotation), notation::derive_pitch(e.readings[0].annotation));
      EXPECT_NE(notation::plain_kana(e.readings[2].annotation), notation::plain_kana(e.readings[0].annotation));
    }
  }
  EXPECT_EQ(graphemes.size(), lex.entries.size());
}

TEST(Lexicon, DeterministicAndSeedDependent) {
  LexiconOptions o;
  o.seed = 3;
  EXPECT_EQ(generate_lexicon(o), generate_lexicon(o));
  o.seed = 4;
  EXPECT_NE(generate_lexicon(o), lexicon());
}

TEST(Lexicon, SerializationRoundTrips) {
  for (std::uint64_t seed : {0, 1, 2}) {
    LexiconOptions o;
    o.seed = seed;
    const auto lex = generate_lexicon(o);
    EXPECT_EQ(parse_lexicon(serialize_lexicon(lex)), lex);
  }
}

TEST(Corpus, UntaggedCorpusHasNoTags) {
  CorpusOptions o;
  o.sentences = 500;
  for (const auto& r : build_corpus(lexicon(), o)) {
    ASSERT_EQ(r.tagged_word, -1);
    ASSERT_EQ(r.input_text.find("<PHON_START>"), std::string::npos);
  }
}

TEST(Corpus, FullyTaggedCorpusTagsOneNounPerSentence) {
  CorpusOptions o;
  o.sentences = 500;
  o.tag_fraction = 1.0;
  o.seed = 1;
  const auto& lex = lexicon();
  for (const auto& r : build_corpus(lex, o)) {
    const bool has_noun = std::any_of(r.words.begin(), r.words.end(),
                                      [&](const SentenceWord& w) { return is_noun(lex.entries[w.entry]); });
    ASSERT_EQ(count(r.input_text, "<PHON_START>"), has_noun ? 1u : 0u) << r.input_text;
    ASSERT_EQ(count(r.input_text, "<PHON_END>"), has_noun ? 1u : 0u);
    if (has_noun) {
      ASSERT_TRUE(is_noun(lex.entries[r.words[static_cast<std::size_t>(r.tagged_word)].entry]));
    }
  }
}

TEST(Corpus, TargetsComeFromTheRenderOracle) {
  CorpusOptions o;
  o.sentences = 300;
  o.tag_fraction = 0.5;
  o.kana_fraction = 0.2;
  o.seed = 2;
  const auto& lex = lexicon();
  for (const auto& r : build_corpus(lex, o)) {
    std::vector<std::int32_t> expected;
    for (const auto& w : r.words) {
      const auto c = render_codes(lex.entries[w.entry].readings[w.reading].annotation);
      expected.insert(expected.end(), c.begin(), c.end());
    }
    ASSERT_EQ(r.target_ids, expected);
    ASSERT_FALSE(is_held_out(r.words));
    if (r.tagged_word >= 0) {
      const auto& w = r.words[static_cast<std::size_t>(r.tagged_word)];
      const auto span = "<PHON_START>" + notation::render_annotation(lex.entries[w.entry].readings[w.reading].annotation) +
                        "<PHON_END>";
      ASSERT_NE(r.input_text.find(span), std::string::npos);
    }
  }
}

TEST(Corpus, DeterministicForSeed) {
  CorpusOptions o;
  o.sentences = 200;
  o.tag_fraction = 0.3;
  o.seed = 9;
  EXPECT_EQ(build_corpus(lexicon(), o), build_corpus(lexicon(), o));
}

TEST(Corpus, EmptyLexiconIsRejected) {
  EXPECT_EQ(error_of([] { build_corpus(Lexicon{}, CorpusOptions{}); }), ErrorCode::kEmptyLexicon);
}

TEST(Corpus, ReadingFrequenciesFollowPriors) {
  CorpusOptions o;
  o.sentences = 4000;
  const auto checks = check_ambiguity(lexicon(), build_corpus(lexicon(), o));
  EXPECT_EQ(checks.size(), LexiconOptions{}.ambiguous_nouns);
  for (const auto& c : checks) EXPECT_GT(c.p_value, 1e-6);
}

TEST(Corpus, AmbiguityCheckCatchesCollapsedReadings) {
  CorpusOptions o;
  o.sentences = 2000;
  auto corpus = build_corpus(lexicon(), o);
  for (auto& r : corpus)
    for (auto& w : r.words) w.reading = 0;
  EXPECT_EQ(error_of([&] { check_ambiguity(lexicon(), corpus); }), ErrorCode::kAmbiguityCheck);
  // Heavily skewed but still mixed counts fail the goodness-of-fit test.
  corpus = build_corpus(lexicon(), o);
  for (auto& r : corpus)
    for (auto& w : r.words)
      if (w.reading == 2) w.reading = 1;
  EXPECT_EQ(error_of([&] { check_ambiguity(lexicon(), corpus); }), ErrorCode::kAmbiguityCheck);
}

TEST(Corpus, SerializationRoundTrips) {
  CorpusOptions o;
  o.sentences = 2000;
  o.tag_fraction = 0.5;
  const auto corpus = build_corpus(lexicon(), o);
  EXPECT_EQ(parse_corpus(serialize_corpus(lexicon(), corpus)), corpus);
}

TEST(EvalSets, SizesAndHeldOut) {
  const auto sets = build_eval_sets(lexicon(), EvalSetOptions{});
  EXPECT_EQ(sets.test_set_1.size(), 200u);
  EXPECT_EQ(sets.test_set_2.size(), 300u);
  EXPECT_EQ(sets.leakage_set.size(), 240u);
  CorpusOptions o;
  o.sentences = 5000;
  std::set<std::vector<std::size_t>> train;
  for (const auto& r : build_corpus(lexicon(), o)) {
    std::vector<std::size_t> key;
    for (const auto& w : r.words) key.push_back(w.entry);
    train.insert(key);
  }
  for (const auto* set : {&sets.test_set_1, &sets.test_set_2, &sets.leakage_set}) {
    for (const auto& it : *set) {
      ASSERT_TRUE(is_held_out(it.words));
      std::vector<std::size_t> key;
      for (const auto& w : it.words) key.push_back(w.entry);
      ASSERT_FALSE(train.count(key)) << it.id;
    }
  }
}

TEST(EvalSets, TestSetOneHasOnlyUnambiguousWords) {
  const auto& lex = lexicon();
  for (const auto& it : build_eval_sets(lex, EvalSetOptions{}).test_set_1) {
    for (const auto& w : it.words) ASSERT_FALSE(lex.entries[w.entry].ambiguous());
    ASSERT_EQ(it.plain, it.tagged);
    ASSERT_EQ(it.gold_codes, sentence_codes(lex, it.words));
  }
}

TEST(EvalSets, TestSetTwoHasExactlyOneAmbiguousTarget) {
  const auto& lex = lexicon();
  std::set<std::size_t> readings;
  for (const auto& it : build_eval_sets(lex, EvalSetOptions{}).test_set_2) {
    std::size_t ambiguous = 0;
    for (const auto& w : it.words) ambiguous += lex.entries[w.entry].ambiguous();
    ASSERT_EQ(ambiguous, 1u);
    ASSERT_TRUE(it.target_word);
    const auto& target = it.words[*it.target_word];
    ASSERT_TRUE(lex.entries[target.entry].ambiguous());
    readings.insert(target.reading);
    const auto& reading = lex.entries[target.entry].readings[target.reading].annotation;
    ASSERT_EQ(it.target_end - it.target_begin, reading.mora_count());
    const auto codes = render_codes(reading);
    ASSERT_TRUE(std::equal(codes.begin(), codes.end(), it.gold_codes.begin() + static_cast<long>(it.target_begin)));

    ASSERT_EQ(count(it.tagged, "<PHON_START>"), 1u);
    ASSERT_NE(it.tagged.find(notation::render_annotation(reading)), std::string::npos);
    ASSERT_NE(it.plain.find(lex.entries[target.entry].grapheme), std::string::npos);
    // The kana variant drops the marks: no tags, apostrophes or slashes.
    ASSERT_NE(it.kana.find(notation::plain_kana(reading)), std::string::npos);
    ASSERT_EQ(it.kana.find('\''), std::string::npos);
    ASSERT_EQ(it.kana.find('/'), std::string::npos);
    ASSERT_EQ(it.kana.find('<'), std::string::npos);
  }
  EXPECT_EQ(readings.size(), 3u);
}

TEST(EvalSets, LeakageScoresAnUntaggedAccentedWord) {
  const auto& lex = lexicon();
  for (const auto& it : build_eval_sets(lex, EvalSetOptions{}).leakage_set) {
    ASSERT_TRUE(it.target_word);
    const auto& target = it.words[*it.target_word];
    ASSERT_EQ(target.surface, Surface::kKana);
    ASSERT_FALSE(lex.entries[target.entry].ambiguous());
    ASSERT_EQ(count(it.tagged, "<PHON_START>"), 1u);
    ASSERT_EQ(count(it.plain, "<PHON_START>"), 0u);
    const auto& a = lex.entries[target.entry].readings[0].annotation;
    ASSERT_NE(it.plain.find(notation::plain_kana(a)), std::string::npos);
    ASSERT_EQ(it.target_end - it.target_begin, a.mora_count());
  }
}

TEST(EvalSets, DeterministicAndSerializable) {
  EvalSetOptions o;
  o.seed = 5;
  const auto a = build_eval_sets(lexicon(), o);
  const auto b = build_eval_sets(lexicon(), o);
  EXPECT_EQ(a.test_set_2, b.test_set_2);
  EXPECT_EQ(a.leakage_set, b.leakage_set);
  for (const auto* set : {&a.test_set_1, &a.test_set_2, &a.leakage_set}) {
    EXPECT_EQ(parse_eval_items(serialize_eval_items(lexicon(), *set)), *set);
  }
}

TEST(EvalSets, ModeNames) {
  for (auto m : {InputMode::kPlain, InputMode::kKana, InputMode::kTagged}) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_EQ(error_of([] { parse_mode("phoneme"); }), ErrorCode::kInvalidConfig);
}
