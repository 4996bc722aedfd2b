// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Accent-annotated katakana notation for Tokyo Japanese.
//
//   チ'ミ/モーリョー
//
// Katakana spell the morae, an apostrophe follows the mora carrying the accent
// nucleus, and a slash separates accent phrases. Both U+0027 and U+2019 are
// read as the nucleus mark; rendering always emits U+0027.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/utf8.hpp"

namespace uttertune::notation {

inline constexpr char32_t kProlongedSound = U'ー';
inline constexpr char32_t kSmallTsu = U'ッ';
inline constexpr char32_t kMoraicNasal = U'ン';
inline constexpr char32_t kAsciiApostrophe = U'\'';
inline constexpr char32_t kRightSingleQuote = U'’';
inline constexpr char32_t kPhraseBoundary = U'/';

/// Small kana that combine with the preceding base kana into one mora.
inline bool is_combining_small_kana(char32_t c) {
  switch (c) {
    case U'ャ': case U'ュ': case U'ョ':
    case U'ァ': case U'ィ': case U'ゥ': case U'ェ': case U'ォ':
      return true;
    default:
      return false;
  }
}

inline bool is_standalone_mora(char32_t c) {
  return c == kProlongedSound || c == kSmallTsu || c == kMoraicNasal;
}

/// Full-size katakana from ア to ヴ, excluding the standalone morae and the
/// small forms. ヮ, ヵ, ヶ and ヷ..ヺ are outside the supported grammar.
inline bool is_base_kana(char32_t c) {
  if (c < U'ア' || c > U'ヴ') return false;
  if (is_combining_small_kana(c) || is_standalone_mora(c)) return false;
  return c != U'ヮ';
}

inline bool is_nucleus_mark(char32_t c) { return c == kAsciiApostrophe || c == kRightSingleQuote; }

struct Mora {
  std::u32string surface;

  std::string str() const { return utf8::encode(surface); }
  bool operator==(const Mora&) const = default;
};

struct AccentPhrase {
  std::vector<Mora> morae;
  /// 1-based index of the mora carrying the accent nucleus.
  std::optional<std::size_t> nucleus;

  bool operator==(const AccentPhrase&) const = default;
};

struct PhonemeAnnotation {
  std::vector<AccentPhrase> phrases;

  std::size_t mora_count() const {
    std::size_t n = 0;
    for (const auto& p : phrases) n += p.morae.size();
    return n;
  }
  bool operator==(const PhonemeAnnotation&) const = default;
};

enum class Pitch : unsigned char { kLow = 0, kHigh = 1 };

struct PitchPattern {
  std::vector<Pitch> levels;
  bool operator==(const PitchPattern&) const = default;
};

namespace detail {

// `offset` shifts reported positions when segmenting a slice of a larger input.
inline std::vector<Mora> segment(std::u32string_view kana, std::size_t offset) {
  std::vector<Mora> morae;
  for (std::size_t i = 0; i < kana.size(); ++i) {
    const char32_t c = kana[i];
    if (is_standalone_mora(c)) {
      morae.push_back(Mora{std::u32string(1, c)});
    } else if (is_base_kana(c)) {
      Mora m{std::u32string(1, c)};
      if (i + 1 < kana.size() && is_combining_small_kana(kana[i + 1])) {
        m.surface.push_back(kana[++i]);
      }
      morae.push_back(std::move(m));
    } else if (is_combining_small_kana(c)) {
      throw Error(ErrorCode::kDanglingSmallKana,
                  "small kana '" + utf8::encode(c) + "' has no preceding base kana", offset + i);
    } else {
      throw Error(ErrorCode::kUnsupportedCharacter,
                  "'" + utf8::encode(c) + "' is not a supported katakana", offset + i);
    }
  }
  return morae;
}

}  // namespace detail

/// Splits katakana into morae. The empty string yields no morae.
inline std::vector<Mora> segment_morae(std::string_view katakana) {
  return detail::segment(utf8::decode(katakana), 0);
}

inline PhonemeAnnotation parse_annotation(std::string_view notated) {
  const std::u32string text = utf8::decode(notated);
  PhonemeAnnotation out;

  std::size_t start = 0;
  while (true) {
    std::size_t end = start;
    while (end < text.size() && text[end] != kPhraseBoundary) ++end;

    std::u32string kana;
    std::vector<std::size_t> kana_pos;   // input position of each kana
    std::vector<std::size_t> mark_after; // kana count preceding each mark
    std::vector<std::size_t> mark_pos;
    for (std::size_t i = start; i < end; ++i) {
      if (is_nucleus_mark(text[i])) {
        mark_after.push_back(kana.size());
        mark_pos.push_back(i);
      } else {
        kana.push_back(text[i]);
        kana_pos.push_back(i);
      }
    }
    if (kana.empty()) {
      throw Error(ErrorCode::kEmptyPhrase, "accent phrase has no morae", start);
    }
    if (mark_after.size() > 1) {
      throw Error(ErrorCode::kMultipleNuclei, "more than one nucleus mark in a phrase", mark_pos[1]);
    }

    // A mark directly before a small kana would otherwise surface as a
    // dangling small kana; it is the mark that is misplaced.
    if (!mark_after.empty() && mark_after[0] < kana.size() &&
        is_combining_small_kana(kana[mark_after[0]]) && mark_after[0] > 0 &&
        is_base_kana(kana[mark_after[0] - 1])) {
      throw Error(ErrorCode::kMisplacedNucleusMark, "nucleus mark splits a mora", mark_pos[0]);
    }

    AccentPhrase phrase;
    try {
      phrase.morae = detail::segment(kana, 0);
    } catch (const Error& e) {
      // segmenter positions index into `kana`; report input positions instead
      const std::size_t pos = e.position() < kana_pos.size() ? kana_pos[e.position()] : start;
      throw Error(e.code(), e.detail(), pos);
    }

    if (!mark_after.empty()) {
      const std::size_t boundary = mark_after[0];
      std::size_t consumed = 0;
      std::optional<std::size_t> nucleus;
      for (std::size_t m = 0; m < phrase.morae.size(); ++m) {
        consumed += phrase.morae[m].surface.size();
        if (consumed == boundary) {
          nucleus = m + 1;
          break;
        }
        if (consumed > boundary) break;
      }
      if (!nucleus) {
        throw Error(ErrorCode::kMisplacedNucleusMark,
                    "nucleus mark must directly follow a complete mora", mark_pos[0]);
      }
      phrase.nucleus = nucleus;
    }
    out.phrases.push_back(std::move(phrase));

    if (end == text.size()) break;
    start = end + 1;
  }
  return out;
}

inline std::string render_annotation(const PhonemeAnnotation& annotation) {
  std::string out;
  for (std::size_t p = 0; p < annotation.phrases.size(); ++p) {
    if (p > 0) out.push_back('/');
    const auto& phrase = annotation.phrases[p];
    for (std::size_t m = 0; m < phrase.morae.size(); ++m) {
      out += phrase.morae[m].str();
      if (phrase.nucleus && *phrase.nucleus == m + 1) out.push_back('\'');
    }
  }
  return out;
}

/// Katakana of the annotation with all marks removed.
inline std::string plain_kana(const PhonemeAnnotation& annotation) {
  std::string out;
  for (const auto& phrase : annotation.phrases)
    for (const auto& m : phrase.morae) out += m.str();
  return out;
}

inline std::vector<Pitch> phrase_pitch(std::size_t length, std::optional<std::size_t> nucleus) {
  std::vector<Pitch> levels(length, Pitch::kLow);
  for (std::size_t i = 1; i <= length; ++i) {
    bool high;
    if (nucleus && *nucleus == 1) {
      high = (i == 1);
    } else if (nucleus) {
      high = (i >= 2 && i <= *nucleus);
    } else {
      high = (i >= 2);
    }
    levels[i - 1] = high ? Pitch::kHigh : Pitch::kLow;
  }
  return levels;
}

inline PitchPattern derive_pitch(const PhonemeAnnotation& annotation) {
  PitchPattern out;
  for (const auto& phrase : annotation.phrases) {
    const auto levels = phrase_pitch(phrase.morae.size(), phrase.nucleus);
    out.levels.insert(out.levels.end(), levels.begin(), levels.end());
  }
  return out;
}

/// "HL LHHH": one group per accent phrase.
inline std::string format_pitch(const PhonemeAnnotation& annotation, const PitchPattern& pattern) {
  std::string out;
  std::size_t k = 0;
  for (std::size_t p = 0; p < annotation.phrases.size(); ++p) {
    if (p > 0) out.push_back(' ');
    for (std::size_t m = 0; m < annotation.phrases[p].morae.size(); ++m, ++k) {
      out.push_back(pattern.levels.at(k) == Pitch::kHigh ? 'H' : 'L');
    }
  }
  return out;
}

/// Maps hiragana onto katakana and drops everything that is not a katakana
/// letter or the prolonged-sound mark (spaces, punctuation, Latin, kanji).
inline std::string normalize_kana(std::string_view text) {
  std::u32string out;
  for (char32_t c : utf8::decode(text)) {
    if (c >= U'ぁ' && c <= U'ゖ') {
      c += 0x60;
    } else if (c == U'ゝ' || c == U'ゞ') {
      c += 0x60;
    }
    const bool letter = (c >= U'ァ' && c <= U'ヺ') || (c >= U'ー' && c <= U'ヿ');
    if (letter) out.push_back(c);
  }
  return utf8::encode(out);
}

}  // namespace uttertune::notation
