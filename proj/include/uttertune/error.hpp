// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace uttertune {

enum class ErrorCode {
  // notation
  kUnsupportedCharacter,
  kDanglingSmallKana,
  kEmptyPhrase,
  kMultipleNuclei,
  kMisplacedNucleusMark,
  // tokenizer
  kVocabTooSmall,
  kUnbalancedTags,
  kNestedTags,
  kInvalidAnnotation,
  kUncoveredSymbol,
  kReservedLiteral,
  kUnknownTokenId,
  // lora / model
  kInvalidRank,
  kShapeMismatch,
  kSequenceTooLong,
  kNonFiniteLoss,
  kInvalidConfig,
  // persistence
  kVersionMismatch,
  kCorruptFile,
  kIoError,
  // dataprep / eval
  kUnknownMora,
  kEmptyLexicon,
  kAmbiguityCheck,
  kDecodeError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnsupportedCharacter: return "UnsupportedCharacter";
    case ErrorCode::kDanglingSmallKana: return "DanglingSmallKana";
    case ErrorCode::kEmptyPhrase: return "EmptyPhrase";
    case ErrorCode::kMultipleNuclei: return "MultipleNuclei";
    case ErrorCode::kMisplacedNucleusMark: return "MisplacedNucleusMark";
    case ErrorCode::kVocabTooSmall: return "VocabTooSmall";
    case ErrorCode::kUnbalancedTags: return "UnbalancedTags";
    case ErrorCode::kNestedTags: return "NestedTags";
    case ErrorCode::kInvalidAnnotation: return "InvalidAnnotation";
    case ErrorCode::kUncoveredSymbol: return "UncoveredSymbol";
    case ErrorCode::kReservedLiteral: return "ReservedLiteral";
    case ErrorCode::kUnknownTokenId: return "UnknownTokenId";
    case ErrorCode::kInvalidRank: return "InvalidRank";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kUnknownMora: return "UnknownMora";
    case ErrorCode::kEmptyLexicon: return "EmptyLexicon";
    case ErrorCode::kAmbiguityCheck: return "AmbiguityCheck";
    case ErrorCode::kDecodeError: return "DecodeError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `code()` identifies the failure kind;
/// `position()` is a code-point offset into the offending input when one
/// applies, otherwise npos.
class Error : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  Error(ErrorCode code, const std::string& detail, std::size_t position = npos)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail),
        position_(position) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }
  std::size_t position() const noexcept { return position_; }

 private:
  ErrorCode code_;
  std::string detail_;
  std::size_t position_;
};

}  // namespace uttertune
