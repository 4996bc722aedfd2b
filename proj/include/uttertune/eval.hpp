// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Kana CER, accent correctness and the untagged-word leakage comparison.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "uttertune/dataprep.hpp"
#include "uttertune/error.hpp"
#include "uttertune/notation.hpp"
#include "uttertune/rng.hpp"
#include "uttertune/utf8.hpp"

namespace uttertune::eval {

using dataprep::EvalItem;
using dataprep::InputMode;
using notation::Pitch;
using tokenizer::TokenId;

/// Unit-cost Levenshtein distance.
template <class Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Edit distance over normalize_kana output divided by the normalized
/// reference length. An empty reference scores 0 against an empty hypothesis
/// and 1 otherwise.
inline double cer(std::string_view reference, std::string_view hypothesis) {
  const std::u32string r = utf8::decode(notation::normalize_kana(reference));
  const std::u32string h = utf8::decode(notation::normalize_kana(hypothesis));
  if (r.empty()) return h.empty() ? 0.0 : 1.0;
  return static_cast<double>(edit_distance(r, h)) / static_cast<double>(r.size());
}

inline constexpr double kExclusionThreshold = 0.5;

/// (reference index, hypothesis index) pairs of a minimum-cost alignment;
/// -1 marks a gap. Ties prefer diagonal, then deletion, then insertion.
template <class Seq>
std::vector<std::pair<long, long>> align(const Seq& ref, const Seq& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<std::size_t>> d(n + 1, std::vector<std::size_t>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[i - 1][j] + 1, d[i][j - 1] + 1});
  std::vector<std::pair<long, long>> out;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      out.emplace_back(static_cast<long>(i - 1), static_cast<long>(j - 1));
      --i, --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      out.emplace_back(static_cast<long>(i - 1), -1);
      --i;
    } else {
      out.emplace_back(-1, static_cast<long>(j - 1));
      --j;
    }
  }
  std::reverse(out.begin(), out.end());
  return out;
}

/// True when the gold morae [begin, end) are reproduced exactly, with the gold
/// pitch on each, and nothing is inserted between them.
inline bool target_correct(const std::vector<std::int32_t>& gold, const std::vector<std::int32_t>& hyp,
                           std::size_t begin, std::size_t end) {
  std::vector<int> gold_morae, hyp_morae;
  for (auto c : gold) gold_morae.push_back(c / 2);
  for (auto c : hyp) hyp_morae.push_back(c / 2);
  const auto pairs = align(gold_morae, hyp_morae);
  bool inside = false, inserted = false;
  for (const auto& [g, h] : pairs) {
    if (g >= 0 && static_cast<std::size_t>(g) >= end) break;
    if (g >= 0 && static_cast<std::size_t>(g) >= begin) {
      if (inserted) return false;
      inside = true;
      if (h < 0 || gold[static_cast<std::size_t>(g)] != hyp[static_cast<std::size_t>(h)]) return false;
    } else if (g < 0 && inside) {
      // Only counts once another target mora follows; trailing insertions
      // belong to the next word.
      inserted = true;
    }
  }
  return true;
}

struct EvalRow {
  std::string id;
  std::string reference;
  std::string hypothesis;
  std::string hypothesis_pitch;
  double cer = 0.0;
  std::optional<bool> accent_correct;
  bool excluded = false;
  std::string reason;

  bool operator==(const EvalRow&) const = default;
};

struct Aggregates {
  std::size_t items = 0;
  std::size_t excluded = 0;
  std::size_t accent_scored = 0;
  std::size_t accent_correct = 0;
  double mean_cer = 0.0;
  double accent_correctness = 0.0;

  bool operator==(const Aggregates&) const = default;
};

/// Excluded rows are left out of every aggregate.
inline Aggregates aggregate(const std::vector<EvalRow>& rows) {
  Aggregates a;
  a.items = rows.size();
  double cer_sum = 0.0;
  for (const auto& r : rows) {
    if (r.excluded) {
      ++a.excluded;
      continue;
    }
    cer_sum += r.cer;
    if (r.accent_correct) {
      ++a.accent_scored;
      a.accent_correct += *r.accent_correct ? 1 : 0;
    }
  }
  const std::size_t kept = a.items - a.excluded;
  a.mean_cer = kept ? cer_sum / static_cast<double>(kept) : 0.0;
  a.accent_correctness = a.accent_scored ? static_cast<double>(a.accent_correct) / static_cast<double>(a.accent_scored) : 0.0;
  return a;
}

struct EvalReport {
  std::string set;
  InputMode mode = InputMode::kPlain;
  std::vector<EvalRow> rows;
  Aggregates summary;

  bool operator==(const EvalReport&) const = default;
};

inline std::string pitch_string(const std::vector<Pitch>& p) {
  std::string s;
  for (auto x : p) s.push_back(x == Pitch::kHigh ? 'H' : 'L');
  return s;
}

/// Scores one generated id sequence against its item.
inline EvalRow score_item(const EvalItem& item, const std::vector<TokenId>& generated, TokenId speech_offset) {
  EvalRow row;
  row.id = item.id;
  std::vector<std::int32_t> codes;
  for (TokenId id : generated) codes.push_back(code_index(dataprep::decode_code(id, speech_offset)));
  const auto [hyp_morae, hyp_pitch] = dataprep::decode_codes(codes);
  const auto [gold_morae, gold_pitch] = dataprep::decode_codes(item.gold_codes);
  for (const auto& m : gold_morae) row.reference += m;
  for (const auto& m : hyp_morae) row.hypothesis += m;
  row.hypothesis_pitch = pitch_string(hyp_pitch);
  row.cer = cer(row.reference, row.hypothesis);
  if (item.target_word) row.accent_correct = target_correct(item.gold_codes, codes, item.target_begin, item.target_end);
  if (row.cer > kExclusionThreshold) {
    row.excluded = true;
    row.reason = "cer>0.5";
  }
  return row;
}

/// Worker count: UTTERTUNE_THREADS when set to a positive integer, otherwise
/// the hardware concurrency.
inline std::size_t eval_threads() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("UTTERTUNE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return hw;
}

/// Runs `generate(input_text) -> token ids` on every item. Items are spread
/// over worker threads; rows land in item order, so the report does not depend
/// on the thread count.
template <class Generator>
EvalReport evaluate_set(Generator&& generate, const std::vector<EvalItem>& items, InputMode mode,
                        TokenId speech_offset, const std::string& set_name, std::size_t threads = eval_threads()) {
  EvalReport report;
  report.set = set_name;
  report.mode = mode;
  report.rows.resize(items.size());
  threads = std::max<std::size_t>(1, std::min(threads, items.size()));
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t worker) {
    try {
      for (std::size_t i = worker; i < items.size(); i += threads) {
        report.rows[i] = score_item(items[i], generate(items[i].input(mode)), speech_offset);
      }
    } catch (...) {
      errors[worker] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  report.summary = aggregate(report.rows);
  return report;
}

/// One JSON object per row, then a {"summary": ...} line.
inline std::string serialize_report(const EvalReport& r) {
  std::string out;
  for (const auto& row : r.rows) {
    nlohmann::ordered_json j;
    j["id"] = row.id;
    j["reference"] = row.reference;
    j["hypothesis"] = row.hypothesis;
    j["hypothesis_pitch"] = row.hypothesis_pitch;
    j["cer"] = row.cer;
    if (row.accent_correct) {
      j["accent_correct"] = *row.accent_correct;
    } else {
      j["accent_correct"] = nullptr;
    }
    j["excluded"] = row.excluded;
    j["reason"] = row.reason;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["set"] = r.set;
  s["mode"] = dataprep::mode_name(r.mode);
  s["items"] = r.summary.items;
  s["excluded"] = r.summary.excluded;
  s["mean_cer"] = r.summary.mean_cer;
  s["accent_scored"] = r.summary.accent_scored;
  s["accent_correct"] = r.summary.accent_correct;
  s["accent_correctness"] = r.summary.accent_correctness;
  nlohmann::ordered_json wrap;
  wrap["summary"] = s;
  out += wrap.dump() + "\n";
  return out;
}

inline EvalReport parse_report(const std::string& text) {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  bool have_summary = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("summary")) {
        const auto& s = j.at("summary");
        r.set = s.at("set").get<std::string>();
        r.mode = dataprep::parse_mode(s.at("mode").get<std::string>());
        r.summary.items = s.at("items").get<std::size_t>();
        r.summary.excluded = s.at("excluded").get<std::size_t>();
        r.summary.mean_cer = s.at("mean_cer").get<double>();
        r.summary.accent_scored = s.at("accent_scored").get<std::size_t>();
        r.summary.accent_correct = s.at("accent_correct").get<std::size_t>();
        r.summary.accent_correctness = s.at("accent_correctness").get<double>();
        have_summary = true;
        continue;
      }
      EvalRow row;
      row.id = j.at("id").get<std::string>();
      row.reference = j.at("reference").get<std::string>();
      row.hypothesis = j.at("hypothesis").get<std::string>();
      row.hypothesis_pitch = j.at("hypothesis_pitch").get<std::string>();
      row.cer = j.at("cer").get<double>();
      if (!j.at("accent_correct").is_null()) row.accent_correct = j.at("accent_correct").get<bool>();
      row.excluded = j.at("excluded").get<bool>();
      row.reason = j.at("reason").get<std::string>();
      r.rows.push_back(std::move(row));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruptFile, std::string("report line: ") + e.what());
    }
  }
  if (!have_summary) throw Error(ErrorCode::kCorruptFile, "report has no summary line");
  return r;
}

/// Summary table line: set, mode, CER, accent correctness, counts.
inline std::string format_summary(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %-7s CER %.4f  accent %.4f (%zu/%zu)  excluded %zu/%zu", r.set.c_str(),
                dataprep::mode_name(r.mode), r.summary.mean_cer, r.summary.accent_correctness, r.summary.accent_correct,
                r.summary.accent_scored, r.summary.excluded, r.summary.items);
  return buf;
}

// ---------------------------------------------------------------------------
// Leakage

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
  double half_width() const { return (high - low) / 2.0; }
  bool contains(double x) const { return low <= x && x <= high; }
};

/// Percentile bootstrap interval for mean(b) - mean(a) over paired samples.
inline ConfidenceInterval paired_bootstrap_ci(const std::vector<double>& a, const std::vector<double>& b,
                                              double confidence, std::size_t resamples, std::uint64_t seed) {
  if (a.size() != b.size() || a.empty()) throw Error(ErrorCode::kShapeMismatch, "bootstrap needs equal, non-empty samples");
  if (resamples == 0 || !(confidence > 0.0 && confidence < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "bootstrap needs resamples > 0 and confidence in (0, 1)");
  }
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = b[i] - a[i];
  Rng rng(seed);
  std::vector<double> stats(resamples);
  for (auto& s : stats) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += diff[rng.below(n)];
    s = sum / static_cast<double>(n);
  }
  std::sort(stats.begin(), stats.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return stats[lo] + (pos - static_cast<double>(lo)) * (stats[hi] - stats[lo]);
  };
  const double tail = (1.0 - confidence) / 2.0;
  return {quantile(tail), quantile(1.0 - tail)};
}

struct LeakageOutcome {
  std::string id;
  bool baseline_correct = false;
  bool adapted_correct = false;
};

struct LeakageResult {
  double baseline_rate = 0.0;
  double adapted_rate = 0.0;
  /// adapted_rate - baseline_rate
  double difference = 0.0;
  ConfidenceInterval ci;
  std::vector<LeakageOutcome> outcomes;
};

struct LeakageOptions {
  double confidence = 0.99;
  std::size_t resamples = 10000;
  std::uint64_t seed = 0;
};

/// Untagged-word accent correctness of both models, item by item. The
/// baseline reads each item's plain variant and the adapted model its tagged
/// variant; the scored word is untagged in both. Every item counts, whatever
/// its CER.
template <class BaselineGen, class AdaptedGen>
LeakageResult leakage_test(BaselineGen&& baseline, AdaptedGen&& adapted, const std::vector<EvalItem>& items,
                           TokenId speech_offset, const LeakageOptions& opts = {},
                           std::size_t threads = eval_threads()) {
  const auto base = evaluate_set(baseline, items, InputMode::kPlain, speech_offset, "leakage", threads);
  const auto adap = evaluate_set(adapted, items, InputMode::kTagged, speech_offset, "leakage", threads);
  LeakageResult r;
  std::vector<double> a, b;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const bool bc = base.rows[i].accent_correct.value_or(false);
    const bool ac = adap.rows[i].accent_correct.value_or(false);
    r.outcomes.push_back({items[i].id, bc, ac});
    a.push_back(bc ? 1.0 : 0.0);
    b.push_back(ac ? 1.0 : 0.0);
  }
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sa += a[i], sb += b[i];
  r.baseline_rate = a.empty() ? 0.0 : sa / static_cast<double>(a.size());
  r.adapted_rate = b.empty() ? 0.0 : sb / static_cast<double>(b.size());
  r.difference = r.adapted_rate - r.baseline_rate;
  r.ci = paired_bootstrap_ci(a, b, opts.confidence, opts.resamples, opts.seed);
  return r;
}

inline std::string serialize_leakage(const LeakageResult& r) {
  std::string out;
  for (const auto& o : r.outcomes) {
    nlohmann::ordered_json j;
    j["id"] = o.id;
    j["baseline_correct"] = o.baseline_correct;
    j["adapted_correct"] = o.adapted_correct;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["baseline_rate"] = r.baseline_rate;
  s["adapted_rate"] = r.adapted_rate;
  s["difference"] = r.difference;
  s["ci_low"] = r.ci.low;
  s["ci_high"] = r.ci.high;
  s["items"] = r.outcomes.size();
  nlohmann::ordered_json wrap;
  wrap["summary"] = s;
  out += wrap.dump() + "\n";
  return out;
}

}  // namespace uttertune::eval
