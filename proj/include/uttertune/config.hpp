// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Flat "key = value" view of a run configuration, used by config files and
// run manifests.

#pragma once

#include <charconv>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/pipeline.hpp"

namespace uttertune {

/// Limits checked by `eval`; unset limits are not checked.
struct EvalThresholds {
  std::optional<double> min_accent;
  std::optional<double> max_cer;
};

struct RunConfig {
  PipelineConfig pipeline;
  EvalThresholds thresholds;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      v = static_cast<T>(std::stod(text, &used));
      if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
  } else {
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec == std::errc() && ptr == end) return v;
  }
  throw Error(ErrorCode::kInvalidConfig, "bad value '" + text + "' for " + key);
}

struct Binding {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class T>
Binding number(std::string key, T& field) {
  return {key, [&field] {
            if constexpr (std::is_floating_point_v<T>) return format_number(field);
            else return std::to_string(field);
          },
          [&field, key](const std::string& v) { field = parse_number<T>(key, v); }};
}

inline Binding optional_number(std::string key, std::optional<double>& field) {
  return {key, [&field] { return field ? format_number(*field) : std::string("none"); },
          [&field, key](const std::string& v) {
            if (v == "none" || v.empty()) field.reset();
            else field = parse_number<double>(key, v);
          }};
}

inline void bind_corpus(std::vector<Binding>& b, const std::string& p, dataprep::CorpusOptions& c) {
  b.push_back(number(p + ".sentences", c.sentences));
  b.push_back(number(p + ".tag_fraction", c.tag_fraction));
  b.push_back(number(p + ".kana_fraction", c.kana_fraction));
  b.push_back(number(p + ".min_words", c.min_words));
  b.push_back(number(p + ".max_words", c.max_words));
}

inline void bind_train(std::vector<Binding>& b, const std::string& p, TrainConfig& t) {
  b.push_back(number(p + ".learning_rate", t.learning_rate));
  b.push_back(number(p + ".warmup_fraction", t.warmup_fraction));
  b.push_back(number(p + ".batch_size", t.batch_size));
  b.push_back(number(p + ".steps", t.steps));
  b.push_back(number(p + ".weight_decay", t.weight_decay));
  b.push_back(number(p + ".clip_norm", t.clip_norm));
  b.push_back(number(p + ".log_every", t.log_every));
}

inline std::vector<Binding> bindings(RunConfig& rc) {
  auto& c = rc.pipeline;
  std::vector<Binding> b;
  b.push_back(number("seed", c.seed));
  b.push_back(number("lexicon.graphemes", c.lexicon.graphemes));
  b.push_back(number("lexicon.ambiguous_nouns", c.lexicon.ambiguous_nouns));
  b.push_back(number("lexicon.unambiguous_nouns", c.lexicon.unambiguous_nouns));
  b.push_back(number("lexicon.min_morae", c.lexicon.min_morae));
  b.push_back(number("lexicon.max_morae", c.lexicon.max_morae));
  b.push_back(number("lexicon.split_probability", c.lexicon.split_probability));
  b.push_back({"lexicon.priors",
               [&c] {
                 std::string s;
                 for (double w : c.lexicon.ambiguous_priors) s += (s.empty() ? "" : ",") + format_number(w);
                 return s;
               },
               [&c](const std::string& v) {
                 std::vector<double> w;
                 std::size_t pos = 0;
                 while (pos <= v.size()) {
                   const auto comma = v.find(',', pos);
                   const auto item = v.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                   w.push_back(parse_number<double>("lexicon.priors", item));
                   if (comma == std::string::npos) break;
                   pos = comma + 1;
                 }
                 if (w.size() != 3) throw Error(ErrorCode::kInvalidConfig, "lexicon.priors needs three weights");
                 c.lexicon.ambiguous_priors = w;
               }});
  bind_corpus(b, "base_corpus", c.base_corpus);
  bind_corpus(b, "adapter_corpus", c.adapter_corpus);
  b.push_back(number("eval_sets.test_set_1", c.eval_sets.test_set_1));
  b.push_back(number("eval_sets.test_set_2", c.eval_sets.test_set_2));
  b.push_back(number("eval_sets.leakage", c.eval_sets.leakage));
  b.push_back(number("eval_sets.min_words", c.eval_sets.min_words));
  b.push_back(number("eval_sets.max_words", c.eval_sets.max_words));
  b.push_back(number("vocab.merges", c.bpe_merges));
  b.push_back(number("model.layers", c.model.layers));
  b.push_back(number("model.width", c.model.width));
  b.push_back(number("model.heads", c.model.heads));
  b.push_back(number("model.ff_width", c.model.ff_width));
  b.push_back(number("model.max_sequence", c.model.max_sequence));
  bind_train(b, "pretrain", c.pretrain);
  bind_train(b, "train", c.adapter_train);
  b.push_back(number("lora.rank", c.lora.rank));
  b.push_back(number("lora.alpha", c.lora.alpha));
  b.push_back(number("lora.dropout", c.lora.dropout));
  b.push_back({"lora.scaling", [&c] { return std::string(scaling_name(c.lora.scaling)); },
               [&c](const std::string& v) { c.lora.scaling = parse_scaling(v); }});
  b.push_back(number("lora.init_std", c.lora.init_std));
  b.push_back(number("generate.max_new", c.max_new));
  b.push_back(optional_number("threshold.min_accent", rc.thresholds.min_accent));
  b.push_back(optional_number("threshold.max_cer", rc.thresholds.max_cer));
  return b;
}

}  // namespace detail

/// Every setting with its current value, in a fixed order.
inline Settings to_settings(const RunConfig& rc) {
  RunConfig copy = rc;
  Settings out;
  for (const auto& b : detail::bindings(copy)) out.emplace_back(b.key, b.get());
  return out;
}

/// Sets one key; unknown keys and malformed values raise InvalidConfig.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  for (auto& b : detail::bindings(rc)) {
    if (b.key == key) {
      b.set(value);
      return;
    }
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown setting '" + key + "'");
}

inline void apply_settings(RunConfig& rc, const Settings& s) {
  for (const auto& [k, v] : s) apply_setting(rc, k, v);
}

/// "key = value" lines, one per setting.
inline std::string format_settings(const Settings& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + " = " + v + "\n";
  return out;
}

}  // namespace uttertune
