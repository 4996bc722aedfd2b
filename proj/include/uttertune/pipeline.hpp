// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end run: lexicon and corpora, vocabulary, base model pretraining,
// adapter training, evaluation.

#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "uttertune/dataprep.hpp"
#include "uttertune/eval.hpp"
#include "uttertune/lora.hpp"
#include "uttertune/model.hpp"
#include "uttertune/tokenizer.hpp"
#include "uttertune/train.hpp"

namespace uttertune {

/// Encodes a corpus line: input text through the tokenizer, codec indices
/// shifted into the speech range, end-of-speech appended.
inline TrainingExample to_example(const dataprep::CorpusRecord& r, const tokenizer::Vocabulary& vocab) {
  TrainingExample ex;
  ex.input_ids = tokenizer::encode(tokenizer::parse_tagged(r.input_text), vocab);
  for (auto c : r.target_ids) ex.target_ids.push_back(vocab.speech_token_offset() + c);
  ex.target_ids.push_back(vocab.end_of_speech());
  return ex;
}

inline std::vector<MaskedSequence> to_sequences(const std::vector<dataprep::CorpusRecord>& corpus,
                                                const tokenizer::Vocabulary& vocab) {
  std::vector<MaskedSequence> out;
  out.reserve(corpus.size());
  const auto layout = TokenLayout::from(vocab);
  for (const auto& r : corpus) out.push_back(to_masked(to_example(r, vocab), layout));
  return out;
}

/// Prompt ids for generation: encoded text followed by <SOS>.
inline std::vector<TokenId> prompt_ids(const std::string& text, const tokenizer::Vocabulary& vocab) {
  auto ids = tokenizer::encode(tokenizer::parse_tagged(text), vocab);
  ids.push_back(vocab.speech_start());
  return ids;
}

/// Greedy text-to-speech-token generator over a model, for evaluate_set.
template <class T>
struct ModelGenerator {
  ToyLM<T> model;
  const tokenizer::Vocabulary& vocab;
  std::size_t max_new = 48;

  std::vector<TokenId> operator()(const std::string& text) const {
    GenerateOptions g;
    g.max_new = max_new;
    return generate(model, prompt_ids(text, vocab), g);
  }
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  dataprep::LexiconOptions lexicon;
  /// Base model corpus: untagged, some words written in katakana.
  dataprep::CorpusOptions base_corpus{60000, 0.0, 0.15, 2, 6, 0};
  /// Adapter corpus: one tagged noun in every sentence that has a noun.
  dataprep::CorpusOptions adapter_corpus{60000, 1.0, 0.15, 2, 6, 0};
  dataprep::EvalSetOptions eval_sets;
  std::size_t bpe_merges = 40;
  ToyLMConfig model;
  TrainConfig pretrain;
  TrainConfig adapter_train;
  LoraConfig lora;
  std::size_t max_new = 48;

  PipelineConfig() {
    pretrain.learning_rate = 2e-3;
    pretrain.steps = 20000;
    pretrain.batch_size = 32;
    pretrain.log_every = 500;
    // At 3,000 steps the adapter needs a larger batch and step size than the
    // 1e-4 / 8 recipe to learn accent marks on this small backbone.
    adapter_train.learning_rate = 1e-3;
    adapter_train.batch_size = 64;
  }

  /// Per-stage seeds derived from the run seed.
  void derive_seeds() {
    lexicon.seed = derive_seed(seed, 10);
    base_corpus.seed = derive_seed(seed, 11);
    adapter_corpus.seed = derive_seed(seed, 12);
    eval_sets.seed = derive_seed(seed, 13);
    model.seed = derive_seed(seed, 14);
    pretrain.seed = derive_seed(seed, 15);
    adapter_train.seed = derive_seed(seed, 16);
    lora.seed = derive_seed(seed, 17);
  }
};

struct PipelineResult {
  dataprep::Lexicon lexicon;
  std::vector<dataprep::CorpusRecord> base_corpus;
  std::vector<dataprep::CorpusRecord> adapter_corpus;
  dataprep::EvalSets eval_sets;
  tokenizer::Vocabulary vocab;
  ToyLMConfig model_config;
  Weights<float> base;
  LoraAdapter<float> adapter;
  TrainResult pretrain_log;
  TrainResult adapter_log;
  std::vector<eval::EvalReport> reports;
  eval::LeakageResult leakage;
  std::vector<std::pair<std::string, double>> timings;

  const eval::EvalReport& report(const std::string& set, dataprep::InputMode mode) const {
    for (const auto& r : reports)
      if (r.set == set && r.mode == mode) return r;
    throw Error(ErrorCode::kInvalidConfig, "no report for " + set);
  }
};

using StageFn = std::function<void(const std::string&)>;

inline tokenizer::Vocabulary build_vocabulary(const dataprep::Lexicon& lex,
                                              const std::vector<dataprep::CorpusRecord>& corpus, std::size_t merges,
                                              std::uint64_t seed) {
  const auto lines = dataprep::vocabulary_corpus(lex, corpus);
  std::set<char32_t> atoms;
  for (const auto& l : lines)
    for (char32_t c : utf8::decode(l)) atoms.insert(c);
  tokenizer::BpeOptions b;
  b.target_vocab_size = atoms.size() + merges;
  b.seed = seed;
  b.speech_token_count = dataprep::kSpeechTokenCount;
  return tokenizer::train_bpe(lines, b);
}

/// Lexicon, both training corpora and the evaluation sets.
struct DataBundle {
  dataprep::Lexicon lexicon;
  std::vector<dataprep::CorpusRecord> base_corpus;
  std::vector<dataprep::CorpusRecord> adapter_corpus;
  dataprep::EvalSets eval_sets;
};

/// Expects seeds already derived (PipelineConfig::derive_seeds).
inline DataBundle build_data(const PipelineConfig& cfg) {
  DataBundle d;
  d.lexicon = dataprep::generate_lexicon(cfg.lexicon);
  d.base_corpus = dataprep::build_corpus(d.lexicon, cfg.base_corpus);
  d.adapter_corpus = dataprep::build_corpus(d.lexicon, cfg.adapter_corpus);
  d.eval_sets = dataprep::build_eval_sets(d.lexicon, cfg.eval_sets);
  return d;
}

inline ToyLMConfig model_config_for(const PipelineConfig& cfg, const tokenizer::Vocabulary& vocab) {
  ToyLMConfig c = cfg.model;
  c.vocab_size = vocab.size();
  c.tokens = TokenLayout::from(vocab);
  return c;
}

inline Weights<float> pretrain_base(const PipelineConfig& cfg, const ToyLMConfig& mc,
                                    const tokenizer::Vocabulary& vocab,
                                    const std::vector<dataprep::CorpusRecord>& corpus, TrainResult* log = nullptr,
                                    const ProgressFn& progress = {}) {
  auto w = init_weights<float>(mc);
  auto result = pretrain(mc, w, to_sequences(corpus, vocab), cfg.pretrain, progress);
  if (log) *log = std::move(result);
  return w;
}

inline LoraAdapter<float> train_adapter_on(const PipelineConfig& cfg, const ToyLMConfig& mc,
                                           const Weights<float>& base, const tokenizer::Vocabulary& vocab,
                                           const std::vector<dataprep::CorpusRecord>& corpus,
                                           TrainResult* log = nullptr, const ProgressFn& progress = {}) {
  auto adapter = init_adapter<float>(mc, cfg.lora);
  adapter.base_fingerprint = fingerprint(mc, base);
  auto result = train_adapter(mc, base, adapter, to_sequences(corpus, vocab), cfg.adapter_train, progress);
  if (log) *log = std::move(result);
  return adapter;
}

/// The reports of a full run: the base and adapted models on test_set_1, the
/// base model on test_set_2 plain and kana, the adapted model on test_set_2
/// tagged.
inline std::vector<eval::EvalReport> evaluate_models(const PipelineConfig& cfg, const ToyLMConfig& mc,
                                                     const Weights<float>& base, const LoraAdapter<float>& adapter,
                                                     const tokenizer::Vocabulary& vocab,
                                                     const dataprep::EvalSets& sets) {
  const TokenId off = vocab.speech_token_offset();
  const ModelGenerator<float> base_gen{{mc, base, nullptr}, vocab, cfg.max_new};
  const ModelGenerator<float> adapted_gen{{mc, base, &adapter}, vocab, cfg.max_new};
  using dataprep::InputMode;
  std::vector<eval::EvalReport> out;
  out.push_back(eval::evaluate_set(base_gen, sets.test_set_1, InputMode::kPlain, off, "test_set_1"));
  out.push_back(eval::evaluate_set(adapted_gen, sets.test_set_1, InputMode::kPlain, off, "test_set_1+adapter"));
  out.push_back(eval::evaluate_set(base_gen, sets.test_set_2, InputMode::kPlain, off, "test_set_2"));
  out.push_back(eval::evaluate_set(base_gen, sets.test_set_2, InputMode::kKana, off, "test_set_2"));
  out.push_back(eval::evaluate_set(adapted_gen, sets.test_set_2, InputMode::kTagged, off, "test_set_2"));
  return out;
}

inline eval::LeakageResult leakage_of(const PipelineConfig& cfg, const ToyLMConfig& mc, const Weights<float>& base,
                                      const LoraAdapter<float>& adapter, const tokenizer::Vocabulary& vocab,
                                      const dataprep::EvalSets& sets) {
  const ModelGenerator<float> base_gen{{mc, base, nullptr}, vocab, cfg.max_new};
  const ModelGenerator<float> adapted_gen{{mc, base, &adapter}, vocab, cfg.max_new};
  eval::LeakageOptions lo;
  lo.seed = derive_seed(cfg.seed, 18);
  return eval::leakage_test(base_gen, adapted_gen, sets.leakage_set, vocab.speech_token_offset(), lo);
}

/// Runs every stage in order. `on_stage` and `progress` are optional hooks.
inline PipelineResult run_pipeline(PipelineConfig cfg, const StageFn& on_stage = {},
                                   const ProgressFn& progress = {}) {
  using clock = std::chrono::steady_clock;
  cfg.derive_seeds();
  PipelineResult r;
  auto t0 = clock::now();
  auto mark = [&](const std::string& stage) {
    const auto now = clock::now();
    r.timings.emplace_back(stage, std::chrono::duration<double>(now - t0).count());
    t0 = now;
    if (on_stage) on_stage(stage);
  };

  auto data = build_data(cfg);
  r.lexicon = std::move(data.lexicon);
  r.base_corpus = std::move(data.base_corpus);
  r.adapter_corpus = std::move(data.adapter_corpus);
  r.eval_sets = std::move(data.eval_sets);
  mark("corpus");

  r.vocab = build_vocabulary(r.lexicon, r.base_corpus, cfg.bpe_merges, cfg.seed);
  mark("vocab");

  r.model_config = model_config_for(cfg, r.vocab);
  r.base = pretrain_base(cfg, r.model_config, r.vocab, r.base_corpus, &r.pretrain_log, progress);
  mark("pretrain");

  r.adapter = train_adapter_on(cfg, r.model_config, r.base, r.vocab, r.adapter_corpus, &r.adapter_log, progress);
  mark("train");

  r.reports = evaluate_models(cfg, r.model_config, r.base, r.adapter, r.vocab, r.eval_sets);
  r.leakage = leakage_of(cfg, r.model_config, r.base, r.adapter, r.vocab, r.eval_sets);
  mark("eval");
  return r;
}

}  // namespace uttertune
