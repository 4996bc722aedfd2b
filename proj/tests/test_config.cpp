// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "uttertune/config.hpp"

using namespace uttertune;

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

std::string value_of(const Settings& s, const std::string& key) {
  for (const auto& [k, v] : s)
    if (k == key) return v;
  ADD_FAILURE() << "missing " << key;
  return {};
}

PipelineConfig tiny() {
  PipelineConfig c;
  c.seed = 4;
  c.base_corpus.sentences = 300;
  c.adapter_corpus.sentences = 300;
  c.eval_sets.test_set_1 = 8;
  c.eval_sets.test_set_2 = 8;
  c.eval_sets.leakage = 8;
  c.model.width = 32;
  c.model.ff_width = 64;
  c.lora.rank = 4;
  c.pretrain.steps = 20;
  c.adapter_train.steps = 10;
  c.adapter_train.batch_size = 8;
  return c;
}

}  // namespace

TEST(Settings, DefaultsRoundTrip) {
  const RunConfig rc;
  const auto s = to_settings(rc);
  RunConfig other;
  other.pipeline.seed = 99;
  other.pipeline.lora.rank = 3;
  apply_settings(other, s);
  EXPECT_EQ(to_settings(other), s);
}

TEST(Settings, ReferenceValues) {
  const auto s = to_settings(RunConfig{});
  EXPECT_EQ(value_of(s, "lora.rank"), "16");
  EXPECT_EQ(value_of(s, "lora.alpha"), "64");
  EXPECT_EQ(value_of(s, "lora.dropout"), "0.05");
  EXPECT_EQ(value_of(s, "lora.scaling"), "literal");
  EXPECT_EQ(value_of(s, "train.steps"), "3000");
  EXPECT_EQ(value_of(s, "lexicon.priors"), "0.55,0.25,0.2");
  EXPECT_EQ(value_of(s, "threshold.min_accent"), "none");
}

TEST(Settings, NonDefaultValuesRoundTrip) {
  RunConfig rc;
  rc.pipeline.adapter_train.learning_rate = 3.3e-4;
  rc.pipeline.lora.scaling = LoraScaling::kNormalized;
  rc.pipeline.lexicon.ambiguous_priors = {0.5, 0.3, 0.2};
  rc.thresholds.min_accent = 0.9;
  RunConfig back;
  apply_settings(back, to_settings(rc));
  EXPECT_EQ(back.pipeline.adapter_train.learning_rate, 3.3e-4);
  EXPECT_EQ(back.pipeline.lora.scaling, LoraScaling::kNormalized);
  EXPECT_EQ(back.pipeline.lexicon.ambiguous_priors, (std::vector<double>{0.5, 0.3, 0.2}));
  EXPECT_EQ(back.thresholds.min_accent, 0.9);
  EXPECT_FALSE(back.thresholds.max_cer);
}

TEST(Settings, UnknownKeyAndBadValues) {
  RunConfig rc;
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lora.rnak", "4"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lora.rank", "four"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lora.rank", "4.5"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "train.steps", "-3"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lora.alpha", "64x"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lexicon.priors", "0.5,0.5"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_of([&] { apply_setting(rc, "lora.scaling", "sqrt"); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(rc.pipeline.lora.rank, 16);
}

TEST(Settings, ThresholdsAcceptNone) {
  RunConfig rc;
  apply_setting(rc, "threshold.max_cer", "0.2");
  EXPECT_EQ(rc.thresholds.max_cer, 0.2);
  apply_setting(rc, "threshold.max_cer", "none");
  EXPECT_FALSE(rc.thresholds.max_cer);
}

TEST(Settings, FormatIsOneLinePerKey) {
  const auto s = to_settings(RunConfig{});
  const auto text = format_settings(s);
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), s.size());
  EXPECT_NE(text.find("lora.rank = 16\n"), std::string::npos);
}

TEST(Seeds, DerivedPerStageAndStable) {
  PipelineConfig a, b;
  a.seed = b.seed = 7;
  a.derive_seeds();
  b.derive_seeds();
  EXPECT_EQ(a.lora.seed, b.lora.seed);
  EXPECT_NE(a.lora.seed, a.adapter_train.seed);
  b.seed = 8;
  b.derive_seeds();
  EXPECT_NE(a.lora.seed, b.lora.seed);
}

TEST(Pipeline, TinyRunProducesEveryArtifact) {
  std::vector<std::string> stages;
  const auto r = run_pipeline(tiny(), [&](const std::string& s) { stages.push_back(s); });
  EXPECT_EQ(stages, (std::vector<std::string>{"corpus", "vocab", "pretrain", "train", "eval"}));
  EXPECT_EQ(r.base_corpus.size(), 300u);
  ASSERT_EQ(r.reports.size(), 5u);
  EXPECT_EQ(r.report("test_set_2", dataprep::InputMode::kTagged).rows.size(), 8u);
  EXPECT_EQ(r.leakage.outcomes.size(), 8u);
  EXPECT_EQ(r.adapter.config.rank, 4);
  EXPECT_EQ(r.adapter.base_fingerprint, fingerprint(r.model_config, r.base));
  EXPECT_EQ(r.adapter_log.curve.back().step, 10u);
  // The vocabulary reserves the tags and a dense speech range.
  EXPECT_EQ(r.model_config.vocab_size, static_cast<int>(r.vocab.size()));
  EXPECT_EQ(r.model_config.tokens.speech_count, dataprep::kSpeechTokenCount);
}

TEST(Pipeline, SameSeedSameRun) {
  const auto a = run_pipeline(tiny());
  const auto b = run_pipeline(tiny());
  EXPECT_EQ(serialize_adapter(a.adapter), serialize_adapter(b.adapter));
  EXPECT_EQ(eval::serialize_report(a.reports.back()), eval::serialize_report(b.reports.back()));
}
