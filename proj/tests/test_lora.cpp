// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "toy.hpp"
#include "uttertune/lora.hpp"

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

}  // namespace

TEST(InitAdapter, DefaultsAreSixteenSixtyFourFivePercent) {
  const LoraConfig c;
  EXPECT_EQ(c.rank, 16);
  EXPECT_EQ(c.alpha, 64.0);
  EXPECT_EQ(c.dropout, 0.05);
  EXPECT_EQ(c.scaling, LoraScaling::kLiteral);
  EXPECT_NO_THROW(init_adapter<float>(toy::config(64), c));
}

TEST(InitAdapter, CoversEveryProjectionWithZeroUpdate) {
  const auto cfg = toy::config(16, 3);
  const auto a = init_adapter<double>(cfg, toy::lora());
  ASSERT_EQ(a.layers.size(), 12u);
  for (int l = 0; l < 3; ++l) {
    for (Projection p : kProjections) {
      const auto& layer = a.layer(l, p);
      EXPECT_EQ(layer.target, (LoraTarget{l, p}));
      EXPECT_EQ(layer.B.rows(), 16);
      EXPECT_EQ(layer.B.cols(), 4);
      EXPECT_TRUE(layer.C.isZero(0.0));
      EXPECT_FALSE(layer.B.isZero(0.0));
    }
  }
  EXPECT_EQ(a.tag_embeddings.rows(), 2);
  EXPECT_EQ(a.tag_embeddings.cols(), 16);
}

TEST(InitAdapter, BFactorHasConfiguredSpread) {
  auto l = toy::lora(16);
  l.init_std = 0.02;
  const auto a = init_adapter<double>(toy::config(64, 4), l);
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& layer : a.layers) {
    for (Eigen::Index i = 0; i < layer.B.size(); ++i) {
      sum += layer.B.data()[i];
      sq += layer.B.data()[i] * layer.B.data()[i];
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.002);
  EXPECT_NEAR(sd, 0.02, 0.001);
}

TEST(InitAdapter, EffectiveWeightIsBaseAtInit) {
  const auto cfg = toy::config();
  const auto w = init_weights<double>(cfg);
  const auto a = init_adapter<double>(cfg, toy::lora(4, 64.0));
  for (const auto& layer : a.layers) {
    const auto& W = w.blocks[static_cast<std::size_t>(layer.target.layer)].projection(layer.target.projection);
    EXPECT_EQ(effective_weight(W, layer), W);
  }
}

TEST(InitAdapter, SameSeedSameAdapter) {
  const auto cfg = toy::config();
  EXPECT_EQ(init_adapter<float>(cfg, toy::lora(4, 2, 0, 9)), init_adapter<float>(cfg, toy::lora(4, 2, 0, 9)));
  EXPECT_NE(init_adapter<float>(cfg, toy::lora(4, 2, 0, 9)), init_adapter<float>(cfg, toy::lora(4, 2, 0, 10)));
}

TEST(InitAdapter, RankOutOfRange) {
  const auto cfg = toy::config(16);
  EXPECT_EQ(error_of([&] { init_adapter<float>(cfg, toy::lora(0)); }), ErrorCode::kInvalidRank);
  EXPECT_EQ(error_of([&] { init_adapter<float>(cfg, toy::lora(17)); }), ErrorCode::kInvalidRank);
  EXPECT_NO_THROW(init_adapter<float>(cfg, toy::lora(16)));
}

TEST(InitAdapter, DropoutOutOfRange) {
  EXPECT_EQ(error_of([&] { init_adapter<float>(toy::config(), toy::lora(4, 1, 1.0)); }), ErrorCode::kInvalidConfig);
}

TEST(EffectiveWeight, HandComputedExample) {
  LoraLayer<double> l;
  l.rank = 2;
  l.alpha = 1.0;
  l.B = Mat<double>::Ones(4, 2);
  l.C = Mat<double>::Ones(2, 4);
  const auto out = effective_weight(Mat<double>(Mat<double>::Zero(4, 4)), l);
  EXPECT_EQ(out, Mat<double>::Constant(4, 4, 2.0));
}

TEST(EffectiveWeight, ZeroFactorOrZeroAlphaLeavesW) {
  Rng rng(3);
  Mat<double> W(5, 3);
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
  LoraLayer<double> l;
  l.rank = 2;
  l.alpha = 3.0;
  l.B = Mat<double>::Zero(5, 2);
  l.C = Mat<double>::Constant(2, 3, 0.7);
  EXPECT_EQ(effective_weight(W, l), W);
  l.B = Mat<double>::Constant(5, 2, 1.3);
  l.alpha = 0.0;
  EXPECT_EQ(effective_weight(W, l), W);
}

TEST(EffectiveWeight, LiteralAndNormalizedScaling) {
  LoraLayer<double> l;
  l.rank = 4;
  l.alpha = 8.0;
  l.B = Mat<double>::Ones(2, 4);
  l.C = Mat<double>::Ones(4, 2);
  EXPECT_EQ(effective_weight(Mat<double>(Mat<double>::Zero(2, 2)), l), Mat<double>::Constant(2, 2, 32.0));
  l.scaling = LoraScaling::kNormalized;
  EXPECT_EQ(effective_weight(Mat<double>(Mat<double>::Zero(2, 2)), l), Mat<double>::Constant(2, 2, 8.0));
}

TEST(EffectiveWeight, ShapeMismatch) {
  LoraLayer<double> l;
  l.rank = 2;
  l.B = Mat<double>::Ones(4, 2);
  l.C = Mat<double>::Ones(2, 4);
  EXPECT_EQ(error_of([&] { effective_weight(Mat<double>(Mat<double>::Zero(4, 5)), l); }), ErrorCode::kShapeMismatch);
}

TEST(TrainableParamCount, ClosedForm) {
  const auto cfg = toy::config(64, 1, 4, 256);
  const auto a = init_adapter<float>(cfg, toy::lora(4));
  const auto b = trainable_param_count(a, cfg);
  // 4 projections * 4 * (64 + 64) LoRA entries, plus two 64-wide tag rows.
  EXPECT_EQ(b.trainable, 2048u + 128u);
  EXPECT_EQ(b.base, base_param_count(cfg));
  EXPECT_DOUBLE_EQ(b.ratio, 2176.0 / static_cast<double>(base_param_count(cfg)));
}

TEST(TrainableParamCount, BaseCountMatchesAllocatedWeights) {
  for (int width : {16, 32, 64}) {
    const auto cfg = toy::config(width, 3, 4, 3 * width);
    EXPECT_EQ(param_count(init_weights<float>(cfg)), base_param_count(cfg));
  }
}

TEST(Merge, MergedModelMatchesAdapterPath) {
  const auto cfg = toy::config();
  const auto base = init_weights<double>(cfg);
  const auto a = toy::random_adapter<double>(cfg, toy::lora(4, 2.0), 5);
  const auto merged = merge(a, cfg, base);
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto ex = toy::example(rng);
    auto ids = ex.input_ids;
    ids.push_back(cfg.tokens.speech_start);
    const auto with_adapter = forward(ToyLM<double>{cfg, base, &a}, ids);
    const auto baked = forward(ToyLM<double>{cfg, merged, nullptr}, ids);
    EXPECT_LT((with_adapter - baked).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Merge, UnmergeRestoresProjections) {
  const auto cfg = toy::config();
  const auto base = init_weights<float>(cfg);
  const auto a = toy::random_adapter<float>(cfg, toy::lora(4, 2.0), 5);
  const auto restored = unmerge(a, merge(a, cfg, base));
  for (std::size_t l = 0; l < base.blocks.size(); ++l) {
    for (Projection p : kProjections) {
      const auto& W = base.blocks[l].projection(p);
      const auto& R = restored.blocks[l].projection(p);
      const auto& delta = a.layer(static_cast<int>(l), p);
      const Mat<float> bc = delta.scale() * (delta.B * delta.C);
      for (Eigen::Index i = 0; i < W.size(); ++i) {
        // Two roundings to float, each at most half an ulp of the merged value.
        const float bound = 2.0f * std::numeric_limits<float>::epsilon() *
                            (std::abs(W.data()[i]) + std::abs(bc.data()[i]));
        ASSERT_LE(std::abs(W.data()[i] - R.data()[i]), bound);
      }
    }
  }
  EXPECT_EQ(restored.head, base.head);
  EXPECT_EQ(restored.blocks[0].w1, base.blocks[0].w1);
}

TEST(Merge, RejectsAdapterForAnotherDepth) {
  const auto a = init_adapter<float>(toy::config(16, 3), toy::lora());
  const auto cfg = toy::config(16, 2);
  EXPECT_EQ(error_of([&] { merge(a, cfg, init_weights<float>(cfg)); }), ErrorCode::kShapeMismatch);
}

TEST(AdapterFile, RoundTripIsBitExact) {
  const auto cfg = toy::config();
  auto a = toy::random_adapter<float>(cfg, toy::lora(4, 64.0, 0.05, 77), 3);
  a.base_fingerprint = "0123abcd";
  a.config.scaling = LoraScaling::kNormalized;
  for (auto& l : a.layers) l.scaling = LoraScaling::kNormalized;
  const auto bytes = serialize_adapter(a);
  const auto b = parse_adapter<float>(bytes);
  EXPECT_EQ(b, a);
  EXPECT_EQ(serialize_adapter(b), bytes);
}

TEST(AdapterFile, HeaderRecordsConfig) {
  const auto a = init_adapter<float>(toy::config(), toy::lora(4, 64.0, 0.05, 77));
  const auto bytes = serialize_adapter(a);
  for (const char* field : {"meta\trank\t4\n", "meta\talpha\t64\n", "meta\tdropout\t0.05", "meta\tscaling\tliteral\n",
                            "meta\tseed\t77\n", "meta\tbase_fingerprint\t"}) {
    EXPECT_NE(bytes.find(field), std::string::npos) << field;
  }
}

TEST(AdapterFile, TruncatedOrDamagedIsCorrupt) {
  const auto bytes = serialize_adapter(init_adapter<float>(toy::config(), toy::lora()));
  EXPECT_EQ(error_of([&] { parse_adapter<float>(bytes.substr(0, bytes.size() - 40)); }), ErrorCode::kCorruptFile);
  EXPECT_EQ(error_of([&] { parse_adapter<float>(bytes.substr(0, 10)); }), ErrorCode::kCorruptFile);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_EQ(error_of([&] { parse_adapter<float>(flipped); }), ErrorCode::kCorruptFile);
}

TEST(AdapterFile, OtherVersionIsRejected) {
  const auto a = init_adapter<float>(toy::config(), toy::lora());
  EXPECT_EQ(error_of([&] { parse_adapter<float>(serialize_adapter(a, 2)); }), ErrorCode::kVersionMismatch);
}

TEST(AdapterFile, SaveAndLoad) {
  const auto a = toy::random_adapter<float>(toy::config(), toy::lora(), 4);
  const auto path = ::testing::TempDir() + "adapter_roundtrip.bin";
  save_adapter(a, path);
  EXPECT_EQ(load_adapter<float>(path), a);
  EXPECT_EQ(error_of([&] { load_adapter<float>(path + ".missing"); }), ErrorCode::kIoError);
}
