// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <thread>

#include "generators.hpp"
#include "uttertune/uttertune.hpp"

using namespace uttertune;
using clock_type = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int n, const char* name, bool pass, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", n, name, detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <class F>
ErrorCode error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(-1);
}

// Small data bundle on the default lexicon for the model-level criteria.
struct SmallData {
  PipelineConfig cfg;
  DataBundle data;
  tokenizer::Vocabulary vocab;
};

SmallData small_data() {
  SmallData s;
  s.cfg.base_corpus.sentences = 2000;
  s.cfg.adapter_corpus.sentences = 2000;
  s.cfg.derive_seeds();
  s.data = build_data(s.cfg);
  s.vocab = build_vocabulary(s.data.lexicon, s.data.base_corpus, s.cfg.bpe_merges, s.cfg.seed);
  return s;
}

void criterion_1(const SmallData& s) {
  const auto t0 = clock_type::now();
  const auto mc = model_config_for(s.cfg, s.vocab);
  const auto w = init_weights<double>(mc);
  const auto a = init_adapter<double>(mc, s.cfg.lora);
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    // Tag ids read adapter-only embeddings, so inputs draw from the rest.
    std::vector<TokenId> ids(1 + rng.below(static_cast<std::size_t>(mc.max_sequence)));
    for (auto& id : ids) {
      do {
        id = static_cast<TokenId>(rng.below(static_cast<std::size_t>(mc.vocab_size)));
      } while (id == mc.tokens.phon_start || id == mc.tokens.phon_end);
    }
    const auto base = forward(ToyLM<double>{mc, w, nullptr}, ids);
    const auto adapted = forward(ToyLM<double>{mc, w, &a}, ids);
    worst = std::max(worst, (adapted - base).cwiseAbs().maxCoeff() / base.cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  report(1, "zero-init transparency", worst <= 1e-12 && secs < 10,
         fmt("max relative logit difference %.3g over 100 inputs (limit 1e-12), %.2f s", worst, secs));
}

void criterion_2(const SmallData& s) {
  const auto t0 = clock_type::now();
  const auto mc = model_config_for(s.cfg, s.vocab);
  const auto w = init_weights<float>(mc);
  const auto before = serialize_checkpoint(mc, w);
  const auto fresh = init_adapter<float>(mc, s.cfg.lora);
  auto a = fresh;
  TrainConfig tc = s.cfg.adapter_train;
  tc.steps = 100;
  train_adapter(mc, w, a, to_sequences(s.data.adapter_corpus, s.vocab), tc);
  const bool frozen = serialize_checkpoint(mc, w) == before;
  std::size_t changed = 0, tensors = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    changed += a.layers[l].B != fresh.layers[l].B;
    changed += a.layers[l].C != fresh.layers[l].C;
    tensors += 2;
  }
  const bool tags = a.tag_embeddings.row(0) != fresh.tag_embeddings.row(0) &&
                    a.tag_embeddings.row(1) != fresh.tag_embeddings.row(1);
  const bool same_shape = a.config == fresh.config && a.layers.size() == fresh.layers.size();
  const double secs = seconds_since(t0);
  report(2, "freeze and isolation", frozen && changed == tensors && tags && same_shape && secs < 60,
         fmt("base bit-identical: %s; LoRA factors changed %zu/%zu; both tag rows changed: %s; %.1f s",
             frozen ? "yes" : "no", changed, tensors, tags ? "yes" : "no", secs));
}

void criterion_3(const PipelineResult& r, const PipelineConfig& cfg) {
  const auto t0 = clock_type::now();
  const auto b = trainable_param_count(r.adapter, r.model_config);
  const auto adapter_bytes = serialize_adapter(r.adapter).size();
  const auto base_bytes = serialize_checkpoint(r.model_config, r.base).size();
  const double file_ratio = static_cast<double>(adapter_bytes) / static_cast<double>(base_bytes);
  const double secs = seconds_since(t0);
  report(3, "parameter budget", b.ratio < 0.005 && file_ratio < 0.005 && secs < 1,
         fmt("r=%d, width %d, %d layers: %zu trainable / %zu base = %.4f (limit 0.005); "
             "adapter file %zu / checkpoint %zu bytes = %.4f",
             cfg.lora.rank, r.model_config.width, r.model_config.layers, b.trainable, b.base, b.ratio, adapter_bytes,
             base_bytes, file_ratio));
}

void criterion_4(const SmallData& s) {
  const auto t0 = clock_type::now();
  auto mc = model_config_for(s.cfg, s.vocab);
  mc.width = 16;
  mc.heads = 2;
  mc.ff_width = 32;
  const auto w = init_weights<double>(mc);
  auto lc = s.cfg.lora;
  lc.rank = 4;
  lc.dropout = 0.0;
  auto a = init_adapter<double>(mc, lc);
  Rng rng(404);
  for (auto& l : a.layers) {
    for (Eigen::Index i = 0; i < l.B.size(); ++i) l.B.data()[i] = rng.normal() * 0.05;
    for (Eigen::Index i = 0; i < l.C.size(); ++i) l.C.data()[i] = rng.normal() * 0.05;
  }
  auto all = to_sequences(s.data.adapter_corpus, s.vocab);
  const std::vector<MaskedSequence> batch(all.begin(), all.begin() + 4);
  auto grads = a;
  for (auto& l : grads.layers) l.B.setZero(), l.C.setZero();
  grads.tag_embeddings.setZero();
  loss_and_grad(ToyLM<double>{mc, w, &a}, batch, GradSink<double>{nullptr, &grads});

  std::vector<std::pair<Mat<double>*, const Mat<double>*>> tensors;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    tensors.emplace_back(&a.layers[l].B, &grads.layers[l].B);
    tensors.emplace_back(&a.layers[l].C, &grads.layers[l].C);
  }
  tensors.emplace_back(&a.tag_embeddings, &grads.tag_embeddings);
  const double h = 1e-4;
  double worst = 0.0;
  int bad = 0;
  for (int k = 0; k < 50; ++k) {
    auto [param, grad] = tensors[rng.below(tensors.size())];
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(param->size())));
    const double keep = param->data()[i];
    param->data()[i] = keep + h;
    const double up = loss(ToyLM<double>{mc, w, &a}, batch);
    param->data()[i] = keep - h;
    const double down = loss(ToyLM<double>{mc, w, &a}, batch);
    param->data()[i] = keep;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grad->data()[i];
    // Relative error, with a 1e-6 floor on the scale for near-zero gradients.
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, rel);
    bad += rel > 1e-4;
  }
  const double secs = seconds_since(t0);
  report(4, "gradient correctness", bad == 0 && secs < 60,
         fmt("50 adapter entries, width 16, double: worst relative error %.3g (limit 1e-4), %.1f s", worst, secs));
}

void criteria_5_6(const PipelineResult& r, const PipelineConfig& cfg) {
  using dataprep::InputMode;
  const auto& tagged = r.report("test_set_2", InputMode::kTagged).summary;
  const auto& kana = r.report("test_set_2", InputMode::kKana).summary;
  const auto& plain = r.report("test_set_2", InputMode::kPlain).summary;
  double train_secs = 0;
  for (const auto& [stage, secs] : r.timings)
    if (stage == "train") train_secs = secs;
  const bool ok = tagged.accent_correctness >= 0.95 && kana.mean_cer <= 0.05 &&
                  kana.accent_correctness <= tagged.accent_correctness - 0.2 && plain.mean_cer > kana.mean_cer &&
                  cfg.adapter_train.steps <= 3000 && train_secs <= 600;
  report(5, "controllability", ok,
         fmt("tagged accent %.4f (>= 0.95); kana CER %.4f (<= 0.05), kana accent %.4f (<= tagged - 0.2); "
             "plain CER %.4f (> kana); %zu adapter steps in %.0f s",
             tagged.accent_correctness, kana.mean_cer, kana.accent_correctness, plain.mean_cer,
             cfg.adapter_train.steps, train_secs));

  const auto& lk = r.leakage;
  const bool leak_ok = lk.outcomes.size() >= 200 && lk.ci.contains(0.0) && lk.ci.half_width() <= 0.1;
  report(6, "no leakage", leak_ok,
         fmt("%zu items: baseline %.4f, adapted %.4f, difference %+.4f, 99%% CI [%.4f, %.4f] half-width %.4f",
             lk.outcomes.size(), lk.baseline_rate, lk.adapted_rate, lk.difference, lk.ci.low, lk.ci.high,
             lk.ci.half_width()));
}

// Shortest paths in the graph whose nodes are all strings of length <= 6 over
// four symbols and whose edges are single insertions, deletions and
// substitutions. An optimal edit script can delete first and insert last, so
// no path needs a string longer than both ends.
struct EditGraph {
  static constexpr std::size_t kMax = 6;
  std::vector<std::u32string> strings;
  std::map<std::u32string, std::size_t> index;
  std::vector<std::vector<std::uint32_t>> next;

  explicit EditGraph(const std::u32string& alphabet) {
    strings.push_back(U"");
    for (std::size_t i = 0; i < strings.size(); ++i) {
      if (strings[i].size() == kMax) continue;
      for (char32_t c : alphabet) strings.push_back(strings[i] + c);
    }
    for (std::size_t i = 0; i < strings.size(); ++i) index[strings[i]] = i;
    next.resize(strings.size());
    for (std::size_t i = 0; i < strings.size(); ++i) {
      const auto& s = strings[i];
      auto link = [&](const std::u32string& t) {
        if (t.size() <= kMax) next[i].push_back(static_cast<std::uint32_t>(index.at(t)));
      };
      for (std::size_t p = 0; p < s.size(); ++p) link(s.substr(0, p) + s.substr(p + 1));
      for (std::size_t p = 0; p <= s.size(); ++p)
        for (char32_t c : alphabet) link(s.substr(0, p) + c + s.substr(p));
      for (std::size_t p = 0; p < s.size(); ++p)
        for (char32_t c : alphabet)
          if (c != s[p]) link(s.substr(0, p) + c + s.substr(p + 1));
    }
  }

  std::vector<std::uint8_t> distances_from(std::size_t src) const {
    std::vector<std::uint8_t> d(strings.size(), 255);
    std::deque<std::uint32_t> queue{static_cast<std::uint32_t>(src)};
    d[src] = 0;
    while (!queue.empty()) {
      const auto u = queue.front();
      queue.pop_front();
      for (auto v : next[u]) {
        if (d[v] == 255) {
          d[v] = static_cast<std::uint8_t>(d[u] + 1);
          queue.push_back(v);
        }
      }
    }
    return d;
  }
};

void criterion_7() {
  const auto t0 = clock_type::now();
  const EditGraph g(U"アイウエ");
  std::vector<std::string> utf8s;
  for (const auto& s : g.strings) utf8s.push_back(utf8::encode(s));
  const std::size_t n = g.strings.size();
  std::atomic<std::size_t> mismatches{0}, pairs{0}, cursor{0};
  auto work = [&] {
    for (std::size_t a; (a = cursor++) < n;) {
      const auto d = g.distances_from(a);
      for (std::size_t b = 0; b < n; ++b) {
        const double expected = g.strings[a].empty() ? (g.strings[b].empty() ? 0.0 : 1.0)
                                                      : static_cast<double>(d[b]) / static_cast<double>(g.strings[a].size());
        if (eval::cer(utf8s[a], utf8s[b]) != expected) ++mismatches;
      }
      pairs += n;
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::max(1u, std::thread::hardware_concurrency()); ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  // Exclusion: 3 of 5 morae wrong (CER 0.6) is dropped, 2 of 4 (0.5) is kept.
  dataprep::EvalItem item;
  item.id = "x";
  item.gold_codes = dataprep::render_codes(notation::parse_annotation("アイウエオ"));
  item.target_word = 0;
  item.target_end = 2;
  std::vector<TokenId> hyp;
  for (auto c : item.gold_codes) hyp.push_back(c);
  hyp[2] = hyp[3] = hyp[4] = 50;
  const auto dropped = eval::score_item(item, hyp, 0);
  item.gold_codes.pop_back();
  hyp = {item.gold_codes[0], item.gold_codes[1]};
  const auto kept = eval::score_item(item, hyp, 0);
  const auto agg = eval::aggregate({dropped, kept});
  const bool exclusion = dropped.excluded && !kept.excluded && agg.excluded == 1 && agg.mean_cer == 0.5 &&
                         agg.accent_scored == 1;
  const double secs = seconds_since(t0);
  report(7, "CER oracle", mismatches == 0 && exclusion && secs < 60,
         fmt("%zu pairs over 4 symbols, length <= 6: %zu mismatches; exclusion rule %s; %.1f s", pairs.load(),
             mismatches.load(), exclusion ? "applied" : "NOT applied", secs));
}

void criterion_8() {
  const auto t0 = clock_type::now();
  Rng rng(808);
  int round_trip_failures = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto a = gen::annotation(rng);
    if (!(notation::parse_annotation(notation::render_annotation(a)) == a)) ++round_trip_failures;
  }
  using E = ErrorCode;
  const std::vector<std::pair<std::string, E>> notation_cases = {
      {"ア'イ'ウ", E::kMultipleNuclei},    {"", E::kEmptyPhrase},
      {"/アメ", E::kEmptyPhrase},          {"アメ/", E::kEmptyPhrase},
      {"アメ//カサ", E::kEmptyPhrase},     {"'アメ", E::kMisplacedNucleusMark},
      {"リ'ョ", E::kMisplacedNucleusMark}, {"アメx", E::kUnsupportedCharacter},
      {"ョア", E::kDanglingSmallKana},
  };
  const std::vector<std::pair<std::string, E>> tagged_cases = {
      {"<PHON_START>ア", E::kUnbalancedTags},
      {"ア<PHON_END>", E::kUnbalancedTags},
      {"<PHON_START>ア<PHON_START>イ<PHON_END><PHON_END>", E::kNestedTags},
      {"<PHON_START>ア'イ'<PHON_END>", E::kInvalidAnnotation},
  };
  int wrong = 0, cases = 0;
  for (const auto& [text, code] : notation_cases) {
    ++cases;
    wrong += error_of([&] { notation::parse_annotation(text); }) != code;
  }
  for (const auto& [text, code] : tagged_cases) {
    ++cases;
    wrong += error_of([&] { tokenizer::parse_tagged(text); }) != code;
  }
  ++cases;
  wrong += error_of([] { notation::segment_morae("ャア"); }) != E::kDanglingSmallKana;
  ++cases;
  wrong += error_of([] { dataprep::render_codes(notation::parse_annotation("ヌ")); }) != E::kUnknownMora;
  const double secs = seconds_since(t0);
  report(8, "notation round-trip", round_trip_failures == 0 && wrong == 0 && secs < 10,
         fmt("10000 annotations, %d round-trip failures; %d/%d error cases raised the designated error; %.2f s",
             round_trip_failures, cases - wrong, cases, secs));
}

void criterion_9(const PipelineResult& a, double a_secs, const PipelineConfig& cfg) {
  const auto t0 = clock_type::now();
  const auto b = run_pipeline(cfg);
  const double b_secs = seconds_since(t0);
  const bool adapters = serialize_adapter(a.adapter) == serialize_adapter(b.adapter);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.reports.size() && i < b.reports.size(); ++i)
    same += eval::serialize_report(a.reports[i]) == eval::serialize_report(b.reports[i]);
  const bool leakage = eval::serialize_leakage(a.leakage) == eval::serialize_leakage(b.leakage);
  const bool ok = adapters && same == a.reports.size() && a.reports.size() == b.reports.size() && leakage &&
                  b_secs <= 2 * a_secs;
  report(9, "determinism", ok,
         fmt("adapter bytes %s; %zu/%zu eval reports identical; leakage report %s; second run %.0f s vs %.0f s",
             adapters ? "identical" : "DIFFER", same, a.reports.size(), leakage ? "identical" : "DIFFERS", b_secs,
             a_secs));
}

}  // namespace

int main() {
  try {
    const auto small = small_data();
    criterion_1(small);
    criterion_2(small);

    const PipelineConfig cfg;
    std::fprintf(stderr, "reference run...\n");
    const auto t0 = clock_type::now();
    const auto run = run_pipeline(cfg, [](const std::string& stage) { std::fprintf(stderr, "  %s done\n", stage.c_str()); });
    const double run_secs = seconds_since(t0);

    criterion_3(run, cfg);
    criterion_4(small);
    criteria_5_6(run, cfg);
    criterion_7();
    criterion_8();
    criterion_9(run, run_secs, cfg);
  } catch (const Error& e) {
    std::printf("FAIL: aborted with %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
