// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// uttertune: notation utilities and the corpus / vocab / pretrain / train /
// generate / eval workflow over a run directory.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "uttertune/uttertune.hpp"

namespace fs = std::filesystem;
using namespace uttertune;

namespace {

constexpr const char* kToolVersion = "1.0.0";

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kThreshold = 4 };

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kNonFiniteLoss: return kNumeric;
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidRank: return kUsage;
    default: return kData;
  }
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<int> rank;
  std::optional<double> alpha;
  std::optional<double> dropout;
  std::optional<std::string> scaling;
  std::string mode = "tagged";
  std::string out = "run";
  std::vector<std::string> argv;
};

// Settings from a config file: INI sections become key prefixes.
Settings read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open config " + path);
  Settings s;
  for (const auto& item : CLI::ConfigINI().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;
    std::string key;
    for (const auto& p : item.parents) key += p + ".";
    key += item.name;
    std::string value;
    for (const auto& v : item.inputs) value += (value.empty() ? "" : ",") + v;
    s.emplace_back(key, value);
  }
  // A manifest carries its settings under [config]; everything else in it is
  // a record of the run.
  Settings from_manifest;
  for (const auto& [k, v] : s)
    if (k.rfind("config.", 0) == 0) from_manifest.emplace_back(k.substr(7), v);
  return from_manifest.empty() ? s : from_manifest;
}

RunConfig load_config(const Options& o, const std::string& steps_key) {
  RunConfig rc;
  if (!o.config.empty()) apply_settings(rc, read_config_file(o.config));
  if (o.seed) apply_setting(rc, "seed", std::to_string(*o.seed));
  if (o.steps) apply_setting(rc, steps_key, std::to_string(*o.steps));
  if (o.rank) apply_setting(rc, "lora.rank", std::to_string(*o.rank));
  if (o.alpha) apply_setting(rc, "lora.alpha", detail::format_number(*o.alpha));
  if (o.dropout) apply_setting(rc, "lora.dropout", detail::format_number(*o.dropout));
  if (o.scaling) apply_setting(rc, "lora.scaling", *o.scaling);
  validate_lora_config(rc.pipeline.model, rc.pipeline.lora);
  rc.pipeline.derive_seeds();
  return rc;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Key-value record written next to the outputs of every artifact command.
class Manifest {
 public:
  Manifest(std::string command, const Options& o, const RunConfig& rc)
      : command_(std::move(command)), options_(o), rc_(rc), start_(std::chrono::steady_clock::now()) {}

  void input(const std::string& p) { inputs_.push_back(p); }
  void output(const std::string& p) { outputs_.push_back(p); }
  void timing(const std::string& stage, double seconds) { timings_.emplace_back(stage, seconds); }
  void result(const std::string& k, const std::string& v) { results_.emplace_back(k, v); }

  void write() const {
    const auto& p = rc_.pipeline;
    std::string out = "tool = uttertune\nversion = " + std::string(kToolVersion) + "\ncommand = " + command_ + "\n";
    std::string args;
    for (const auto& a : options_.argv) args += (args.empty() ? "" : " ") + a;
    out += "argv = " + args + "\n";
    out += "started = " + started_ + "\n";
    for (const auto& i : inputs_) out += "input = " + i + "\n";
    for (const auto& o : outputs_) out += "output = " + o + "\n";
    out += "seed.lexicon = " + std::to_string(p.lexicon.seed) + "\n";
    out += "seed.base_corpus = " + std::to_string(p.base_corpus.seed) + "\n";
    out += "seed.adapter_corpus = " + std::to_string(p.adapter_corpus.seed) + "\n";
    out += "seed.eval_sets = " + std::to_string(p.eval_sets.seed) + "\n";
    out += "seed.model = " + std::to_string(p.model.seed) + "\n";
    out += "seed.pretrain = " + std::to_string(p.pretrain.seed) + "\n";
    out += "seed.train = " + std::to_string(p.adapter_train.seed) + "\n";
    out += "seed.lora = " + std::to_string(p.lora.seed) + "\n";
    for (const auto& [k, v] : results_) out += "result." + k + " = " + v + "\n";
    for (const auto& [k, v] : timings_) out += "seconds." + k + " = " + detail::format_number(v) + "\n";
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    out += "seconds.total = " + detail::format_number(total) + "\n";
    out += "[config]\n" + format_settings(to_settings(rc_));
    tensor_io::write_file((fs::path(options_.out) / (command_ + ".manifest")).string(), out);
  }

 private:
  std::string command_;
  Options options_;
  RunConfig rc_;
  std::chrono::steady_clock::time_point start_;
  std::string started_ = utc_now();
  std::vector<std::string> inputs_, outputs_;
  std::vector<std::pair<std::string, double>> timings_;
  std::vector<std::pair<std::string, std::string>> results_;
};

std::string path_in(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

ProgressFn stderr_progress(const char* what) {
  return [what](const LossPoint& p) { std::fprintf(stderr, "%s step %zu  loss %.5f  lr %.3g\n", what, p.step, p.loss, p.lr); };
}

std::string loss_table(const TrainResult& r) {
  std::string out = "step\tloss\tlr\n";
  char buf[96];
  for (const auto& p : r.curve) {
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\n", p.step, p.loss, p.lr);
    out += buf;
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

// ---------------------------------------------------------------------------
// Notation

std::string annotation_json(const notation::PhonemeAnnotation& a) {
  auto phrases = nlohmann::ordered_json::array();
  for (const auto& p : a.phrases) {
    nlohmann::ordered_json j;
    auto morae = nlohmann::ordered_json::array();
    for (const auto& m : p.morae) morae.push_back(m.str());
    j["morae"] = morae;
    j["nucleus"] = p.nucleus ? nlohmann::ordered_json(*p.nucleus) : nlohmann::ordered_json(nullptr);
    phrases.push_back(j);
  }
  nlohmann::ordered_json out;
  out["phrases"] = phrases;
  return out.dump();
}

notation::PhonemeAnnotation annotation_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    notation::PhonemeAnnotation a;
    for (const auto& jp : j.at("phrases")) {
      notation::AccentPhrase p;
      for (const auto& m : jp.at("morae")) {
        const auto morae = notation::segment_morae(m.get<std::string>());
        if (morae.size() != 1) throw Error(ErrorCode::kInvalidAnnotation, "'" + m.get<std::string>() + "' is not one mora");
        p.morae.push_back(morae.front());
      }
      if (p.morae.empty()) throw Error(ErrorCode::kEmptyPhrase, "phrase without morae");
      if (!jp.at("nucleus").is_null()) {
        const auto n = jp.at("nucleus").get<std::size_t>();
        if (n < 1 || n > p.morae.size()) throw Error(ErrorCode::kMisplacedNucleusMark, "nucleus out of range");
        p.nucleus = n;
      }
      a.phrases.push_back(std::move(p));
    }
    if (a.phrases.empty()) throw Error(ErrorCode::kEmptyPhrase, "annotation without phrases");
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidAnnotation, std::string("expected parse output: ") + e.what());
  }
}

std::string read_stdin() {
  return std::string(std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>());
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

// ---------------------------------------------------------------------------
// Workflow

void write_data(const Options& o, const DataBundle& d, Manifest& m) {
  auto put = [&](const std::string& name, const std::string& bytes) {
    tensor_io::write_file(path_in(o, name), bytes);
    m.output(path_in(o, name));
  };
  put("lexicon.tsv", dataprep::serialize_lexicon(d.lexicon));
  put("base_corpus.jsonl", dataprep::serialize_corpus(d.lexicon, d.base_corpus));
  put("adapter_corpus.jsonl", dataprep::serialize_corpus(d.lexicon, d.adapter_corpus));
  put("test_set_1.jsonl", dataprep::serialize_eval_items(d.lexicon, d.eval_sets.test_set_1));
  put("test_set_2.jsonl", dataprep::serialize_eval_items(d.lexicon, d.eval_sets.test_set_2));
  put("leakage_set.jsonl", dataprep::serialize_eval_items(d.lexicon, d.eval_sets.leakage_set));
}

std::vector<dataprep::CorpusRecord> read_corpus(const Options& o, const std::string& name, Manifest& m) {
  m.input(path_in(o, name));
  return dataprep::parse_corpus(tensor_io::read_file(path_in(o, name)));
}

std::vector<dataprep::EvalItem> read_items(const Options& o, const std::string& name, Manifest& m) {
  m.input(path_in(o, name));
  return dataprep::parse_eval_items(tensor_io::read_file(path_in(o, name)));
}

tokenizer::Vocabulary read_vocab(const Options& o, Manifest* m = nullptr) {
  if (m) m->input(path_in(o, "vocab.txt"));
  return tokenizer::load_vocabulary(path_in(o, "vocab.txt"));
}

std::pair<ToyLMConfig, Weights<float>> read_base(const Options& o, Manifest* m = nullptr) {
  if (m) m->input(path_in(o, "base.ckpt"));
  return load_checkpoint<float>(path_in(o, "base.ckpt"));
}

LoraAdapter<float> read_adapter(const Options& o, const ToyLMConfig& mc, const Weights<float>& base,
                                Manifest* m = nullptr) {
  if (m) m->input(path_in(o, "adapter.bin"));
  auto a = load_adapter<float>(path_in(o, "adapter.bin"));
  if (a.base_fingerprint != fingerprint(mc, base)) {
    throw Error(ErrorCode::kShapeMismatch, "adapter was trained on a different base model");
  }
  return a;
}

int cmd_corpus_build(const Options& o) {
  const auto rc = load_config(o, "train.steps");
  fs::create_directories(o.out);
  Manifest m("corpus", o, rc);
  const auto t = std::chrono::steady_clock::now();
  const auto data = build_data(rc.pipeline);
  m.timing("build", seconds_since(t));
  write_data(o, data, m);
  m.result("base_sentences", std::to_string(data.base_corpus.size()));
  m.result("adapter_sentences", std::to_string(data.adapter_corpus.size()));
  m.write();
  std::printf("wrote corpus to %s\n", o.out.c_str());
  return kOk;
}

int cmd_vocab_train(const Options& o) {
  const auto rc = load_config(o, "train.steps");
  Manifest m("vocab", o, rc);
  m.input(path_in(o, "lexicon.tsv"));
  const auto lex = dataprep::load_lexicon(path_in(o, "lexicon.tsv"));
  const auto corpus = read_corpus(o, "base_corpus.jsonl", m);
  const auto t = std::chrono::steady_clock::now();
  const auto vocab = build_vocabulary(lex, corpus, rc.pipeline.bpe_merges, rc.pipeline.seed);
  m.timing("train", seconds_since(t));
  tokenizer::save_vocabulary(vocab, path_in(o, "vocab.txt"));
  m.output(path_in(o, "vocab.txt"));
  m.result("size", std::to_string(vocab.size()));
  m.write();
  std::printf("vocabulary: %d ids (%d text)\n", vocab.size(), vocab.text_size());
  return kOk;
}

int cmd_pretrain(const Options& o) {
  const auto rc = load_config(o, "pretrain.steps");
  Manifest m("pretrain", o, rc);
  const auto vocab = read_vocab(o, &m);
  const auto corpus = read_corpus(o, "base_corpus.jsonl", m);
  const auto mc = model_config_for(rc.pipeline, vocab);
  TrainResult log;
  const auto t = std::chrono::steady_clock::now();
  const auto w = pretrain_base(rc.pipeline, mc, vocab, corpus, &log, stderr_progress("pretrain"));
  m.timing("train", seconds_since(t));
  save_checkpoint(path_in(o, "base.ckpt"), mc, w);
  tensor_io::write_file(path_in(o, "pretrain_loss.tsv"), loss_table(log));
  m.output(path_in(o, "base.ckpt"));
  m.output(path_in(o, "pretrain_loss.tsv"));
  m.result("final_loss", detail::format_number(log.final_loss));
  m.result("fingerprint", fingerprint(mc, w));
  m.write();
  std::printf("base model: %zu parameters, final loss %.5f\n", base_param_count(mc), log.final_loss);
  return kOk;
}

int cmd_train(const Options& o) {
  const auto rc = load_config(o, "train.steps");
  Manifest m("train", o, rc);
  const auto vocab = read_vocab(o, &m);
  const auto [mc, base] = read_base(o, &m);
  const auto corpus = read_corpus(o, "adapter_corpus.jsonl", m);
  TrainResult log;
  const auto t = std::chrono::steady_clock::now();
  const auto adapter = train_adapter_on(rc.pipeline, mc, base, vocab, corpus, &log, stderr_progress("train"));
  m.timing("train", seconds_since(t));
  save_adapter(adapter, path_in(o, "adapter.bin"));
  tensor_io::write_file(path_in(o, "train_loss.tsv"), loss_table(log));
  m.output(path_in(o, "adapter.bin"));
  m.output(path_in(o, "train_loss.tsv"));
  m.result("final_loss", detail::format_number(log.final_loss));
  m.write();
  const auto budget = trainable_param_count(adapter, mc);
  std::printf("adapter: %zu trainable parameters (%.4f of base), final loss %.5f\n", budget.trainable, budget.ratio,
              log.final_loss);
  return kOk;
}

std::string describe_speech(const std::vector<TokenId>& ids, TokenId offset) {
  std::string morae, pitch;
  for (auto id : ids) {
    const auto c = dataprep::decode_code(id, offset);
    morae += dataprep::mora_inventory()[c.mora_id];
    pitch += c.pitch == notation::Pitch::kHigh ? 'H' : 'L';
  }
  return morae + "\t" + pitch;
}

int cmd_generate(const Options& o, const std::string& text, bool base_only) {
  const auto vocab = read_vocab(o);
  const auto [mc, base] = read_base(o);
  std::optional<LoraAdapter<float>> adapter;
  if (!base_only) adapter = read_adapter(o, mc, base);
  const RunConfig rc = load_config(o, "train.steps");
  const ModelGenerator<float> gen{{mc, base, adapter ? &*adapter : nullptr}, vocab, rc.pipeline.max_new};
  const auto ids = gen(text);
  std::printf("%s\n", describe_speech(ids, vocab.speech_token_offset()).c_str());
  return kOk;
}

bool check_report(const EvalThresholds& t, const eval::EvalReport& r) {
  bool ok = true;
  if (t.min_accent && r.summary.accent_correctness < *t.min_accent) {
    std::fprintf(stderr, "accent correctness %.4f below threshold %.4f\n", r.summary.accent_correctness, *t.min_accent);
    ok = false;
  }
  if (t.max_cer && r.summary.mean_cer > *t.max_cer) {
    std::fprintf(stderr, "CER %.4f above threshold %.4f\n", r.summary.mean_cer, *t.max_cer);
    ok = false;
  }
  return ok;
}

int cmd_eval(const Options& o, const std::string& set, const std::string& model) {
  const auto rc = load_config(o, "train.steps");
  Manifest m("eval", o, rc);
  const auto vocab = read_vocab(o, &m);
  const auto [mc, base] = read_base(o, &m);
  const auto mode = dataprep::parse_mode(o.mode);
  fs::create_directories(fs::path(o.out) / "eval");
  const auto t = std::chrono::steady_clock::now();

  if (set == "leakage_set") {
    const auto items = read_items(o, "leakage_set.jsonl", m);
    const auto adapter = read_adapter(o, mc, base, &m);
    const ModelGenerator<float> base_gen{{mc, base, nullptr}, vocab, rc.pipeline.max_new};
    const ModelGenerator<float> adapted_gen{{mc, base, &adapter}, vocab, rc.pipeline.max_new};
    eval::LeakageOptions lo;
    lo.seed = derive_seed(rc.pipeline.seed, 18);
    const auto res = eval::leakage_test(base_gen, adapted_gen, items, vocab.speech_token_offset(), lo);
    m.timing("eval", seconds_since(t));
    const auto out = path_in(o, "eval/leakage.jsonl");
    tensor_io::write_file(out, eval::serialize_leakage(res));
    m.output(out);
    m.result("difference", detail::format_number(res.difference));
    m.result("ci_low", detail::format_number(res.ci.low));
    m.result("ci_high", detail::format_number(res.ci.high));
    m.write();
    std::printf("leakage: baseline %.4f  adapted %.4f  difference %.4f  99%% CI [%.4f, %.4f]\n", res.baseline_rate,
                res.adapted_rate, res.difference, res.ci.low, res.ci.high);
    return kOk;
  }

  const auto items = read_items(o, set + ".jsonl", m);
  const bool adapted = model == "adapted" || (model == "auto" && mode == dataprep::InputMode::kTagged);
  std::optional<LoraAdapter<float>> adapter;
  if (adapted) adapter = read_adapter(o, mc, base, &m);
  const ModelGenerator<float> gen{{mc, base, adapter ? &*adapter : nullptr}, vocab, rc.pipeline.max_new};
  const auto report = eval::evaluate_set(gen, items, mode, vocab.speech_token_offset(), set);
  m.timing("eval", seconds_since(t));
  const auto out = path_in(o, "eval/" + set + "." + o.mode + (adapted ? ".adapted" : ".base") + ".jsonl");
  tensor_io::write_file(out, eval::serialize_report(report));
  m.output(out);
  m.result("mean_cer", detail::format_number(report.summary.mean_cer));
  m.result("accent_correctness", detail::format_number(report.summary.accent_correctness));
  m.write();
  std::printf("%s  [%s]\n", eval::format_summary(report).c_str(), adapted ? "adapted" : "base");
  return check_report(rc.thresholds, report) ? kOk : kThreshold;
}

int cmd_adapter_info(const Options& o, const std::string& path) {
  const auto a = load_adapter<float>(path.empty() ? path_in(o, "adapter.bin") : path);
  const auto& c = a.config;
  std::printf("r=%d\nalpha=%s\ndropout=%s\nscaling=%s\nseed=%llu\nlayers=%zu\nwidth=%ld\nbase_fingerprint=%s\n",
              c.rank, detail::format_number(c.alpha).c_str(), detail::format_number(c.dropout).c_str(),
              scaling_name(c.scaling), static_cast<unsigned long long>(c.seed), a.layers.size() / 4,
              static_cast<long>(a.tag_embeddings.cols()), a.base_fingerprint.empty() ? "none" : a.base_fingerprint.c_str());
  std::size_t params = static_cast<std::size_t>(a.tag_embeddings.size());
  for (const auto& l : a.layers) params += static_cast<std::size_t>(l.B.size() + l.C.size());
  std::printf("trainable_parameters=%zu\n", params);
  return kOk;
}

int cmd_adapter_merge(const Options& o) {
  const auto rc = load_config(o, "train.steps");
  Manifest m("merge", o, rc);
  const auto [mc, base] = read_base(o, &m);
  const auto adapter = read_adapter(o, mc, base, &m);
  const auto merged = merge(adapter, mc, base);
  save_checkpoint(path_in(o, "merged.ckpt"), mc, merged);
  m.output(path_in(o, "merged.ckpt"));
  m.write();
  std::printf("wrote %s\n", path_in(o, "merged.ckpt").c_str());
  return kOk;
}

int cmd_run(const Options& o) {
  const auto rc = load_config(o, "train.steps");
  fs::create_directories(fs::path(o.out) / "eval");
  Manifest m("run", o, rc);
  auto progress = [](const LossPoint& p) {
    std::fprintf(stderr, "  step %zu  loss %.5f  lr %.3g\n", p.step, p.loss, p.lr);
  };
  const auto r = run_pipeline(rc.pipeline, [](const std::string& s) { std::fprintf(stderr, "done: %s\n", s.c_str()); },
                              progress);
  const DataBundle d{r.lexicon, r.base_corpus, r.adapter_corpus, r.eval_sets};
  write_data(o, d, m);
  tokenizer::save_vocabulary(r.vocab, path_in(o, "vocab.txt"));
  save_checkpoint(path_in(o, "base.ckpt"), r.model_config, r.base);
  save_adapter(r.adapter, path_in(o, "adapter.bin"));
  tensor_io::write_file(path_in(o, "pretrain_loss.tsv"), loss_table(r.pretrain_log));
  tensor_io::write_file(path_in(o, "train_loss.tsv"), loss_table(r.adapter_log));
  for (const char* f : {"vocab.txt", "base.ckpt", "adapter.bin", "pretrain_loss.tsv", "train_loss.tsv"}) m.output(path_in(o, f));
  bool ok = true;
  for (const auto& rep : r.reports) {
    const auto name = "eval/" + rep.set + "." + dataprep::mode_name(rep.mode) + ".jsonl";
    tensor_io::write_file(path_in(o, name), eval::serialize_report(rep));
    m.output(path_in(o, name));
    std::printf("%s\n", eval::format_summary(rep).c_str());
    if (rep.set == "test_set_2" && rep.mode == dataprep::InputMode::kTagged) ok = check_report(rc.thresholds, rep);
  }
  tensor_io::write_file(path_in(o, "eval/leakage.jsonl"), eval::serialize_leakage(r.leakage));
  m.output(path_in(o, "eval/leakage.jsonl"));
  std::printf("leakage: baseline %.4f  adapted %.4f  99%% CI [%.4f, %.4f]\n", r.leakage.baseline_rate,
              r.leakage.adapted_rate, r.leakage.ci.low, r.leakage.ci.high);
  for (const auto& [stage, s] : r.timings) m.timing(stage, s);
  m.write();
  return ok ? kOk : kThreshold;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees the same large temporaries every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  Options o;
  o.argv.assign(argv, argv + argc);
  CLI::App app{"Pitch-accent control of a toy text-to-speech-token model with LoRA and phoneme tags"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.add_option("--config", o.config, "Config file (key = value, [section] prefixes) or a manifest");
  app.add_option("--seed", o.seed, "Run seed");
  app.add_option("--steps", o.steps, "Training steps");
  app.add_option("--rank", o.rank, "LoRA rank");
  app.add_option("--alpha", o.alpha, "LoRA alpha");
  app.add_option("--dropout", o.dropout, "LoRA dropout");
  app.add_option("--scaling", o.scaling, "LoRA scaling")->check(CLI::IsMember({"literal", "normalized"}));
  app.add_option("--mode", o.mode, "Input mode")->check(CLI::IsMember({"plain", "kana", "tagged"}));
  app.add_option("--out", o.out, "Run directory");

  std::string text, set = "test_set_2", model = "auto", adapter_path;
  bool base_only = false;
  auto* parse = app.add_subcommand("parse", "Parse notated katakana; prints JSON");
  parse->add_option("text", text, "Notated katakana (stdin when omitted)");
  auto* render = app.add_subcommand("render", "Render parse output back to notation");
  render->add_option("json", text, "Output of `parse` (stdin when omitted)");
  auto* pitch = app.add_subcommand("pitch", "H/L pattern per accent phrase");
  pitch->add_option("text", text, "Notated katakana (stdin when omitted)");
  auto* morae = app.add_subcommand("morae", "Mora segmentation");
  morae->add_option("text", text, "Katakana, optionally notated (stdin when omitted)");

  auto* corpus = app.add_subcommand("corpus", "Corpus commands");
  corpus->require_subcommand(1);
  auto* corpus_build = corpus->add_subcommand("build", "Lexicon, training corpora and evaluation sets");
  auto* vocab = app.add_subcommand("vocab", "Vocabulary commands");
  vocab->require_subcommand(1);
  auto* vocab_train = vocab->add_subcommand("train", "Train the BPE vocabulary");
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the base model on the untagged corpus");
  auto* train = app.add_subcommand("train", "Train the adapter on the tagged corpus");
  auto* generate = app.add_subcommand("generate", "Generate speech tokens for one input");
  generate->add_option("text", text, "Input text, may contain a tagged phoneme span")->required();
  generate->add_flag("--base-only", base_only, "Do not attach the adapter");
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a test set");
  eval_cmd->add_option("--set", set, "test_set_1, test_set_2 or leakage_set")
      ->check(CLI::IsMember({"test_set_1", "test_set_2", "leakage_set"}));
  eval_cmd->add_option("--model", model, "auto uses the adapter for tagged input only")
      ->check(CLI::IsMember({"auto", "base", "adapted"}));
  auto* adapter = app.add_subcommand("adapter", "Adapter commands");
  adapter->require_subcommand(1);
  auto* adapter_info = adapter->add_subcommand("info", "Print adapter settings");
  adapter_info->add_option("path", adapter_path, "Adapter file (default: <out>/adapter.bin)");
  auto* adapter_merge = adapter->add_subcommand("merge", "Bake the adapter into the base weights");
  auto* run = app.add_subcommand("run", "All stages in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    auto input = [&] { return trim(text.empty() ? read_stdin() : text); };
    if (*parse) {
      std::printf("%s\n", annotation_json(notation::parse_annotation(input())).c_str());
    } else if (*render) {
      std::printf("%s\n", notation::render_annotation(annotation_from_json(input())).c_str());
    } else if (*pitch) {
      const auto a = notation::parse_annotation(input());
      std::printf("%s\n", notation::format_pitch(a, notation::derive_pitch(a)).c_str());
    } else if (*morae) {
      const auto a = notation::parse_annotation(input());
      std::string out;
      for (const auto& p : a.phrases) {
        if (!out.empty()) out += " / ";
        for (std::size_t i = 0; i < p.morae.size(); ++i) out += (i ? " " : "") + p.morae[i].str();
      }
      std::printf("%s\n", out.c_str());
    } else if (*corpus_build) {
      return cmd_corpus_build(o);
    } else if (*vocab_train) {
      return cmd_vocab_train(o);
    } else if (*pretrain_cmd) {
      return cmd_pretrain(o);
    } else if (*train) {
      return cmd_train(o);
    } else if (*generate) {
      return cmd_generate(o, text, base_only);
    } else if (*eval_cmd) {
      return cmd_eval(o, set, model);
    } else if (*adapter_info) {
      return cmd_adapter_info(o, adapter_path);
    } else if (*adapter_merge) {
      return cmd_adapter_merge(o);
    } else if (*run) {
      return cmd_run(o);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(to_string(e.code())).c_str(), e.detail().c_str());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kOk;
}
