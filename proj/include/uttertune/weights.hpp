// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/rng.hpp"
#include "uttertune/tensor_io.hpp"
#include "uttertune/tokenizer.hpp"

namespace uttertune {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using tokenizer::TokenId;

enum class Projection : int { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };
inline constexpr Projection kProjections[] = {Projection::kQuery, Projection::kKey, Projection::kValue,
                                              Projection::kOutput};

inline const char* projection_name(Projection p) {
  switch (p) {
    case Projection::kQuery: return "q";
    case Projection::kKey: return "k";
    case Projection::kValue: return "v";
    case Projection::kOutput: return "o";
  }
  return "?";
}

/// Ids the model treats specially. Filled from a Vocabulary.
struct TokenLayout {
  TokenId phon_start = -1;
  TokenId phon_end = -1;
  TokenId speech_start = -1;
  TokenId end_of_speech = -1;
  TokenId speech_offset = 0;
  std::int32_t speech_count = 0;

  static TokenLayout from(const tokenizer::Vocabulary& v) {
    return {v.phon_start(), v.phon_end(), v.speech_start(), v.end_of_speech(), v.speech_token_offset(),
            v.speech_token_count()};
  }
  bool is_speech(TokenId id) const { return id >= speech_offset && id < speech_offset + speech_count; }
  bool operator==(const TokenLayout&) const = default;
};

struct ToyLMConfig {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int ff_width = 256;
  int vocab_size = 0;
  int max_sequence = 256;
  std::uint64_t seed = 0;
  TokenLayout tokens;

  int head_dim() const { return width / heads; }

  void validate() const {
    if (layers < 1 || width < 1 || heads < 1 || ff_width < 1 || max_sequence < 2) {
      throw Error(ErrorCode::kInvalidConfig, "model dimensions must be positive");
    }
    if (width % heads != 0) throw Error(ErrorCode::kInvalidConfig, "width must be divisible by heads");
    if (vocab_size < 1) throw Error(ErrorCode::kInvalidConfig, "vocab_size must be positive");
  }

  bool operator==(const ToyLMConfig&) const = default;
};

template <class T>
struct BlockWeights {
  Mat<T> ln1_gain, ln1_bias;
  Mat<T> wq, wk, wv, wo;  // width x width, applied as x * W
  Mat<T> ln2_gain, ln2_bias;
  Mat<T> w1, b1;  // width x ff, 1 x ff
  Mat<T> w2, b2;  // ff x width, 1 x width

  Mat<T>& projection(Projection p) {
    switch (p) {
      case Projection::kQuery: return wq;
      case Projection::kKey: return wk;
      case Projection::kValue: return wv;
      case Projection::kOutput: return wo;
    }
    return wq;
  }
  const Mat<T>& projection(Projection p) const { return const_cast<BlockWeights*>(this)->projection(p); }
};

template <class T>
struct Weights {
  Mat<T> tok_emb;  // vocab x width
  Mat<T> pos_emb;  // max_sequence x width
  std::vector<BlockWeights<T>> blocks;
  Mat<T> lnf_gain, lnf_bias;
  Mat<T> head;  // width x vocab
};

/// Visits every parameter as (name, matrix) in a fixed order. Works for both
/// const and mutable weights.
template <class W, class F>
void for_each_param(W& w, F&& fn) {
  fn(std::string("tok_emb"), w.tok_emb);
  fn(std::string("pos_emb"), w.pos_emb);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "ln1_gain", b.ln1_gain);
    fn(p + "ln1_bias", b.ln1_bias);
    fn(p + "wq", b.wq);
    fn(p + "wk", b.wk);
    fn(p + "wv", b.wv);
    fn(p + "wo", b.wo);
    fn(p + "ln2_gain", b.ln2_gain);
    fn(p + "ln2_bias", b.ln2_bias);
    fn(p + "w1", b.w1);
    fn(p + "b1", b.b1);
    fn(p + "w2", b.w2);
    fn(p + "b2", b.b2);
  }
  fn(std::string("lnf_gain"), w.lnf_gain);
  fn(std::string("lnf_bias"), w.lnf_bias);
  fn(std::string("head"), w.head);
}

/// Same-shaped weights filled with zeros (gradient buffers, optimizer state).
template <class T>
Weights<T> zeros_like(const Weights<T>& w) {
  Weights<T> z = w;
  for_each_param(z, [](const std::string&, Mat<T>& m) { m.setZero(); });
  return z;
}

template <class U, class T>
Weights<U> cast_weights(const Weights<T>& w) {
  Weights<U> out;
  out.blocks.resize(w.blocks.size());
  std::vector<const Mat<T>*> src;
  for_each_param(w, [&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  for_each_param(out, [&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
  return out;
}

inline std::size_t base_param_count(const ToyLMConfig& c) {
  const auto d = static_cast<std::size_t>(c.width);
  const auto f = static_cast<std::size_t>(c.ff_width);
  const std::size_t per_block = 4 * d + 4 * d * d + 2 * d * f + f + d;
  return static_cast<std::size_t>(c.vocab_size) * d * 2 + static_cast<std::size_t>(c.max_sequence) * d +
         static_cast<std::size_t>(c.layers) * per_block + 2 * d;
}

template <class T>
std::size_t param_count(const Weights<T>& w) {
  std::size_t n = 0;
  for_each_param(w, [&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

/// Correctly shaped weights, all zero.
template <class T>
Weights<T> allocate_weights(const ToyLMConfig& c) {
  c.validate();
  const int d = c.width;
  Weights<T> w;
  w.tok_emb = Mat<T>::Zero(c.vocab_size, d);
  w.pos_emb = Mat<T>::Zero(c.max_sequence, d);
  for (int l = 0; l < c.layers; ++l) {
    BlockWeights<T> b;
    b.ln1_gain = Mat<T>::Zero(1, d);
    b.ln1_bias = Mat<T>::Zero(1, d);
    b.wq = Mat<T>::Zero(d, d);
    b.wk = Mat<T>::Zero(d, d);
    b.wv = Mat<T>::Zero(d, d);
    b.wo = Mat<T>::Zero(d, d);
    b.ln2_gain = Mat<T>::Zero(1, d);
    b.ln2_bias = Mat<T>::Zero(1, d);
    b.w1 = Mat<T>::Zero(d, c.ff_width);
    b.b1 = Mat<T>::Zero(1, c.ff_width);
    b.w2 = Mat<T>::Zero(c.ff_width, d);
    b.b2 = Mat<T>::Zero(1, d);
    w.blocks.push_back(std::move(b));
  }
  w.lnf_gain = Mat<T>::Zero(1, d);
  w.lnf_bias = Mat<T>::Zero(1, d);
  w.head = Mat<T>::Zero(d, c.vocab_size);
  return w;
}

/// Gaussian init (std 0.02; residual output projections scaled by
/// 1/sqrt(2 * layers)), unit norm gains, zero biases.
template <class T>
Weights<T> init_weights(const ToyLMConfig& c) {
  Weights<T> w = allocate_weights<T>(c);
  Rng rng(c.seed);
  auto fill = [&](Mat<T>& m, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
  };
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * c.layers);
  fill(w.tok_emb, base_std);
  fill(w.pos_emb, base_std);
  for (auto& b : w.blocks) {
    b.ln1_gain.setOnes();
    fill(b.wq, base_std);
    fill(b.wk, base_std);
    fill(b.wv, base_std);
    fill(b.wo, resid_std);
    b.ln2_gain.setOnes();
    fill(b.w1, base_std);
    fill(b.w2, resid_std);
  }
  w.lnf_gain.setOnes();
  fill(w.head, base_std);
  return w;
}

/// True when every parameter is bit-identical.
template <class T>
bool bit_identical(const Weights<T>& a, const Weights<T>& b) {
  std::vector<const Mat<T>*> rhs;
  for_each_param(b, [&](const std::string&, const Mat<T>& m) { rhs.push_back(&m); });
  std::size_t i = 0;
  bool same = true;
  for_each_param(a, [&](const std::string&, const Mat<T>& m) {
    const Mat<T>& o = *rhs[i++];
    if (m.rows() != o.rows() || m.cols() != o.cols() ||
        std::memcmp(m.data(), o.data(), sizeof(T) * static_cast<std::size_t>(m.size())) != 0) {
      same = false;
    }
  });
  return same;
}

inline constexpr int kModelFormatVersion = 1;

inline std::vector<std::pair<std::string, std::string>> config_fields(const ToyLMConfig& c) {
  return {{"layers", std::to_string(c.layers)},
          {"width", std::to_string(c.width)},
          {"heads", std::to_string(c.heads)},
          {"ff_width", std::to_string(c.ff_width)},
          {"vocab_size", std::to_string(c.vocab_size)},
          {"max_sequence", std::to_string(c.max_sequence)},
          {"seed", std::to_string(c.seed)},
          {"phon_start", std::to_string(c.tokens.phon_start)},
          {"phon_end", std::to_string(c.tokens.phon_end)},
          {"speech_start", std::to_string(c.tokens.speech_start)},
          {"end_of_speech", std::to_string(c.tokens.end_of_speech)},
          {"speech_offset", std::to_string(c.tokens.speech_offset)},
          {"speech_count", std::to_string(c.tokens.speech_count)}};
}

inline ToyLMConfig config_from(const tensor_io::TensorFile& f) {
  ToyLMConfig c;
  c.layers = std::stoi(f.get("layers"));
  c.width = std::stoi(f.get("width"));
  c.heads = std::stoi(f.get("heads"));
  c.ff_width = std::stoi(f.get("ff_width"));
  c.vocab_size = std::stoi(f.get("vocab_size"));
  c.max_sequence = std::stoi(f.get("max_sequence"));
  c.seed = std::stoull(f.get("seed"));
  c.tokens.phon_start = std::stoi(f.get("phon_start"));
  c.tokens.phon_end = std::stoi(f.get("phon_end"));
  c.tokens.speech_start = std::stoi(f.get("speech_start"));
  c.tokens.end_of_speech = std::stoi(f.get("end_of_speech"));
  c.tokens.speech_offset = std::stoi(f.get("speech_offset"));
  c.tokens.speech_count = std::stoi(f.get("speech_count"));
  return c;
}

template <class T>
tensor_io::NamedTensor to_named(const std::string& name, const Mat<T>& m) {
  tensor_io::NamedTensor t{name, static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), {}};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

template <class T>
void from_named(const tensor_io::NamedTensor& t, Mat<T>& m) {
  if (t.rows != static_cast<std::size_t>(m.rows()) || t.cols != static_cast<std::size_t>(m.cols())) {
    throw Error(ErrorCode::kShapeMismatch, "tensor '" + t.name + "' has an unexpected shape");
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
}

template <class T>
std::string serialize_checkpoint(const ToyLMConfig& c, const Weights<T>& w) {
  tensor_io::TensorFile f;
  f.kind = "model";
  f.version = kModelFormatVersion;
  f.meta = config_fields(c);
  for_each_param(w, [&](const std::string& name, const Mat<T>& m) { f.tensors.push_back(to_named(name, m)); });
  return tensor_io::serialize(f);
}

/// CRC-32 of the serialized checkpoint; adapters record it to name their base.
template <class T>
std::string fingerprint(const ToyLMConfig& c, const Weights<T>& w) {
  return tensor_io::hex32(tensor_io::crc32_of(serialize_checkpoint(c, w)));
}

template <class T>
void save_checkpoint(const std::string& path, const ToyLMConfig& c, const Weights<T>& w) {
  tensor_io::write_file(path, serialize_checkpoint(c, w));
}

template <class T>
std::pair<ToyLMConfig, Weights<T>> parse_checkpoint(const std::string& bytes) {
  const auto f = tensor_io::parse(bytes, "model", kModelFormatVersion);
  ToyLMConfig c = config_from(f);
  c.validate();
  Weights<T> w = allocate_weights<T>(c);
  for_each_param(w, [&](const std::string& name, Mat<T>& m) { from_named(f.tensor(name), m); });
  return {c, std::move(w)};
}

template <class T>
std::pair<ToyLMConfig, Weights<T>> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(tensor_io::read_file(path));
}

}  // namespace uttertune
