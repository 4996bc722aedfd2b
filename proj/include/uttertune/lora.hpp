// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Low-rank adapters on the attention projections of a frozen base model.
//
// For a frozen projection W (d x k), the adapted weight is
//
//   W_eff = W + s * B * C,    B: d x r,  C: r x k
//
// where s = alpha in literal scaling mode and alpha / r in normalized mode.
// C starts at zero so a fresh adapter leaves the base model unchanged.

#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/rng.hpp"
#include "uttertune/tensor_io.hpp"
#include "uttertune/weights.hpp"

namespace uttertune {

enum class LoraScaling { kLiteral, kNormalized };

inline const char* scaling_name(LoraScaling s) { return s == LoraScaling::kLiteral ? "literal" : "normalized"; }

inline LoraScaling parse_scaling(const std::string& s) {
  if (s == "literal") return LoraScaling::kLiteral;
  if (s == "normalized") return LoraScaling::kNormalized;
  throw Error(ErrorCode::kInvalidConfig, "scaling must be 'literal' or 'normalized', got '" + s + "'");
}

struct LoraConfig {
  int rank = 16;
  double alpha = 64.0;
  double dropout = 0.05;
  LoraScaling scaling = LoraScaling::kLiteral;
  std::uint64_t seed = 0;
  /// Standard deviation of the Gaussian B factor at init.
  double init_std = 0.02;

  bool operator==(const LoraConfig&) const = default;
};

struct LoraTarget {
  int layer = 0;
  Projection projection = Projection::kQuery;
  bool operator==(const LoraTarget&) const = default;
};

template <class T>
struct LoraLayer {
  LoraTarget target;
  Mat<T> B;  // d x r
  Mat<T> C;  // r x k
  int rank = 0;
  double alpha = 0.0;
  double dropout_rate = 0.0;
  LoraScaling scaling = LoraScaling::kLiteral;

  T scale() const {
    return static_cast<T>(scaling == LoraScaling::kLiteral ? alpha : alpha / rank);
  }
  bool operator==(const LoraLayer&) const = default;
};

template <class T>
struct LoraAdapter {
  LoraConfig config;
  /// Ordered by layer, then q, k, v, o.
  std::vector<LoraLayer<T>> layers;
  /// Row 0: <PHON_START>, row 1: <PHON_END>.
  Mat<T> tag_embeddings;
  std::string base_fingerprint;

  LoraLayer<T>& layer(int l, Projection p) { return layers[static_cast<std::size_t>(4 * l + static_cast<int>(p))]; }
  const LoraLayer<T>& layer(int l, Projection p) const {
    return layers[static_cast<std::size_t>(4 * l + static_cast<int>(p))];
  }
  bool operator==(const LoraAdapter&) const = default;
};

inline void validate_lora_config(const ToyLMConfig& base, const LoraConfig& cfg) {
  if (cfg.rank < 1 || cfg.rank > base.width) {
    throw Error(ErrorCode::kInvalidRank, "rank " + std::to_string(cfg.rank) + " outside [1, " +
                                             std::to_string(base.width) + "]");
  }
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "dropout must lie in [0, 1)");
  }
}

/// One adapter layer per (layer, projection) of `base`. B ~ N(0, init_std^2),
/// C = 0, tag embeddings ~ N(0, 0.02^2); all draws from `cfg.seed`.
template <class T>
LoraAdapter<T> init_adapter(const ToyLMConfig& base, const LoraConfig& cfg) {
  base.validate();
  validate_lora_config(base, cfg);
  Rng rng(cfg.seed);
  LoraAdapter<T> a;
  a.config = cfg;
  const int d = base.width;
  for (int l = 0; l < base.layers; ++l) {
    for (Projection p : kProjections) {
      LoraLayer<T> layer;
      layer.target = {l, p};
      layer.rank = cfg.rank;
      layer.alpha = cfg.alpha;
      layer.dropout_rate = cfg.dropout;
      layer.scaling = cfg.scaling;
      layer.B.resize(d, cfg.rank);
      for (Eigen::Index i = 0; i < layer.B.size(); ++i) {
        layer.B.data()[i] = static_cast<T>(rng.normal() * cfg.init_std);
      }
      layer.C = Mat<T>::Zero(cfg.rank, d);
      a.layers.push_back(std::move(layer));
    }
  }
  a.tag_embeddings.resize(2, d);
  for (Eigen::Index i = 0; i < a.tag_embeddings.size(); ++i) {
    a.tag_embeddings.data()[i] = static_cast<T>(rng.normal() * 0.02);
  }
  return a;
}

/// W + s * B * C, evaluated in the order written.
template <class T>
Mat<T> effective_weight(const Mat<T>& W, const LoraLayer<T>& layer) {
  if (layer.B.rows() != W.rows() || layer.C.cols() != W.cols() || layer.B.cols() != layer.C.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "adapter factors do not compose to the weight shape");
  }
  Mat<T> out = W + layer.scale() * (layer.B * layer.C);
  return out;
}

struct ParamBudget {
  std::size_t trainable = 0;
  std::size_t base = 0;
  double ratio = 0.0;
};

/// Sum over adapter layers of r * (d + k), plus the two tag embeddings.
template <class T>
ParamBudget trainable_param_count(const LoraAdapter<T>& adapter, const ToyLMConfig& base) {
  ParamBudget b;
  for (const auto& l : adapter.layers) {
    b.trainable += static_cast<std::size_t>(l.rank) * static_cast<std::size_t>(l.B.rows() + l.C.cols());
  }
  b.trainable += static_cast<std::size_t>(adapter.tag_embeddings.size());
  b.base = base_param_count(base);
  b.ratio = static_cast<double>(b.trainable) / static_cast<double>(b.base);
  return b;
}

namespace detail {

// W +/- s*B*C accumulated in double and rounded once to T.
template <class T>
void apply_delta(Mat<T>& W, const LoraLayer<T>& layer, double sign) {
  const Eigen::MatrixXd delta = layer.B.template cast<double>() * layer.C.template cast<double>();
  const double s = sign * static_cast<double>(layer.scale());
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      W(i, j) = static_cast<T>(static_cast<double>(W(i, j)) + s * delta(i, j));
    }
  }
}

inline void check_layout(const TokenLayout& t) {
  if (t.phon_start < 0 || t.phon_end < 0) {
    throw Error(ErrorCode::kInvalidConfig, "model has no tag token ids");
  }
}

}  // namespace detail

/// Bakes the adapter into plain weights: every projection becomes W + s*B*C
/// and the tag embedding rows are written into the token table.
template <class T>
Weights<T> merge(const LoraAdapter<T>& adapter, const ToyLMConfig& config, Weights<T> base) {
  detail::check_layout(config.tokens);
  if (adapter.layers.size() != 4 * base.blocks.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adapter does not cover the base model");
  }
  for (const auto& l : adapter.layers) {
    auto& W = base.blocks[static_cast<std::size_t>(l.target.layer)].projection(l.target.projection);
    if (l.B.rows() != W.rows() || l.C.cols() != W.cols()) {
      throw Error(ErrorCode::kShapeMismatch, "adapter factors do not compose to the weight shape");
    }
    detail::apply_delta(W, l, +1.0);
  }
  base.tok_emb.row(config.tokens.phon_start) = adapter.tag_embeddings.row(0);
  base.tok_emb.row(config.tokens.phon_end) = adapter.tag_embeddings.row(1);
  return base;
}

/// Subtracts s*B*C from every projection. The tag rows keep the adapter's
/// values; the base never reads those rows.
template <class T>
Weights<T> unmerge(const LoraAdapter<T>& adapter, Weights<T> merged) {
  if (adapter.layers.size() != 4 * merged.blocks.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adapter does not cover the merged model");
  }
  for (const auto& l : adapter.layers) {
    detail::apply_delta(merged.blocks[static_cast<std::size_t>(l.target.layer)].projection(l.target.projection), l,
                        -1.0);
  }
  return merged;
}

inline constexpr int kAdapterFormatVersion = 1;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string serialize_adapter(const LoraAdapter<T>& a, int version = kAdapterFormatVersion) {
  tensor_io::TensorFile f;
  f.kind = "adapter";
  f.version = version;
  const int width = static_cast<int>(a.tag_embeddings.cols());
  f.meta = {{"rank", std::to_string(a.config.rank)},
            {"alpha", format_double(a.config.alpha)},
            {"dropout", format_double(a.config.dropout)},
            {"scaling", scaling_name(a.config.scaling)},
            {"seed", std::to_string(a.config.seed)},
            {"init_std", format_double(a.config.init_std)},
            {"base_fingerprint", a.base_fingerprint.empty() ? "none" : a.base_fingerprint},
            {"layers", std::to_string(a.layers.size() / 4)},
            {"width", std::to_string(width)}};
  for (const auto& l : a.layers) {
    const std::string p = "layers." + std::to_string(l.target.layer) + "." + projection_name(l.target.projection);
    f.tensors.push_back(to_named(p + ".B", l.B));
    f.tensors.push_back(to_named(p + ".C", l.C));
  }
  f.tensors.push_back(to_named("tag_embeddings", a.tag_embeddings));
  return tensor_io::serialize(f);
}

template <class T>
LoraAdapter<T> parse_adapter(const std::string& bytes) {
  const auto f = tensor_io::parse(bytes, "adapter", kAdapterFormatVersion);
  LoraAdapter<T> a;
  a.config.rank = std::stoi(f.get("rank"));
  a.config.alpha = std::stod(f.get("alpha"));
  a.config.dropout = std::stod(f.get("dropout"));
  a.config.scaling = parse_scaling(f.get("scaling"));
  a.config.seed = std::stoull(f.get("seed"));
  a.config.init_std = std::stod(f.get("init_std"));
  a.base_fingerprint = f.get("base_fingerprint") == "none" ? "" : f.get("base_fingerprint");
  const int layers = std::stoi(f.get("layers"));
  const int width = std::stoi(f.get("width"));
  if (a.config.rank < 1 || a.config.rank > width) throw Error(ErrorCode::kInvalidRank, "rank out of range");
  for (int l = 0; l < layers; ++l) {
    for (Projection p : kProjections) {
      LoraLayer<T> layer;
      layer.target = {l, p};
      layer.rank = a.config.rank;
      layer.alpha = a.config.alpha;
      layer.dropout_rate = a.config.dropout;
      layer.scaling = a.config.scaling;
      layer.B.resize(width, a.config.rank);
      layer.C.resize(a.config.rank, width);
      const std::string name = "layers." + std::to_string(l) + "." + projection_name(p);
      from_named(f.tensor(name + ".B"), layer.B);
      from_named(f.tensor(name + ".C"), layer.C);
      a.layers.push_back(std::move(layer));
    }
  }
  a.tag_embeddings.resize(2, width);
  from_named(f.tensor("tag_embeddings"), a.tag_embeddings);
  return a;
}

template <class T>
void save_adapter(const LoraAdapter<T>& a, const std::string& path) {
  tensor_io::write_file(path, serialize_adapter(a));
}

template <class T>
LoraAdapter<T> load_adapter(const std::string& path) {
  return parse_adapter<T>(tensor_io::read_file(path));
}

}  // namespace uttertune
