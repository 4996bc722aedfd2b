// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer over the joint text + speech token sequence.
//
// Pre-norm blocks with learned absolute positions, multi-head causal
// attention (no projection biases) and a GELU feed-forward; an untied output
// head. When an adapter is attached every attention projection computes
//
//   y = x W + s * (drop(x) B) C
//
// and the two tag ids read their embeddings from the adapter.
//
// Gradients are written by hand: `forward` keeps the activations `backward`
// needs, there is no tape.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/lora.hpp"
#include "uttertune/rng.hpp"
#include "uttertune/weights.hpp"

namespace uttertune {

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kLayerNormEps = 1e-5;

/// One sequence plus its next-token targets. Position t predicts
/// `targets[t]` and counts toward the loss only when `mask[t]` is set.
struct MaskedSequence {
  std::vector<TokenId> ids;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// Text prompt and the speech tokens it should produce (ending in the
/// end-of-speech id).
struct TrainingExample {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
};

/// input + <SOS> + targets. Only positions whose successor is a target id are
/// masked in; text positions never contribute.
inline MaskedSequence to_masked(const TrainingExample& ex, const TokenLayout& tokens) {
  MaskedSequence s;
  s.ids = ex.input_ids;
  s.ids.push_back(tokens.speech_start);
  s.ids.insert(s.ids.end(), ex.target_ids.begin(), ex.target_ids.end());
  const std::size_t n = s.ids.size();
  s.targets.assign(n, -1);
  s.mask.assign(n, 0);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    s.targets[t] = s.ids[t + 1];
    if (t + 1 > ex.input_ids.size()) s.mask[t] = 1;
  }
  return s;
}

namespace detail {

template <class T>
struct LnCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, LnCache<T>* cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Vec<T> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).eval();
    const T var = centered.square().mean();
    rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    xhat.row(i) = centered * rstd(i);
  }
  Mat<T> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

// Returns dx; accumulates dgain/dbias when given.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& c, const Mat<T>& gain, Mat<T>* dgain,
                           Mat<T>* dbias) {
  if (dgain) dgain->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (dbias) dbias->row(0) += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * gain.row(0).array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).sum() * inv_d;
    const T m2 = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

// GELU, tanh form: 0.5 u (1 + tanh(c (u + 0.044715 u^3))). Returns g and
// stores the tanh term for the backward pass.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

template <class T>
Mat<T> gelu(const Mat<T>& u, Mat<T>& tanh_out) {
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  tanh_out = (c * (u.array() + a * u.array().cube())).tanh().matrix();
  return (T(0.5) * u.array() * (T(1) + tanh_out.array())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& dg, const Mat<T>& u, const Mat<T>& t) {
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  const auto ua = u.array();
  const auto ta = t.array();
  return (dg.array() * (T(0.5) * (T(1) + ta) +
                        T(0.5) * ua * (T(1) - ta.square()) * c * (T(1) + T(3) * a * ua.square())))
      .matrix();
}

template <class T>
struct AdapterPathCache {
  Mat<T> input;  // dropped-out projection input
  Mat<T> mask;   // 0 or 1/(1-p); empty when dropout was off
  Mat<T> down;   // input * B
};

template <class T>
Mat<T> project(const Mat<T>& x, const Mat<T>& W, const LoraLayer<T>* lora, Rng* dropout_rng,
               AdapterPathCache<T>* cache) {
  Mat<T> y;
  y.noalias() = x * W;
  if (!lora) return y;
  Mat<T> in;
  Mat<T> mask;
  if (dropout_rng && lora->dropout_rate > 0.0) {
    mask.resize(x.rows(), x.cols());
    const T keep = static_cast<T>(1.0 / (1.0 - lora->dropout_rate));
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = dropout_rng->bernoulli(lora->dropout_rate) ? T(0) : keep;
    }
    in = x.cwiseProduct(mask);
  } else {
    in = x;
  }
  Mat<T> down;
  down.noalias() = in * lora->B;
  y.noalias() += lora->scale() * (down * lora->C);
  if (cache) {
    cache->input = std::move(in);
    cache->mask = std::move(mask);
    cache->down = std::move(down);
  }
  return y;
}

// dy -> dx through one (possibly adapted) projection, accumulating weight
// gradients into whichever of dW / glora is non-null.
template <class T>
Mat<T> project_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& W, const LoraLayer<T>* lora,
                        const AdapterPathCache<T>* cache, Mat<T>* dW, LoraLayer<T>* glora) {
  if (dW) dW->noalias() += x.transpose() * dy;
  Mat<T> dx;
  dx.noalias() = dy * W.transpose();
  if (!lora) return dx;
  const T s = lora->scale();
  if (glora) glora->C.noalias() += s * (cache->down.transpose() * dy);
  Mat<T> ddown;
  ddown.noalias() = s * (dy * lora->C.transpose());
  if (glora) glora->B.noalias() += cache->input.transpose() * ddown;
  Mat<T> din;
  din.noalias() = ddown * lora->B.transpose();
  if (cache->mask.size() > 0) din.array() *= cache->mask.array();
  dx += din;
  return dx;
}

// Causal attention of m query rows against n key rows; query row i sits at
// absolute position offset + i and sees keys 0..offset + i.
template <class T>
Mat<T> attend(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads, Eigen::Index offset,
              std::vector<Mat<T>>* probs_out) {
  const Eigen::Index m = q.rows(), n = k.rows(), d = q.cols(), dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> out(m, d);
  if (probs_out) probs_out->resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<T> s;
    s.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    s *= scale;
    for (Eigen::Index i = 0; i < m; ++i) {
      const Eigen::Index visible = std::min<Eigen::Index>(offset + i + 1, n);
      const T mx = s.row(i).head(visible).maxCoeff();
      T total = 0;
      for (Eigen::Index j = 0; j < visible; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        total += s(i, j);
      }
      s.row(i).head(visible) /= total;
      for (Eigen::Index j = visible; j < n; ++j) s(i, j) = 0;
    }
    out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (probs_out) (*probs_out)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out;
}

template <class T>
struct BlockCache {
  Mat<T> x_in;
  LnCache<T> ln1;
  Mat<T> h;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;
  Mat<T> attn;
  std::array<AdapterPathCache<T>, 4> lora;
  LnCache<T> ln2;
  Mat<T> h2;
  Mat<T> u;
  Mat<T> t;  // tanh term of the GELU
  Mat<T> g;
};

}  // namespace detail

template <class T>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::vector<detail::BlockCache<T>> blocks;
  detail::LnCache<T> lnf;
  Mat<T> hf;  // final normalized states, n x width
};

/// Frozen base weights plus an optional adapter. Holds references; the
/// caller keeps both alive.
template <class T>
struct ToyLM {
  const ToyLMConfig& config;
  const Weights<T>& weights;
  const LoraAdapter<T>* adapter = nullptr;

  const LoraLayer<T>* lora(int layer, Projection p) const {
    return adapter ? &adapter->layer(layer, p) : nullptr;
  }
};

namespace detail {

template <class T>
void check_sequence(const ToyLMConfig& c, const std::vector<TokenId>& ids) {
  if (ids.size() > static_cast<std::size_t>(c.max_sequence)) {
    throw Error(ErrorCode::kSequenceTooLong, std::to_string(ids.size()) + " tokens exceed max_sequence " +
                                                 std::to_string(c.max_sequence));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= c.vocab_size) throw Error(ErrorCode::kUnknownTokenId, "token id " + std::to_string(id));
  }
}

template <class T>
auto embedding_row(const ToyLM<T>& m, TokenId id) {
  const auto& tk = m.config.tokens;
  if (m.adapter && id == tk.phon_start) return m.adapter->tag_embeddings.row(0);
  if (m.adapter && id == tk.phon_end) return m.adapter->tag_embeddings.row(1);
  return m.weights.tok_emb.row(id);
}

template <class T>
Mat<T> embed(const ToyLM<T>& m, const std::vector<TokenId>& ids, Eigen::Index offset) {
  Mat<T> x(static_cast<Eigen::Index>(ids.size()), m.config.width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x.row(r) = embedding_row(m, ids[i]) + m.weights.pos_emb.row(offset + r);
  }
  return x;
}

}  // namespace detail

/// Runs the full sequence and returns the final normalized hidden states.
/// `dropout_rng` enables adapter dropout (training only).
template <class T>
Mat<T> forward_hidden(const ToyLM<T>& m, const std::vector<TokenId>& ids, ForwardCache<T>* cache,
                      Rng* dropout_rng = nullptr) {
  detail::check_sequence<T>(m.config, ids);
  const auto& w = m.weights;
  Mat<T> x = detail::embed(m, ids, 0);
  if (cache) {
    cache->ids = ids;
    cache->blocks.assign(w.blocks.size(), {});
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const int li = static_cast<int>(l);
    detail::BlockCache<T>* bc = cache ? &cache->blocks[l] : nullptr;
    auto lc = [&](Projection p) { return bc ? &bc->lora[static_cast<std::size_t>(p)] : nullptr; };

    Mat<T> h = detail::layer_norm(x, b.ln1_gain, b.ln1_bias, bc ? &bc->ln1 : nullptr);
    Mat<T> q = detail::project(h, b.wq, m.lora(li, Projection::kQuery), dropout_rng, lc(Projection::kQuery));
    Mat<T> k = detail::project(h, b.wk, m.lora(li, Projection::kKey), dropout_rng, lc(Projection::kKey));
    Mat<T> v = detail::project(h, b.wv, m.lora(li, Projection::kValue), dropout_rng, lc(Projection::kValue));
    Mat<T> a = detail::attend(q, k, v, m.config.heads, 0, bc ? &bc->probs : nullptr);
    Mat<T> o = detail::project(a, b.wo, m.lora(li, Projection::kOutput), dropout_rng, lc(Projection::kOutput));
    Mat<T> x1 = x + o;

    Mat<T> h2 = detail::layer_norm(x1, b.ln2_gain, b.ln2_bias, bc ? &bc->ln2 : nullptr);
    Mat<T> u;
    u.noalias() = h2 * b.w1;
    u.rowwise() += b.b1.row(0);
    Mat<T> t;
    Mat<T> g = detail::gelu(u, t);
    Mat<T> f;
    f.noalias() = g * b.w2;
    f.rowwise() += b.b2.row(0);
    Mat<T> x2 = x1 + f;

    if (bc) {
      bc->x_in = std::move(x);
      bc->h = std::move(h);
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->attn = std::move(a);
      bc->h2 = std::move(h2);
      bc->u = std::move(u);
      bc->t = std::move(t);
      bc->g = std::move(g);
    }
    x = std::move(x2);
  }
  Mat<T> hf = detail::layer_norm(x, w.lnf_gain, w.lnf_bias, cache ? &cache->lnf : nullptr);
  if (cache) cache->hf = hf;
  return hf;
}

/// Logits for every position: (sequence length) x vocab_size.
template <class T>
Mat<T> forward(const ToyLM<T>& m, const std::vector<TokenId>& ids) {
  const Mat<T> hf = forward_hidden<T>(m, ids, nullptr);
  Mat<T> logits;
  logits.noalias() = hf * m.weights.head;
  return logits;
}

/// Per layer, per head attention probabilities (rows are query positions).
template <class T>
std::vector<std::vector<Mat<T>>> attention_probabilities(const ToyLM<T>& m, const std::vector<TokenId>& ids) {
  ForwardCache<T> cache;
  forward_hidden(m, ids, &cache);
  std::vector<std::vector<Mat<T>>> out;
  for (auto& b : cache.blocks) out.push_back(std::move(b.probs));
  return out;
}

/// Which parameters receive gradients. Null members are skipped.
template <class T>
struct GradSink {
  Weights<T>* base = nullptr;
  LoraAdapter<T>* adapter = nullptr;
};

/// Backpropagates d(loss)/d(hf) through a cached forward pass.
template <class T>
void backward_hidden(const ToyLM<T>& m, const ForwardCache<T>& cache, const Mat<T>& dhf, GradSink<T> sink) {
  const auto& w = m.weights;
  Mat<T> dx = detail::layer_norm_backward(dhf, cache.lnf, w.lnf_gain, sink.base ? &sink.base->lnf_gain : nullptr,
                                          sink.base ? &sink.base->lnf_bias : nullptr);
  const int heads = m.config.heads;
  const Eigen::Index dh = m.config.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t lr = w.blocks.size(); lr-- > 0;) {
    const auto& b = w.blocks[lr];
    const auto& bc = cache.blocks[lr];
    const int li = static_cast<int>(lr);
    BlockWeights<T>* gb = sink.base ? &sink.base->blocks[lr] : nullptr;
    auto glora = [&](Projection p) { return sink.adapter ? &sink.adapter->layer(li, p) : nullptr; };
    auto cl = [&](Projection p) { return &bc.lora[static_cast<std::size_t>(p)]; };

    // Feed-forward branch.
    if (gb) gb->b2.row(0) += dx.colwise().sum();
    if (gb) gb->w2.noalias() += bc.g.transpose() * dx;
    Mat<T> dg;
    dg.noalias() = dx * b.w2.transpose();
    const Mat<T> du = detail::gelu_backward(dg, bc.u, bc.t);
    if (gb) gb->b1.row(0) += du.colwise().sum();
    if (gb) gb->w1.noalias() += bc.h2.transpose() * du;
    Mat<T> dh2;
    dh2.noalias() = du * b.w1.transpose();
    dx += detail::layer_norm_backward(dh2, bc.ln2, b.ln2_gain, gb ? &gb->ln2_gain : nullptr,
                                      gb ? &gb->ln2_bias : nullptr);

    // Attention branch.
    const Mat<T> da = detail::project_backward(dx, bc.attn, b.wo, m.lora(li, Projection::kOutput),
                                               cl(Projection::kOutput), gb ? &gb->wo : nullptr,
                                               glora(Projection::kOutput));
    Mat<T> dq = Mat<T>::Zero(bc.q.rows(), bc.q.cols());
    Mat<T> dk = Mat<T>::Zero(bc.k.rows(), bc.k.cols());
    Mat<T> dv = Mat<T>::Zero(bc.v.rows(), bc.v.cols());
    for (int h = 0; h < heads; ++h) {
      const Mat<T>& P = bc.probs[static_cast<std::size_t>(h)];
      const auto da_h = da.middleCols(h * dh, dh);
      Mat<T> dP;
      dP.noalias() = da_h * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() += P.transpose() * da_h;
      const Vec<T> rowdot = (dP.array() * P.array()).rowwise().sum();
      Mat<T> dS = P.array() * (dP.array().colwise() - rowdot.array());
      dS *= scale;
      dq.middleCols(h * dh, dh).noalias() += dS * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() += dS.transpose() * bc.q.middleCols(h * dh, dh);
    }
    Mat<T> dh1 = detail::project_backward(dq, bc.h, b.wq, m.lora(li, Projection::kQuery), cl(Projection::kQuery),
                                          gb ? &gb->wq : nullptr, glora(Projection::kQuery));
    dh1 += detail::project_backward(dk, bc.h, b.wk, m.lora(li, Projection::kKey), cl(Projection::kKey),
                                    gb ? &gb->wk : nullptr, glora(Projection::kKey));
    dh1 += detail::project_backward(dv, bc.h, b.wv, m.lora(li, Projection::kValue), cl(Projection::kValue),
                                    gb ? &gb->wv : nullptr, glora(Projection::kValue));
    dx += detail::layer_norm_backward(dh1, bc.ln1, b.ln1_gain, gb ? &gb->ln1_gain : nullptr,
                                      gb ? &gb->ln1_bias : nullptr);
  }

  const auto& tk = m.config.tokens;
  for (std::size_t i = 0; i < cache.ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const TokenId id = cache.ids[i];
    if (m.adapter && (id == tk.phon_start || id == tk.phon_end)) {
      if (sink.adapter) sink.adapter->tag_embeddings.row(id == tk.phon_start ? 0 : 1) += dx.row(r);
    } else if (sink.base) {
      sink.base->tok_emb.row(id) += dx.row(r);
    }
    if (sink.base) sink.base->pos_emb.row(r) += dx.row(r);
  }
}

namespace detail {

// Log-softmax cross-entropy on the selected rows. Returns the summed loss and,
// when `dlogits` is given, writes (softmax - onehot) * weight into it.
template <class T>
double cross_entropy_rows(const Mat<T>& logits, const std::vector<TokenId>& targets, Mat<T>* dlogits,
                          double weight) {
  double total = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - mx).exp().eval();
    const T z = e.sum();
    const TokenId t = targets[static_cast<std::size_t>(i)];
    total += static_cast<double>(std::log(z) - (logits(i, t) - mx));
    if (dlogits) {
      dlogits->row(i) = e / z;
      (*dlogits)(i, t) -= T(1);
      dlogits->row(i) *= static_cast<T>(weight);
    }
  }
  return total;
}

template <class T>
std::pair<std::vector<Eigen::Index>, std::vector<TokenId>> masked_rows(const MaskedSequence& s) {
  std::vector<Eigen::Index> rows;
  std::vector<TokenId> targets;
  for (std::size_t t = 0; t < s.ids.size(); ++t) {
    if (s.mask[t]) {
      rows.push_back(static_cast<Eigen::Index>(t));
      targets.push_back(s.targets[t]);
    }
  }
  return {rows, targets};
}

template <class T>
Mat<T> gather_rows(const Mat<T>& x, const std::vector<Eigen::Index>& rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

inline void check_batch(const std::vector<MaskedSequence>& batch, const ToyLMConfig& c) {
  for (const auto& s : batch) {
    if (s.targets.size() != s.ids.size() || s.mask.size() != s.ids.size()) {
      throw Error(ErrorCode::kShapeMismatch, "targets and mask must match the sequence length");
    }
    for (std::size_t t = 0; t < s.ids.size(); ++t) {
      if (s.mask[t] && (s.targets[t] < 0 || s.targets[t] >= c.vocab_size)) {
        throw Error(ErrorCode::kUnknownTokenId, "masked target id out of range");
      }
    }
  }
}

}  // namespace detail

/// Mean cross-entropy over every masked position in the batch.
template <class T>
double loss(const ToyLM<T>& m, const std::vector<MaskedSequence>& batch) {
  detail::check_batch(batch, m.config);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : batch) {
    const auto [rows, targets] = detail::masked_rows<T>(s);
    if (rows.empty()) continue;
    const Mat<T> hf = forward_hidden<T>(m, s.ids, nullptr);
    Mat<T> logits;
    logits.noalias() = detail::gather_rows(hf, rows) * m.weights.head;
    total += detail::cross_entropy_rows<T>(logits, targets, nullptr, 0.0);
    count += rows.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

/// Mean masked cross-entropy and its gradient, accumulated into `sink`.
/// `dropout_rng` switches adapter dropout on.
template <class T>
double loss_and_grad(const ToyLM<T>& m, const std::vector<MaskedSequence>& batch, GradSink<T> sink,
                     Rng* dropout_rng = nullptr) {
  detail::check_batch(batch, m.config);
  std::size_t count = 0;
  for (const auto& s : batch) count += s.masked_count();
  if (count == 0) return 0.0;
  const double weight = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (const auto& s : batch) {
    const auto [rows, targets] = detail::masked_rows<T>(s);
    if (rows.empty()) continue;
    ForwardCache<T> cache;
    const Mat<T> hf = forward_hidden(m, s.ids, &cache, dropout_rng);
    const Mat<T> hm = detail::gather_rows(hf, rows);
    Mat<T> logits;
    logits.noalias() = hm * m.weights.head;
    Mat<T> dlogits;
    total += detail::cross_entropy_rows<T>(logits, targets, &dlogits, weight);
    if (sink.base) sink.base->head.noalias() += hm.transpose() * dlogits;
    Mat<T> dhm;
    dhm.noalias() = dlogits * m.weights.head.transpose();
    Mat<T> dhf = Mat<T>::Zero(hf.rows(), hf.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) dhf.row(rows[i]) = dhm.row(static_cast<Eigen::Index>(i));
    backward_hidden(m, cache, dhf, sink);
  }
  return total * weight;
}

/// Key/value rows of every layer for the positions processed so far.
template <class T>
struct KvCache {
  std::vector<Mat<T>> keys;
  std::vector<Mat<T>> values;
  Eigen::Index length = 0;
};

/// Appends `ids` at positions cache.length.. and returns their logits.
template <class T>
Mat<T> extend(const ToyLM<T>& m, KvCache<T>& kv, const std::vector<TokenId>& ids) {
  const auto& c = m.config;
  const auto& w = m.weights;
  const auto n_new = static_cast<Eigen::Index>(ids.size());
  if (kv.length + n_new > c.max_sequence) {
    throw Error(ErrorCode::kSequenceTooLong, std::to_string(kv.length + n_new) + " tokens exceed max_sequence " +
                                                 std::to_string(c.max_sequence));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= c.vocab_size) throw Error(ErrorCode::kUnknownTokenId, "token id " + std::to_string(id));
  }
  if (kv.keys.empty()) {
    kv.keys.assign(w.blocks.size(), Mat<T>(c.max_sequence, c.width));
    kv.values.assign(w.blocks.size(), Mat<T>(c.max_sequence, c.width));
  }
  const Eigen::Index offset = kv.length;
  const Eigen::Index total = offset + n_new;
  Mat<T> x = detail::embed(m, ids, offset);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const int li = static_cast<int>(l);
    const Mat<T> h = detail::layer_norm<T>(x, b.ln1_gain, b.ln1_bias, nullptr);
    const Mat<T> q = detail::project<T>(h, b.wq, m.lora(li, Projection::kQuery), nullptr, nullptr);
    kv.keys[l].middleRows(offset, n_new) = detail::project<T>(h, b.wk, m.lora(li, Projection::kKey), nullptr, nullptr);
    kv.values[l].middleRows(offset, n_new) =
        detail::project<T>(h, b.wv, m.lora(li, Projection::kValue), nullptr, nullptr);
    const Mat<T> keys = kv.keys[l].topRows(total);
    const Mat<T> values = kv.values[l].topRows(total);
    const Mat<T> a = detail::attend<T>(q, keys, values, c.heads, offset, nullptr);
    x += detail::project<T>(a, b.wo, m.lora(li, Projection::kOutput), nullptr, nullptr);
    const Mat<T> h2 = detail::layer_norm<T>(x, b.ln2_gain, b.ln2_bias, nullptr);
    Mat<T> u;
    u.noalias() = h2 * b.w1;
    u.rowwise() += b.b1.row(0);
    Mat<T> t;
    const Mat<T> g = detail::gelu(u, t);
    Mat<T> f;
    f.noalias() = g * b.w2;
    f.rowwise() += b.b2.row(0);
    x += f;
  }
  kv.length = total;
  const Mat<T> hf = detail::layer_norm<T>(x, w.lnf_gain, w.lnf_bias, nullptr);
  Mat<T> logits;
  logits.noalias() = hf * w.head;
  return logits;
}

struct GenerateOptions {
  std::size_t max_new = 64;
  bool sample = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Speech-token ids generated after `prompt`. Decoding is restricted to the
/// speech range and the end-of-speech id; the end-of-speech id is not
/// returned. Generation also stops when the context window is full.
template <class T>
std::vector<TokenId> generate(const ToyLM<T>& m, const std::vector<TokenId>& prompt, const GenerateOptions& opts) {
  const auto& tk = m.config.tokens;
  if (prompt.empty() || prompt.size() > static_cast<std::size_t>(m.config.max_sequence)) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt of " + std::to_string(prompt.size()) +
                                                 " tokens does not fit max_sequence " +
                                                 std::to_string(m.config.max_sequence));
  }
  if (opts.sample && !(opts.temperature > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "sampling temperature must be positive");
  }
  std::vector<TokenId> allowed;
  for (TokenId id = tk.speech_offset; id < tk.speech_offset + tk.speech_count; ++id) allowed.push_back(id);
  allowed.push_back(tk.end_of_speech);

  Rng rng(opts.seed);
  KvCache<T> kv;
  Mat<T> logits = extend(m, kv, prompt);
  std::vector<TokenId> out;
  while (out.size() < opts.max_new) {
    const auto last = logits.row(logits.rows() - 1);
    TokenId next = allowed[0];
    if (opts.sample) {
      double mx = -std::numeric_limits<double>::infinity();
      for (TokenId id : allowed) mx = std::max(mx, static_cast<double>(last(id)));
      std::vector<double> p;
      p.reserve(allowed.size());
      for (TokenId id : allowed) p.push_back(std::exp((static_cast<double>(last(id)) - mx) / opts.temperature));
      next = allowed[rng.categorical(p)];
    } else {
      for (TokenId id : allowed) {
        if (last(id) > last(next)) next = id;
      }
    }
    if (next == tk.end_of_speech) break;
    out.push_back(next);
    if (kv.length >= m.config.max_sequence) break;
    logits = extend(m, kv, {next});
  }
  return out;
}

}  // namespace uttertune
