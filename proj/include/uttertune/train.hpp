// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "uttertune/error.hpp"
#include "uttertune/lora.hpp"
#include "uttertune/model.hpp"
#include "uttertune/rng.hpp"

namespace uttertune {

struct TrainConfig {
  double learning_rate = 1e-4;
  double warmup_fraction = 0.10;
  std::size_t batch_size = 8;
  std::size_t steps = 3000;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  /// Loss is recorded every `log_every` steps (and at the last step).
  std::size_t log_every = 50;

  void validate() const {
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
      throw Error(ErrorCode::kInvalidConfig, "warmup_fraction must lie in (0, 1)");
    }
    if (steps == 0 || batch_size == 0) throw Error(ErrorCode::kInvalidConfig, "steps and batch_size must be positive");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidConfig, "learning_rate must be positive");
    if (log_every == 0) throw Error(ErrorCode::kInvalidConfig, "log_every must be positive");
  }

  std::size_t warmup_steps() const {
    const auto w = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(steps)));
    return w == 0 ? 1 : w;
  }
};

/// Learning rate for 1-based `step`: linear ramp to the peak over the warmup
/// steps, then cosine decay to zero at the final step.
inline double lr_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t warm = cfg.warmup_steps();
  if (step <= warm) return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
  if (cfg.steps <= warm) return 0.0;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(cfg.steps - warm);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// Decoupled weight decay Adam over a fixed list of parameter matrices.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Mat<T>*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Mat<T>::Zero(p->rows(), p->cols()));
      v_.push_back(Mat<T>::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<Mat<T>*>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.epsilon);
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      const auto& g = *grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      p *= decay;
      p.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
  }

 private:
  std::vector<Mat<T>*> params_;
  TrainConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  std::size_t t_ = 0;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  double final_loss = 0.0;
};

using ProgressFn = std::function<void(const LossPoint&)>;

template <class T>
std::vector<Mat<T>*> adapter_params(LoraAdapter<T>& a) {
  std::vector<Mat<T>*> out;
  for (auto& l : a.layers) {
    out.push_back(&l.B);
    out.push_back(&l.C);
  }
  out.push_back(&a.tag_embeddings);
  return out;
}

template <class T>
std::vector<Mat<T>*> base_params(Weights<T>& w) {
  std::vector<Mat<T>*> out;
  for_each_param(w, [&](const std::string&, Mat<T>& m) { out.push_back(&m); });
  return out;
}

namespace detail {

template <class T>
double clip_global_norm(const std::vector<Mat<T>*>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads) sq += static_cast<double>(g->template cast<double>().squaredNorm());
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto* g : grads) *g *= f;
  }
  return norm;
}

// Epoch-shuffled minibatches drawn from a seeded stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    cursor_ = n;
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (cursor_ >= order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_;
};

template <class T, class Sink>
TrainResult run_training(const std::vector<MaskedSequence>& data, const TrainConfig& cfg,
                         const std::vector<Mat<T>*>& params, Sink&& make_grads, const ProgressFn& progress) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::kInvalidConfig, "training set is empty");
  AdamW<T> opt(params, cfg);
  BatchSampler sampler(data.size(), derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  TrainResult result;
  std::vector<MaskedSequence> batch;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    batch.clear();
    for (std::size_t i : sampler.next(cfg.batch_size)) batch.push_back(data[i]);
    auto [loss, grads] = make_grads(batch, dropout_rng);
    const double norm = clip_global_norm<T>(grads, cfg.clip_norm);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %zu: loss %g, gradient norm %g, lr %g", step, loss, norm,
                    lr_at(cfg, step));
      throw Error(ErrorCode::kNonFiniteLoss, buf);
    }
    const double lr = lr_at(cfg, step);
    opt.step(grads, lr);
    result.final_loss = loss;
    if (step % cfg.log_every == 0 || step == cfg.steps || step == 1) {
      result.curve.push_back({step, loss, lr});
      if (progress) progress(result.curve.back());
    }
  }
  return result;
}

}  // namespace detail

/// Trains only the adapter factors and tag embeddings; `base` is read-only.
template <class T>
TrainResult train_adapter(const ToyLMConfig& config, const Weights<T>& base, LoraAdapter<T>& adapter,
                          const std::vector<MaskedSequence>& data, const TrainConfig& cfg,
                          const ProgressFn& progress = {}) {
  LoraAdapter<T> grads = adapter;
  auto grad_list = adapter_params(grads);
  auto make = [&](const std::vector<MaskedSequence>& batch, Rng& drop) {
    for (auto* g : grad_list) g->setZero();
    const ToyLM<T> m{config, base, &adapter};
    const double l = loss_and_grad(m, batch, GradSink<T>{nullptr, &grads}, &drop);
    return std::pair<double, std::vector<Mat<T>*>>(l, grad_list);
  };
  return detail::run_training<T>(data, cfg, adapter_params(adapter), make, progress);
}

/// Trains every base weight (no adapter).
template <class T>
TrainResult pretrain(const ToyLMConfig& config, Weights<T>& weights, const std::vector<MaskedSequence>& data,
                     const TrainConfig& cfg, const ProgressFn& progress = {}) {
  Weights<T> grads = zeros_like(weights);
  auto grad_list = base_params(grads);
  auto make = [&](const std::vector<MaskedSequence>& batch, Rng&) {
    for (auto* g : grad_list) g->setZero();
    const ToyLM<T> m{config, weights, nullptr};
    const double l = loss_and_grad(m, batch, GradSink<T>{&grads, nullptr}, nullptr);
    return std::pair<double, std::vector<Mat<T>*>>(l, grad_list);
  };
  return detail::run_training<T>(data, cfg, base_params(weights), make, progress);
}

}  // namespace uttertune
