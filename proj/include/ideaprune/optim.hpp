#pragma once

// Adam with bias correction:
//   M <- b1 M + (1-b1) G,  V <- b2 V + (1-b2) G*G
//   W <- W - lr * (M / (1-b1^t)) / (sqrt(V / (1-b2^t)) + eps)
// plus an optional decoupled weight decay (off by default) and an optional
// global-norm gradient clip (off by default).

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "ideaprune/error.hpp"
#include "ideaprune/mask.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables

  bool operator==(const AdamConfig&) const = default;
};

struct OptimizerState {
  ModelWeights m;
  ModelWeights v;
  std::int64_t step = 0;
  AdamConfig hp;

  static OptimizerState zeros_like(const ModelWeights& w, const AdamConfig& hp = {}) {
    return {ideaprune::zeros_like(w), ideaprune::zeros_like(w), 0, hp};
  }

  bool operator==(const OptimizerState&) const = default;
};

/// One Adam update of a flat tensor at (already incremented) step t.
inline void adam_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v,
                        double lr, std::int64_t t, const AdamConfig& hp, double grad_scale = 1.0) {
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i] * grad_scale;
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    if (hp.weight_decay != 0.0) w[i] -= lr * hp.weight_decay * w[i];
    w[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

inline double global_grad_norm(const ModelWeights& grads) {
  double ss = 0.0;
  for_each_param(grads, [&](const std::string&, const auto& t) {
    for (double x : t.values) ss += x * x;
  });
  return std::sqrt(ss);
}

inline void adam_step(ModelWeights& weights, const ModelWeights& grads, OptimizerState& state, double lr) {
  if (!(lr >= 0.0)) throw InternalError("adam_step: learning rate must be >= 0");
  // Validate everything before touching any state so a bad step leaves no trace.
  std::vector<std::span<double>> w_spans;
  std::vector<std::span<const double>> g_spans;
  std::vector<std::span<double>> m_spans, v_spans;
  for_each_param(weights, [&](const std::string&, auto& t) { w_spans.emplace_back(t.values); });
  for_each_param(grads, [&](const std::string& name, const auto& t) {
    if (!all_finite(t.values)) throw NonFiniteError("adam_step: non-finite gradient in " + name);
    g_spans.emplace_back(t.values);
  });
  for_each_param(state.m, [&](const std::string&, auto& t) { m_spans.emplace_back(t.values); });
  for_each_param(state.v, [&](const std::string&, auto& t) { v_spans.emplace_back(t.values); });
  if (g_spans.size() != w_spans.size() || m_spans.size() != w_spans.size() || v_spans.size() != w_spans.size()) {
    throw DimensionError("adam_step: tensor count mismatch");
  }
  for (std::size_t i = 0; i < w_spans.size(); ++i) {
    if (g_spans[i].size() != w_spans[i].size() || m_spans[i].size() != w_spans[i].size() ||
        v_spans[i].size() != w_spans[i].size()) {
      throw DimensionError("adam_step: shape mismatch in tensor #" + std::to_string(i));
    }
  }

  double scale = 1.0;
  if (state.hp.grad_clip > 0.0) {
    const double norm = global_grad_norm(grads);
    if (norm > state.hp.grad_clip) scale = state.hp.grad_clip / norm;
  }
  state.step += 1;
  for (std::size_t i = 0; i < w_spans.size(); ++i) {
    adam_update(w_spans[i], g_spans[i], m_spans[i], v_spans[i], lr, state.step, state.hp, scale);
  }
}

/// Zeroes first/second moments of pruned FFN neurons (rows of up, gate, down).
inline void mask_optimizer_state(OptimizerState& state, const NeuronMask& mask) {
  if (mask.layers() != state.m.layers.size()) throw DimensionError("mask_optimizer_state: layer count mismatch");
  for (std::size_t l = 0; l < mask.layers(); ++l) {
    const auto& keep = mask.keep[l];
    for (ModelWeights* s : {&state.m, &state.v}) {
      FfnWeights& f = s->layers[l].ffn;
      if (keep.size() != f.hidden()) {
        throw DimensionError("mask_optimizer_state: mask length " + std::to_string(keep.size()) + " vs hidden " +
                             std::to_string(f.hidden()));
      }
      for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i] != 0) continue;
        for (Tensor2D* t : {&f.up, &f.gate, &f.down}) std::fill(t->row(i).begin(), t->row(i).end(), 0.0);
      }
    }
  }
}

}  // namespace ideaprune
