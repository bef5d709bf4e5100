#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ideaprune/rng.hpp"
#include "ideaprune/tensor.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune::testing {

/// The 2-layer gradient-check model: d=16, h=32, vocab=64, seq=8.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_hidden = 32;
  c.vocab_size = 64;
  c.seq_len = 8;
  c.init_std = 0.1;
  return c;
}

inline Batch random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t length, Rng& rng) {
  Batch b;
  b.batch = batch;
  b.length = length;
  for (std::size_t i = 0; i < batch * length; ++i) {
    b.inputs.push_back(static_cast<std::int32_t>(rng.below(cfg.vocab_size)));
    b.targets.push_back(static_cast<std::int32_t>(rng.below(cfg.vocab_size)));
  }
  return b;
}

/// Relative error with a floor on the denominator; fp64 central differences
/// at h = 1e-5 carry ~1e-11 absolute noise, so gradients below the floor are
/// compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Compares loss_and_grads against central differences on every parameter.
inline GradCheckReport grad_check(const ModelConfig& cfg, ModelWeights w, const Batch& b,
                                  const NeuronMask* mask = nullptr, double h = 1e-5) {
  const LossAndGrads analytic = loss_and_grads(cfg, w, b, mask);
  std::vector<std::vector<double>> grads;
  for_each_param(analytic.grads, [&](const std::string&, const auto& t) { grads.push_back(t.values); });
  GradCheckReport rep;
  std::size_t idx = 0;
  for_each_param(w, [&](const std::string& name, auto& t) {
    const auto numeric = finite_difference_grad([&] { return model_loss(cfg, w, b, mask); }, t.values, h);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double e = relative_error(grads[idx][i], numeric[i]);
      if (e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
      ++rep.checked;
    }
    ++idx;
  });
  return rep;
}

}  // namespace ideaprune::testing
