#pragma once

// Structured FFN-width pruning.
//
// Iterative sensitivity pruning keeps, per FFN matrix, an EMA of the
// element-wise sensitivity |grad * W| and scores neuron k by
//   c_k = f2(f1(S_up[k,:]), f1(S_gate[k,:]), f1(S_down[k,:])).
// Each step the top retained_count(t) non-committed neurons survive; the rest
// are committed (pruned for good) and their rows zeroed in all three matrices.
// Once the sparsity ramp ends the pruned rows are physically removed.
//
// The one-shot baselines (random, activation-norm) produce a single mask at
// the target sparsity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ideaprune/error.hpp"
#include "ideaprune/mask.hpp"
#include "ideaprune/optim.hpp"
#include "ideaprune/rng.hpp"
#include "ideaprune/schedule.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

enum class Reduce { mean, max };

inline double reduce(std::span<const double> v, Reduce how) {
  if (v.empty()) return 0.0;
  if (how == Reduce::max) return *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::string to_string(Reduce r) { return r == Reduce::mean ? "mean" : "max"; }

inline Reduce parse_reduce(const std::string& s) {
  if (s == "mean") return Reduce::mean;
  if (s == "max") return Reduce::max;
  throw ConfigError("unknown reduction '" + s + "' (expected mean or max)");
}

struct CombineSpec {
  Reduce row = Reduce::mean;     // f1: row -> scalar
  Reduce across = Reduce::max;   // f2: (up, gate, down) -> scalar

  bool operator==(const CombineSpec&) const = default;
};

/// Element-wise scores share the FfnWeights layout (up, gate, down).
using FfnScores = FfnWeights;

struct ImportanceState {
  std::vector<FfnScores> scores;
  double lambda = 0.4;
  CombineSpec combine;

  static ImportanceState zeros_like(const ModelWeights& w, double lambda = 0.4, CombineSpec combine = {}) {
    ImportanceState s;
    s.lambda = lambda;
    s.combine = combine;
    for (const auto& L : w.layers) {
      s.scores.push_back({Tensor2D(L.ffn.up.rows, L.ffn.up.cols), Tensor2D(L.ffn.gate.rows, L.ffn.gate.cols),
                          Tensor2D(L.ffn.down.rows, L.ffn.down.cols)});
    }
    return s;
  }

  bool operator==(const ImportanceState&) const = default;
};

inline std::vector<FfnWeights> ffn_snapshot(const ModelWeights& w) {
  std::vector<FfnWeights> out;
  out.reserve(w.layers.size());
  for (const auto& L : w.layers) out.push_back(L.ffn);
  return out;
}

/// S <- (1 - lambda) * |G * W| + lambda * S for every FFN matrix. `grads` are
/// the mini-batch mean gradients evaluated at `weights`.
inline void update_sensitivity(ImportanceState& state, std::span<const FfnWeights> weights,
                               std::span<const FfnWeights> grads) {
  if (weights.size() != state.scores.size() || grads.size() != state.scores.size()) {
    throw DimensionError("update_sensitivity: layer count mismatch");
  }
  const double lam = state.lambda;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto update = [&](Tensor2D& s, const Tensor2D& w, const Tensor2D& g) {
      if (s.rows != w.rows || s.cols != w.cols || g.rows != w.rows || g.cols != w.cols) {
        throw DimensionError("update_sensitivity: score " + s.shape_string() + ", weight " + w.shape_string() +
                             ", grad " + g.shape_string());
      }
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        s.values[i] = (1.0 - lam) * std::abs(g.values[i] * w.values[i]) + lam * s.values[i];
      }
    };
    update(state.scores[l].up, weights[l].up, grads[l].up);
    update(state.scores[l].gate, weights[l].gate, grads[l].gate);
    update(state.scores[l].down, weights[l].down, grads[l].down);
  }
}

inline void update_sensitivity(ImportanceState& state, const ModelWeights& weights, const ModelWeights& grads) {
  const auto w = ffn_snapshot(weights);
  const auto g = ffn_snapshot(grads);
  update_sensitivity(state, w, g);
}

inline Tensor1D combine_neuron_scores(const FfnScores& s, const CombineSpec& spec) {
  const std::size_t h = s.up.rows;
  if (s.gate.rows != h || s.down.rows != h) {
    throw DimensionError("combine_neuron_scores: hidden sizes " + s.up.shape_string() + ", " +
                         s.gate.shape_string() + ", " + s.down.shape_string());
  }
  Tensor1D c(h);
  for (std::size_t k = 0; k < h; ++k) {
    const double triple[3] = {reduce(s.up.row(k), spec.row), reduce(s.gate.row(k), spec.row),
                              reduce(s.down.row(k), spec.row)};
    c[k] = reduce(triple, spec.across);
  }
  return c;
}

inline Tensor1D combine_neuron_scores(const ImportanceState& state, std::size_t layer) {
  return combine_neuron_scores(state.scores.at(layer), state.combine);
}

/// Keeps the `retain` highest-scoring non-committed neurons of one layer (ties
/// to the lower index) and commits the rest.
inline void select_mask(std::span<const double> scores, std::size_t retain, NeuronMask& mask, std::size_t layer) {
  auto& keep = mask.keep.at(layer);
  auto& committed = mask.committed.at(layer);
  if (scores.size() != keep.size()) {
    throw DimensionError("select_mask: " + std::to_string(scores.size()) + " scores for hidden " +
                         std::to_string(keep.size()));
  }
  std::vector<std::size_t> alive;
  alive.reserve(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i] != 0) alive.push_back(i);
  if (retain > alive.size()) {
    throw InternalError("select_mask: asked to retain " + std::to_string(retain) + " but only " +
                        std::to_string(alive.size()) + " neurons are uncommitted");
  }
  if (retain == alive.size()) return;
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::nth_element(alive.begin(), alive.begin() + static_cast<std::ptrdiff_t>(retain), alive.end(), better);
  for (auto it = alive.begin() + static_cast<std::ptrdiff_t>(retain); it != alive.end(); ++it) {
    keep[*it] = 0;
    committed.push_back(*it);
  }
  std::sort(committed.begin(), committed.end());
}

/// Mask update at pruning-clock step t under the cubic schedule.
inline void select_mask(std::span<const double> scores, std::int64_t t, const SparsitySpec& spec, NeuronMask& mask,
                        std::size_t layer) {
  select_mask(scores, retained_count(t, mask.hidden(layer), spec), mask, layer);
}

/// W' = diag(m) W for up, gate and down.
inline void apply_mask(FfnWeights& ffn, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != ffn.hidden()) {
    throw DimensionError("apply_mask: mask length " + std::to_string(keep.size()) + " vs hidden " +
                         std::to_string(ffn.hidden()));
  }
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] != 0) continue;
    for (Tensor2D* t : {&ffn.up, &ffn.gate, &ffn.down}) std::fill(t->row(i).begin(), t->row(i).end(), 0.0);
  }
}

inline void apply_mask(ModelWeights& w, const NeuronMask& mask) {
  if (mask.layers() != w.layers.size()) throw DimensionError("apply_mask: layer count mismatch");
  for (std::size_t l = 0; l < mask.layers(); ++l) apply_mask(w.layers[l].ffn, mask.keep[l]);
}

namespace detail {

inline Tensor2D keep_rows(const Tensor2D& t, const std::vector<std::uint8_t>& keep) {
  std::size_t n = 0;
  for (auto k : keep) n += k != 0;
  Tensor2D out(n, t.cols);
  std::size_t r = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] == 0) continue;
    std::copy(t.row(i).begin(), t.row(i).end(), out.row(r++).begin());
  }
  return out;
}

inline void compact_triplet(FfnWeights& f, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != f.hidden()) throw DimensionError("compact: mask length does not match hidden size");
  f.up = keep_rows(f.up, keep);
  f.gate = keep_rows(f.gate, keep);
  f.down = keep_rows(f.down, keep);
}

}  // namespace detail

/// Physically removes pruned rows from the weights, optimizer moments and
/// importance scores. Refused before the sparsity ramp has finished
/// (pruning-clock step t < T_w + T_p). Afterwards the mask is all ones over
/// the surviving neurons, in their original order.
inline void compact(ModelWeights& w, OptimizerState& opt, ImportanceState& importance, NeuronMask& mask,
                    std::int64_t t, const SparsitySpec& spec) {
  if (t < spec.end()) {
    throw InternalError("compact: sparsity schedule not complete (step " + std::to_string(t) + " < " +
                        std::to_string(spec.end()) + ")");
  }
  if (mask.layers() != w.layers.size()) throw DimensionError("compact: layer count mismatch");
  for (std::size_t l = 0; l < mask.layers(); ++l) {
    const auto& keep = mask.keep[l];
    detail::compact_triplet(w.layers[l].ffn, keep);
    detail::compact_triplet(opt.m.layers[l].ffn, keep);
    detail::compact_triplet(opt.v.layers[l].ffn, keep);
    if (l < importance.scores.size()) detail::compact_triplet(importance.scores[l], keep);
  }
  for (std::size_t l = 0; l < mask.layers(); ++l) {
    const std::size_t n = mask.retained(l);
    mask.keep[l].assign(n, 1);
    mask.committed[l].clear();
  }
}

/// Uniformly random subset of ceil((1 - R) h) neurons retained.
inline std::vector<std::uint8_t> random_oneshot_keep(std::size_t hidden, double target, Rng& rng) {
  if (!(target >= 0.0 && target < 1.0)) throw ConfigError("random_oneshot_mask: target must lie in [0, 1)");
  std::vector<std::size_t> idx(hidden);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  std::vector<std::uint8_t> keep(hidden, 0);
  const std::size_t n = retained_for_sparsity(target, hidden);
  for (std::size_t i = 0; i < n; ++i) keep[idx[i]] = 1;
  return keep;
}

inline NeuronMask random_oneshot_mask(std::size_t n_layers, std::size_t hidden, double target, Rng& rng) {
  NeuronMask m = NeuronMask::all_ones(n_layers, hidden);
  for (std::size_t l = 0; l < n_layers; ++l) {
    m.keep[l] = random_oneshot_keep(hidden, target, rng);
    for (std::size_t i = 0; i < hidden; ++i)
      if (m.keep[l][i] == 0) m.committed[l].push_back(i);
  }
  return m;
}

/// Per-layer activation importance: c_i = (1/B) sum_n ||Z^(n)[:, i]||_2 over
/// B calibration sequences, Z = silu(X W_up^T) * (X W_gate^T).
inline std::vector<Tensor1D> activation_importance(const ModelConfig& cfg, const ModelWeights& w,
                                                   std::span<const Batch> calibration,
                                                   const NeuronMask* mask = nullptr) {
  std::size_t samples = 0;
  for (const auto& b : calibration) samples += b.batch;
  if (samples == 0) throw DataError("activation_importance: empty calibration set");
  std::vector<Tensor1D> c;
  for (const auto& L : w.layers) c.emplace_back(L.ffn.hidden());
  for (const auto& b : calibration) {
    const ForwardCache fc = model_forward(cfg, w, b, mask);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const Tensor2D& z = fc.layers[l].ffn.act;
      for (std::size_t s = 0; s < b.batch; ++s) {
        for (std::size_t i = 0; i < z.cols; ++i) {
          double ss = 0.0;
          for (std::size_t r = 0; r < b.length; ++r) {
            const double v = z(s * b.length + r, i);
            ss += v * v;
          }
          c[l][i] += std::sqrt(ss);
        }
      }
    }
  }
  for (auto& layer : c)
    for (double& v : layer.values) v /= static_cast<double>(samples);
  return c;
}

}  // namespace ideaprune
