#pragma once

// Decoder-only transformer with pre-norm RMSNorm blocks, learned absolute
// positions, a tied output head, and a gated-SiLU FFN:
//
//   y = W_down^T (silu(W_up x) * (W_gate x)),   W_up, W_gate, W_down in R^{h x d}
//
// Forward and backward passes are written out explicitly; there is no autograd.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "ideaprune/error.hpp"
#include "ideaprune/mask.hpp"
#include "ideaprune/rng.hpp"
#include "ideaprune/tensor.hpp"

namespace ideaprune {

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t ffn_hidden = 1024;
  std::size_t vocab_size = 258;
  std::size_t seq_len = 128;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || vocab_size == 0 || seq_len == 0) {
      throw ConfigError("model: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model: d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (ffn_hidden < 1) throw ConfigError("model: ffn_hidden must be >= 1");
    if (!(norm_eps > 0.0)) throw ConfigError("model: norm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct FfnWeights {
  Tensor2D up;    // h x d
  Tensor2D gate;  // h x d
  Tensor2D down;  // h x d

  std::size_t hidden() const { return up.rows; }
  bool operator==(const FfnWeights&) const = default;
};

struct LayerWeights {
  Tensor1D attn_norm;
  Tensor2D wq, wk, wv, wo;  // d x d, applied as x * W^T
  Tensor1D ffn_norm;
  FfnWeights ffn;

  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  Tensor2D token_embedding;     // vocab x d, also the output head
  Tensor2D position_embedding;  // seq_len x d
  std::vector<LayerWeights> layers;
  Tensor1D final_norm;

  bool operator==(const ModelWeights&) const = default;
};

/// Visits every trainable tensor in a fixed order: fn(name, tensor), where
/// tensor is a Tensor1D& or Tensor2D&.
template <class Weights, class Fn>
  requires std::is_same_v<std::remove_const_t<Weights>, ModelWeights>
void for_each_param(Weights& w, Fn&& fn) {
  fn(std::string("token_embedding"), w.token_embedding);
  fn(std::string("position_embedding"), w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "attn_norm", L.attn_norm);
    fn(p + "wq", L.wq);
    fn(p + "wk", L.wk);
    fn(p + "wv", L.wv);
    fn(p + "wo", L.wo);
    fn(p + "ffn_norm", L.ffn_norm);
    fn(p + "ffn.up", L.ffn.up);
    fn(p + "ffn.gate", L.ffn.gate);
    fn(p + "ffn.down", L.ffn.down);
  }
  fn(std::string("final_norm"), w.final_norm);
}

/// All-zero tensors with the shapes of `w`.
inline ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  for_each_param(z, [](const std::string&, auto& t) { std::fill(t.values.begin(), t.values.end(), 0.0); });
  return z;
}

inline std::size_t parameter_count(const ModelWeights& w) {
  std::size_t n = 0;
  for_each_param(w, [&](const std::string&, const auto& t) { n += t.values.size(); });
  return n;
}

inline std::size_t ffn_parameter_count(const ModelWeights& w) {
  std::size_t n = 0;
  for (const auto& L : w.layers) n += L.ffn.up.size() + L.ffn.gate.size() + L.ffn.down.size();
  return n;
}

/// Random init: N(0, init_std) everywhere, residual projections (wo, ffn.down)
/// scaled by 1/sqrt(2 n_layers), norm gains at 1.
inline ModelWeights init_weights(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t h = cfg.ffn_hidden;
  const double residual_std = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  auto fill = [&rng](Tensor2D& t, double std) {
    for (double& v : t.values) v = std * rng.normal();
  };

  ModelWeights w;
  w.token_embedding = Tensor2D(cfg.vocab_size, d);
  fill(w.token_embedding, cfg.init_std);
  w.position_embedding = Tensor2D(cfg.seq_len, d);
  fill(w.position_embedding, cfg.init_std);
  w.layers.resize(cfg.n_layers);
  for (auto& L : w.layers) {
    L.attn_norm = Tensor1D(d, 1.0);
    for (Tensor2D* t : {&L.wq, &L.wk, &L.wv}) {
      *t = Tensor2D(d, d);
      fill(*t, cfg.init_std);
    }
    L.wo = Tensor2D(d, d);
    fill(L.wo, residual_std);
    L.ffn_norm = Tensor1D(d, 1.0);
    L.ffn.up = Tensor2D(h, d);
    fill(L.ffn.up, cfg.init_std);
    L.ffn.gate = Tensor2D(h, d);
    fill(L.ffn.gate, cfg.init_std);
    L.ffn.down = Tensor2D(h, d);
    fill(L.ffn.down, residual_std);
  }
  w.final_norm = Tensor1D(d, 1.0);
  return w;
}

/// Checks weights against a config; the FFN width may differ from
/// cfg.ffn_hidden (compacted models) but must agree within each layer.
inline void check_weights(const ModelConfig& cfg, const ModelWeights& w) {
  const std::size_t d = cfg.d_model;
  auto expect = [](bool ok, const std::string& what) {
    if (!ok) throw DimensionError("weights: " + what);
  };
  expect(w.token_embedding.rows == cfg.vocab_size && w.token_embedding.cols == d, "token_embedding shape");
  expect(w.position_embedding.rows == cfg.seq_len && w.position_embedding.cols == d, "position_embedding shape");
  expect(w.layers.size() == cfg.n_layers, "layer count");
  expect(w.final_norm.len() == d, "final_norm length");
  for (const auto& L : w.layers) {
    const std::size_t h = L.ffn.up.rows;
    expect(L.attn_norm.len() == d && L.ffn_norm.len() == d, "norm gain length");
    for (const Tensor2D* t : {&L.wq, &L.wk, &L.wv, &L.wo}) expect(t->rows == d && t->cols == d, "attention shape");
    for (const Tensor2D* t : {&L.ffn.up, &L.ffn.gate, &L.ffn.down}) {
      expect(t->rows == h && t->cols == d, "ffn triplet shapes disagree");
    }
  }
}

// ---------------------------------------------------------------------------
// FFN

struct FfnCache {
  Tensor2D input;  // N x d
  Tensor2D up;     // W_up x, N x h
  Tensor2D gate;   // W_gate x, N x h
  Tensor2D act;    // Z = silu(up) * gate * mask, N x h
};

struct FfnGrads {
  Tensor2D up, gate, down;
  Tensor2D input;
};

/// Row-batched FFN: x is N x d; returns N x d. keep (length h) zeroes the
/// activation of pruned neurons; nullptr means no mask.
inline Tensor2D ffn_forward(const Tensor2D& x, const FfnWeights& w, const std::vector<std::uint8_t>* keep,
                            FfnCache* cache) {
  const std::size_t h = w.hidden();
  if (x.cols != w.up.cols || w.gate.rows != h || w.down.rows != h || w.gate.cols != x.cols ||
      w.down.cols != x.cols) {
    throw DimensionError("ffn_forward: input " + x.shape_string() + " vs W_up " + w.up.shape_string() +
                         ", W_gate " + w.gate.shape_string() + ", W_down " + w.down.shape_string());
  }
  if (keep != nullptr && keep->size() != h) {
    throw DimensionError("ffn_forward: mask length " + std::to_string(keep->size()) + " vs hidden " +
                         std::to_string(h));
  }
  Tensor2D up = matmul_bt(x, w.up);
  Tensor2D gate = matmul_bt(x, w.gate);
  Tensor2D act(x.rows, h);
  for (std::size_t n = 0; n < x.rows; ++n) {
    for (std::size_t i = 0; i < h; ++i) {
      double z = silu(up(n, i)) * gate(n, i);
      if (keep != nullptr && (*keep)[i] == 0) z = 0.0;
      act(n, i) = z;
    }
  }
  Tensor2D y = matmul(act, w.down);
  if (cache != nullptr) {
    cache->input = x;
    cache->up = std::move(up);
    cache->gate = std::move(gate);
    cache->act = std::move(act);
  }
  return y;
}

/// Single-vector form.
inline Tensor1D ffn_forward(const Tensor1D& x, const FfnWeights& w, FfnCache* cache = nullptr) {
  Tensor2D xr(1, x.len());
  xr.values = x.values;
  Tensor2D y = ffn_forward(xr, w, nullptr, cache);
  Tensor1D out;
  out.values = std::move(y.values);
  return out;
}

inline FfnGrads ffn_backward(const Tensor2D& grad_y, const FfnCache& cache, const FfnWeights& w,
                             const std::vector<std::uint8_t>* keep) {
  const std::size_t h = w.hidden();
  if (cache.up.rows != grad_y.rows || cache.up.cols != h || grad_y.cols != w.down.cols ||
      cache.input.rows != grad_y.rows) {
    throw DimensionError("ffn_backward: stale cache " + cache.up.shape_string() + " for grad " +
                         grad_y.shape_string() + " and hidden " + std::to_string(h));
  }
  FfnGrads g;
  g.down = matmul_at(cache.act, grad_y);
  Tensor2D d_act = matmul_bt(grad_y, w.down);
  Tensor2D d_up(grad_y.rows, h);
  Tensor2D d_gate(grad_y.rows, h);
  for (std::size_t n = 0; n < grad_y.rows; ++n) {
    for (std::size_t i = 0; i < h; ++i) {
      if (keep != nullptr && (*keep)[i] == 0) continue;
      const double u = cache.up(n, i);
      const double dz = d_act(n, i);
      d_up(n, i) = dz * cache.gate(n, i) * silu_grad(u);
      d_gate(n, i) = dz * silu(u);
    }
  }
  g.up = matmul_at(d_up, cache.input);
  g.gate = matmul_at(d_gate, cache.input);
  g.input = matmul(d_up, w.up);
  add_inplace(g.input, matmul(d_gate, w.gate));
  return g;
}

// ---------------------------------------------------------------------------
// Normalization and attention

inline Tensor2D rms_norm(const Tensor2D& x, const Tensor1D& gain, double eps, std::vector<double>& inv_rms) {
  Tensor2D y(x.rows, x.cols);
  inv_rms.assign(x.rows, 0.0);
  for (std::size_t n = 0; n < x.rows; ++n) {
    double ss = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) ss += x(n, j) * x(n, j);
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.cols) + eps);
    inv_rms[n] = r;
    for (std::size_t j = 0; j < x.cols; ++j) y(n, j) = x(n, j) * r * gain[j];
  }
  return y;
}

inline Tensor2D rms_norm_backward(const Tensor2D& dy, const Tensor2D& x, const Tensor1D& gain,
                                  const std::vector<double>& inv_rms, Tensor1D& d_gain) {
  Tensor2D dx(x.rows, x.cols);
  const double d = static_cast<double>(x.cols);
  for (std::size_t n = 0; n < x.rows; ++n) {
    const double r = inv_rms[n];
    double dot = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      dot += dy(n, j) * gain[j] * x(n, j);
      d_gain[j] += dy(n, j) * x(n, j) * r;
    }
    const double coef = dot * r * r * r / d;
    for (std::size_t j = 0; j < x.cols; ++j) dx(n, j) = dy(n, j) * gain[j] * r - x(n, j) * coef;
  }
  return dx;
}

/// Causal multi-head attention over `batch` sequences of `length` rows each.
/// probs is filled with batch*heads*length*length weights (zeros above the diagonal).
inline Tensor2D causal_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t batch,
                                 std::size_t length, std::size_t heads, std::vector<double>& probs) {
  const std::size_t d = q.cols;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor2D ctx(q.rows, d);
  probs.assign(batch * heads * length * length, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < length; ++i) {
        double* p = probs.data() + ((b * heads + hd) * length + i) * length;
        const double* qi = &q.values[(b * length + i) * d + off];
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = &k.values[(b * length + j) * d + off];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * scale;
        }
        softmax_inplace(std::span<double>(p, i + 1));
        double* out = &ctx.values[(b * length + i) * d + off];
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = &v.values[(b * length + j) * d + off];
          const double pj = p[j];
          for (std::size_t c = 0; c < dh; ++c) out[c] += pj * vj[c];
        }
      }
    }
  }
  return ctx;
}

inline void causal_attention_backward(const Tensor2D& d_ctx, const Tensor2D& q, const Tensor2D& k,
                                      const Tensor2D& v, const std::vector<double>& probs, std::size_t batch,
                                      std::size_t length, std::size_t heads, Tensor2D& dq, Tensor2D& dk,
                                      Tensor2D& dv) {
  const std::size_t d = q.cols;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Tensor2D(q.rows, d);
  dk = Tensor2D(q.rows, d);
  dv = Tensor2D(q.rows, d);
  std::vector<double> dp(length);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < length; ++i) {
        const double* p = probs.data() + ((b * heads + hd) * length + i) * length;
        const double* go = &d_ctx.values[(b * length + i) * d + off];
        double weighted = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = &v.values[(b * length + j) * d + off];
          double* dvj = &dv.values[(b * length + j) * d + off];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += go[c] * vj[c];
            dvj[c] += p[j] * go[c];
          }
          dp[j] = s;
          weighted += p[j] * s;
        }
        const double* qi = &q.values[(b * length + i) * d + off];
        double* dqi = &dq.values[(b * length + i) * d + off];
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p[j] * (dp[j] - weighted) * scale;
          const double* kj = &k.values[(b * length + j) * d + off];
          double* dkj = &dk.values[(b * length + j) * d + off];
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Whole model

/// `batch` sequences of `length` tokens; targets are the next tokens.
struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;

  std::size_t tokens() const { return batch * length; }
};

struct LayerCache {
  Tensor2D x_in;
  std::vector<double> attn_inv_rms;
  Tensor2D h_attn, q, k, v, ctx;
  std::vector<double> probs;
  Tensor2D x_mid;
  std::vector<double> ffn_inv_rms;
  FfnCache ffn;  // ffn.input is the normalized x_mid
};

struct ForwardCache {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> inputs;
  std::vector<LayerCache> layers;
  Tensor2D x_final;
  std::vector<double> final_inv_rms;
  Tensor2D h_final;
  Tensor2D logits;  // N x vocab
};

inline const std::vector<std::uint8_t>* layer_keep(const NeuronMask* mask, std::size_t layer) {
  return mask == nullptr ? nullptr : &mask->keep.at(layer);
}

inline ForwardCache model_forward(const ModelConfig& cfg, const ModelWeights& w, const Batch& tokens,
                                  const NeuronMask* mask = nullptr) {
  if (tokens.length == 0 || tokens.batch == 0) throw DimensionError("model_forward: empty batch");
  if (tokens.length > cfg.seq_len) {
    throw DimensionError("model_forward: sequence length " + std::to_string(tokens.length) + " exceeds seq_len " +
                         std::to_string(cfg.seq_len));
  }
  if (tokens.inputs.size() != tokens.tokens()) throw DimensionError("model_forward: input size mismatch");
  if (mask != nullptr && mask->layers() != cfg.n_layers) throw DimensionError("model_forward: mask layer count");
  const std::size_t d = cfg.d_model;
  const std::size_t n_rows = tokens.tokens();

  ForwardCache c;
  c.batch = tokens.batch;
  c.length = tokens.length;
  c.inputs = tokens.inputs;
  Tensor2D x(n_rows, d);
  for (std::size_t n = 0; n < n_rows; ++n) {
    const std::int32_t id = tokens.inputs[n];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DimensionError("model_forward: token id " + std::to_string(id) + " out of range for vocab " +
                           std::to_string(cfg.vocab_size));
    }
    const std::size_t pos = n % tokens.length;
    for (std::size_t j = 0; j < d; ++j) x(n, j) = w.token_embedding(id, j) + w.position_embedding(pos, j);
  }

  c.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& L = w.layers[l];
    LayerCache& lc = c.layers[l];
    lc.x_in = x;
    lc.h_attn = rms_norm(x, L.attn_norm, cfg.norm_eps, lc.attn_inv_rms);
    lc.q = matmul_bt(lc.h_attn, L.wq);
    lc.k = matmul_bt(lc.h_attn, L.wk);
    lc.v = matmul_bt(lc.h_attn, L.wv);
    lc.ctx = causal_attention(lc.q, lc.k, lc.v, tokens.batch, tokens.length, cfg.n_heads, lc.probs);
    add_inplace(x, matmul_bt(lc.ctx, L.wo));
    lc.x_mid = x;
    Tensor2D h_ffn = rms_norm(x, L.ffn_norm, cfg.norm_eps, lc.ffn_inv_rms);
    add_inplace(x, ffn_forward(h_ffn, L.ffn, layer_keep(mask, l), &lc.ffn));
  }
  c.x_final = x;
  c.h_final = rms_norm(x, w.final_norm, cfg.norm_eps, c.final_inv_rms);
  c.logits = matmul_bt(c.h_final, w.token_embedding);
  return c;
}

/// Backpropagates d(loss)/d(logits) through the cached forward pass.
inline ModelWeights model_backward(const ModelConfig& cfg, const ModelWeights& w, const ForwardCache& c,
                                   const Tensor2D& d_logits, const NeuronMask* mask = nullptr) {
  if (d_logits.rows != c.logits.rows || d_logits.cols != c.logits.cols) {
    throw DimensionError("model_backward: d_logits " + d_logits.shape_string() + " vs logits " +
                         c.logits.shape_string());
  }
  ModelWeights g = zeros_like(w);
  g.token_embedding = matmul_at(d_logits, c.h_final);
  Tensor2D dx = rms_norm_backward(matmul(d_logits, w.token_embedding), c.x_final, w.final_norm, c.final_inv_rms,
                                  g.final_norm);

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const LayerWeights& L = w.layers[l];
    const LayerCache& lc = c.layers[l];
    LayerWeights& G = g.layers[l];

    FfnGrads fg = ffn_backward(dx, lc.ffn, L.ffn, layer_keep(mask, l));
    G.ffn.up = std::move(fg.up);
    G.ffn.gate = std::move(fg.gate);
    G.ffn.down = std::move(fg.down);
    add_inplace(dx, rms_norm_backward(fg.input, lc.x_mid, L.ffn_norm, lc.ffn_inv_rms, G.ffn_norm));

    G.wo = matmul_at(dx, lc.ctx);
    Tensor2D d_ctx = matmul(dx, L.wo);
    Tensor2D dq, dk, dv;
    causal_attention_backward(d_ctx, lc.q, lc.k, lc.v, lc.probs, c.batch, c.length, cfg.n_heads, dq, dk, dv);
    G.wq = matmul_at(dq, lc.h_attn);
    G.wk = matmul_at(dk, lc.h_attn);
    G.wv = matmul_at(dv, lc.h_attn);
    Tensor2D dh = matmul(dq, L.wq);
    add_inplace(dh, matmul(dk, L.wk));
    add_inplace(dh, matmul(dv, L.wv));
    add_inplace(dx, rms_norm_backward(dh, lc.x_in, L.attn_norm, lc.attn_inv_rms, G.attn_norm));
  }

  const std::size_t d = cfg.d_model;
  for (std::size_t n = 0; n < dx.rows; ++n) {
    const auto id = static_cast<std::size_t>(c.inputs[n]);
    const std::size_t pos = n % c.length;
    for (std::size_t j = 0; j < d; ++j) {
      g.token_embedding(id, j) += dx(n, j);
      g.position_embedding(pos, j) += dx(n, j);
    }
  }
  return g;
}

struct LossResult {
  double loss = 0.0;
  Tensor2D d_logits;
};

/// Mean next-token cross-entropy and its gradient w.r.t. the logits.
inline LossResult cross_entropy(const Tensor2D& logits, const std::vector<std::int32_t>& targets) {
  if (targets.size() != logits.rows) throw DimensionError("cross_entropy: target count mismatch");
  LossResult r;
  r.d_logits = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows);
  double total = 0.0;
  for (std::size_t n = 0; n < logits.rows; ++n) {
    const std::int32_t t = targets[n];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols) {
      throw DimensionError("cross_entropy: target id " + std::to_string(t) + " out of range");
    }
    total += log_sum_exp(logits.row(n)) - logits(n, t);
    auto row = r.d_logits.row(n);
    row[t] -= 1.0;
    for (double& v : row) v *= inv_n;
  }
  r.loss = total * inv_n;
  return r;
}

/// Mean cross-entropy loss only (no backward).
inline double model_loss(const ModelConfig& cfg, const ModelWeights& w, const Batch& b,
                         const NeuronMask* mask = nullptr) {
  const ForwardCache c = model_forward(cfg, w, b, mask);
  double total = 0.0;
  for (std::size_t n = 0; n < c.logits.rows; ++n) total += log_sum_exp(c.logits.row(n)) - c.logits(n, b.targets[n]);
  return total / static_cast<double>(c.logits.rows);
}

struct LossAndGrads {
  double loss = 0.0;
  ModelWeights grads;
};

inline LossAndGrads loss_and_grads(const ModelConfig& cfg, const ModelWeights& w, const Batch& b,
                                   const NeuronMask* mask = nullptr) {
  const ForwardCache c = model_forward(cfg, w, b, mask);
  LossResult ce = cross_entropy(c.logits, b.targets);
  return {ce.loss, model_backward(cfg, w, c, ce.d_logits, mask)};
}

}  // namespace ideaprune
