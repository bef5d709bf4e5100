#pragma once

// Distillation loss against a frozen teacher:
//   L = (1 - a) CE(z_s, y) + a tau^2 KL(softmax(z_t / tau) || softmax(z_s / tau))
// averaged over positions. d/dz_s of the KL term is a tau (q_s - p_t) / N.

#include <cmath>
#include <vector>

#include "ideaprune/error.hpp"
#include "ideaprune/tensor.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

struct KdResult {
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;  // mean per-position KL, before the a tau^2 factor
  Tensor2D d_logits;
};

inline KdResult kd_loss(const Tensor2D& student, const Tensor2D& teacher, const std::vector<std::int32_t>& targets,
                        double alpha, double tau) {
  if (student.rows != teacher.rows || student.cols != teacher.cols) {
    throw DimensionError("kd_loss: student " + student.shape_string() + " vs teacher " + teacher.shape_string());
  }
  if (!(alpha >= 0.0 && alpha <= 1.0) || !(tau > 0.0)) throw ConfigError("kd_loss: need alpha in [0,1] and tau > 0");
  LossResult ce = cross_entropy(student, targets);
  KdResult r;
  r.ce = ce.loss;
  r.d_logits = std::move(ce.d_logits);
  for (double& v : r.d_logits.values) v *= 1.0 - alpha;
  if (alpha == 0.0) {
    r.loss = r.ce;
    return r;
  }

  const std::size_t n = student.rows, V = student.cols;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> zs(V), zt(V);
  double kl_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < V; ++j) {
      zs[j] = student(i, j) / tau;
      zt[j] = teacher(i, j) / tau;
    }
    const double lse_s = log_sum_exp(zs);
    const double lse_t = log_sum_exp(zt);
    double kl = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const double log_pt = zt[j] - lse_t;
      const double log_qs = zs[j] - lse_s;
      const double pt = std::exp(log_pt);
      kl += pt * (log_pt - log_qs);
      r.d_logits(i, j) += alpha * tau * (std::exp(log_qs) - pt) * inv_n;
    }
    kl_total += kl;
  }
  r.kl = kl_total * inv_n;
  r.loss = (1.0 - alpha) * r.ce + alpha * tau * tau * r.kl;
  return r;
}

}  // namespace ideaprune
