#pragma once

// Learning-rate schedules (cosine with linear warmup, the three-stage naive
// pipeline, the single-cosine integrated pipeline, resumed/restarted variants)
// and the cubic sparsity ramp used by iterative pruning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "ideaprune/error.hpp"

namespace ideaprune {

/// How the cosine phase is normalized. `normalized` uses (t - T0) / (T - T0)
/// so lr(T) == end exactly; `as_printed` uses (t - T0) / T.
enum class CosineDenominator { normalized, as_printed };

struct CosineSpec {
  std::int64_t total = 1;   // T
  std::int64_t warmup = 0;  // T0
  double peak = 0.01;
  double end = 5e-5;
  CosineDenominator denominator = CosineDenominator::normalized;

  void validate() const {
    if (!(warmup >= 0 && warmup < total)) {
      throw ConfigError("cosine schedule: need 0 <= warmup (" + std::to_string(warmup) + ") < total (" +
                        std::to_string(total) + ")");
    }
    if (!(peak >= end && end >= 0.0)) throw ConfigError("cosine schedule: need peak >= end >= 0");
  }

  bool operator==(const CosineSpec&) const = default;
};

inline double cosine_lr(std::int64_t t, const CosineSpec& s) {
  if (t < 1 || t > s.total) {
    throw InternalError("cosine_lr: step " + std::to_string(t) + " outside [1, " + std::to_string(s.total) + "]");
  }
  if (t <= s.warmup) return static_cast<double>(t) / static_cast<double>(s.warmup) * s.peak;
  const double c1 = 0.5 * (s.peak - s.end);
  const double c2 = 0.5 * (s.peak + s.end);
  const double denom = s.denominator == CosineDenominator::normalized ? static_cast<double>(s.total - s.warmup)
                                                                      : static_cast<double>(s.total);
  const std::int64_t elapsed = t - s.warmup;
  if (s.denominator == CosineDenominator::normalized && elapsed == s.total - s.warmup) return s.end;
  return c1 * std::cos(static_cast<double>(elapsed) / denom * std::numbers::pi) + c2;
}

struct NaiveScheduleSpec {
  CosineSpec pretrain;  // length T_l, peak/end eta1/eta2
  CosineSpec prune;     // length T_p, eta3/eta4
  CosineSpec recover;   // length T_r, eta5/eta6

  std::int64_t total() const { return pretrain.total + prune.total + recover.total; }

  void validate() const {
    pretrain.validate();
    prune.validate();
    recover.validate();
  }
};

inline double naive_pipeline_lr(std::int64_t t, const NaiveScheduleSpec& s) {
  if (t < 1 || t > s.total()) throw InternalError("naive_pipeline_lr: step " + std::to_string(t) + " out of range");
  if (t <= s.pretrain.total) return cosine_lr(t, s.pretrain);
  t -= s.pretrain.total;
  if (t <= s.prune.total) return cosine_lr(t, s.prune);
  return cosine_lr(t - s.prune.total, s.recover);
}

/// Stage lengths of an enlarge-and-prune run.
struct StageLengths {
  std::int64_t pretrain = 0;  // T_l
  std::int64_t prune = 0;     // T_p
  std::int64_t recover = 0;   // T_r

  std::int64_t total() const { return pretrain + prune + recover; }
  bool operator==(const StageLengths&) const = default;
};

/// One cosine over the whole run; `global.total` is ignored in favour of the stage sum.
inline double integrated_lr(std::int64_t t, const StageLengths& stages, CosineSpec global) {
  global.total = stages.total();
  return cosine_lr(t, global);
}

/// Post-checkpoint step t continuing the global cosine from offset T_l.
inline double resumed_lr(std::int64_t t, const StageLengths& stages, const CosineSpec& global) {
  if (t < 1 || t > stages.prune + stages.recover) {
    throw InternalError("resumed_lr: step " + std::to_string(t) + " out of range");
  }
  return integrated_lr(t + stages.pretrain, stages, global);
}

/// Post-checkpoint step t of a fresh warmup + cosine of length T_p + T_r.
inline double restarted_lr(std::int64_t t, const StageLengths& stages, CosineSpec fresh) {
  fresh.total = stages.prune + stages.recover;
  return cosine_lr(t, fresh);
}

struct SparsitySpec {
  double target = 0.0;          // R in [0, 1)
  std::int64_t warmup = 0;      // T_w
  std::int64_t steps = 1;       // T_p

  std::int64_t end() const { return warmup + steps; }

  void validate() const {
    if (!(target >= 0.0 && target < 1.0)) throw ConfigError("sparsity: target must lie in [0, 1)");
    if (warmup < 0) throw ConfigError("sparsity: warmup must be >= 0");
    if (steps < 1) throw ConfigError("sparsity: steps must be >= 1");
  }

  bool operator==(const SparsitySpec&) const = default;
};

/// Cubic ramp from 0 (t <= T_w) to R (t >= T_w + T_p):
///   s(t) = R * (1 - (1 - (t - T_w) / T_p)^3)
inline double sparsity_at(std::int64_t t, const SparsitySpec& s) {
  if (t <= s.warmup) return 0.0;
  if (t >= s.end()) return s.target;
  const double frac = 1.0 - static_cast<double>(t - s.warmup) / static_cast<double>(s.steps);
  return s.target * (1.0 - frac * frac * frac);
}

/// ceil(x) that ignores representation noise just above an integer.
inline std::size_t ceil_count(double x) {
  const double r = std::round(x);
  if (std::abs(x - r) <= 1e-9 * std::max(1.0, std::abs(x))) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(x));
}

/// Neurons kept at sparsity `s` out of `hidden`; ceil so sparsity never overshoots.
inline std::size_t retained_for_sparsity(double s, std::size_t hidden) {
  return ceil_count((1.0 - s) * static_cast<double>(hidden));
}

inline std::size_t retained_count(std::int64_t t, std::size_t hidden, const SparsitySpec& s) {
  const std::size_t floor_count = retained_for_sparsity(s.target, hidden);
  return std::max(retained_for_sparsity(sparsity_at(t, s), hidden), floor_count);
}

}  // namespace ideaprune
