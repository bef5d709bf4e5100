#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ideaprune/schedule.hpp"

using namespace ideaprune;

namespace {

// Hand-rolled reference, written against the formula rather than the library.
double reference_cosine(std::int64_t t, std::int64_t T, std::int64_t T0, double peak, double end) {
  if (t <= T0) return peak * double(t) / double(T0);
  const double x = double(t - T0) / double(T - T0);
  return 0.5 * (peak - end) * std::cos(std::numbers::pi * x) + 0.5 * (peak + end);
}

NaiveScheduleSpec tiny_naive() {
  return {{20, 4, 0.01, 1e-3}, {10, 3, 0.006, 5e-4}, {15, 5, 0.004, 5e-5}};
}

}  // namespace

TEST(Cosine, Endpoints) {
  const CosineSpec s{1000, 50, 0.01, 5e-5};
  EXPECT_EQ(cosine_lr(50, s), 0.01);
  EXPECT_EQ(cosine_lr(1000, s), 5e-5);
  EXPECT_DOUBLE_EQ(cosine_lr(50 + 475, s), 0.5 * (0.01 + 5e-5));
  EXPECT_DOUBLE_EQ(cosine_lr(1, s), 0.01 / 50.0);
}

TEST(Cosine, MatchesReferencePointwise) {
  const CosineSpec s{300, 17, 0.02, 1e-4};
  for (std::int64_t t = 1; t <= 300; ++t) EXPECT_NEAR(cosine_lr(t, s), reference_cosine(t, 300, 17, 0.02, 1e-4), 1e-17);
}

TEST(Cosine, NoWarmupStartsNearPeak) {
  const CosineSpec s{100, 0, 0.01, 0.0};
  EXPECT_NEAR(cosine_lr(1, s), 0.005 * (1.0 + std::cos(std::numbers::pi / 100.0)), 1e-18);
  EXPECT_EQ(cosine_lr(100, s), 0.0);
}

TEST(Cosine, AsPrintedDenominatorMissesEndValue) {
  CosineSpec s{1000, 100, 0.01, 5e-5, CosineDenominator::as_printed};
  const double expect = 0.5 * (0.01 - 5e-5) * std::cos(std::numbers::pi * 900.0 / 1000.0) + 0.5 * (0.01 + 5e-5);
  EXPECT_DOUBLE_EQ(cosine_lr(1000, s), expect);
  EXPECT_GT(cosine_lr(1000, s), 5e-5);
}

TEST(Cosine, MonotoneAndSmoothAfterWarmup) {
  const CosineSpec s{500, 25, 0.01, 5e-5};
  const double bound = std::numbers::pi * (0.01 - 5e-5) / (2.0 * (500 - 25)) + 1e-15;
  for (std::int64_t t = 25; t < 500; ++t) {
    const double a = cosine_lr(t, s), b = cosine_lr(t + 1, s);
    EXPECT_LE(b, a);
    EXPECT_LE(a - b, bound);
  }
  for (std::int64_t t = 1; t < 25; ++t) EXPECT_NEAR(cosine_lr(t + 1, s) - cosine_lr(t, s), 0.01 / 25.0, 1e-17);
}

TEST(Cosine, RangeAndSpecErrors) {
  const CosineSpec s{10, 2, 0.01, 0.0};
  EXPECT_THROW(cosine_lr(0, s), InternalError);
  EXPECT_THROW(cosine_lr(11, s), InternalError);
  EXPECT_THROW((CosineSpec{10, 10, 0.01, 0.0}.validate()), ConfigError);
  EXPECT_THROW((CosineSpec{10, 1, 0.001, 0.01}.validate()), ConfigError);
  EXPECT_THROW((CosineSpec{10, 1, 0.01, -1.0}.validate()), ConfigError);
  EXPECT_NO_THROW((CosineSpec{10, 0, 0.01, 0.01}.validate()));
}

TEST(Naive, StageEndpointsAndRestartPeaks) {
  const auto s = tiny_naive();
  EXPECT_EQ(naive_pipeline_lr(20, s), 1e-3);
  EXPECT_EQ(naive_pipeline_lr(20 + 3, s), 0.006);
  EXPECT_EQ(naive_pipeline_lr(30, s), 5e-4);
  EXPECT_EQ(naive_pipeline_lr(30 + 5, s), 0.004);
  EXPECT_EQ(naive_pipeline_lr(45, s), 5e-5);
  EXPECT_THROW(naive_pipeline_lr(46, s), InternalError);
  EXPECT_THROW(naive_pipeline_lr(0, s), InternalError);
}

TEST(Naive, MatchesPiecewiseReference) {
  const auto s = tiny_naive();
  for (std::int64_t t = 1; t <= 45; ++t) {
    double ref;
    if (t <= 20) {
      ref = reference_cosine(t, 20, 4, 0.01, 1e-3);
    } else if (t <= 30) {
      ref = reference_cosine(t - 20, 10, 3, 0.006, 5e-4);
    } else {
      ref = reference_cosine(t - 30, 15, 5, 0.004, 5e-5);
    }
    EXPECT_NEAR(naive_pipeline_lr(t, s), ref, 1e-17) << t;
  }
}

TEST(Naive, ExactlyTwoInteriorRisingEpisodes) {
  const auto s = tiny_naive();
  int episodes = 0;
  bool rising = false;
  for (std::int64_t t = s.pretrain.warmup; t < s.total(); ++t) {
    const bool up = naive_pipeline_lr(t + 1, s) > naive_pipeline_lr(t, s);
    if (up && !rising) ++episodes;
    rising = up;
  }
  EXPECT_EQ(episodes, 2);
}

TEST(Integrated, SingleCosineWithoutSpikes) {
  const StageLengths st{300, 200, 500};
  const CosineSpec g{0, 20, 0.01, 5e-5};
  const CosineSpec plain{1000, 20, 0.01, 5e-5};
  for (std::int64_t t = 1; t <= 1000; ++t) EXPECT_EQ(integrated_lr(t, st, g), cosine_lr(t, plain));
  EXPECT_EQ(integrated_lr(1000, st, g), 5e-5);
  EXPECT_EQ(integrated_lr(20, st, g), 0.01);
  double max_jump = 0.0;
  for (std::int64_t t = 20; t < 1000; ++t) {
    EXPECT_LE(integrated_lr(t + 1, st, g), integrated_lr(t, st, g));
    max_jump = std::max(max_jump, std::abs(integrated_lr(t + 1, st, g) - integrated_lr(t, st, g)));
  }
  EXPECT_LE(max_jump, 0.01 * std::numbers::pi / (2.0 * 980.0));
}

TEST(ResumedRestarted, ResumedIsIntegratedTail) {
  const StageLengths st{300, 200, 500};
  const CosineSpec g{0, 20, 0.01, 5e-5};
  for (std::int64_t t = 1; t <= 700; ++t) EXPECT_EQ(resumed_lr(t, st, g), integrated_lr(t + 300, st, g));
  EXPECT_THROW(resumed_lr(701, st, g), InternalError);
  EXPECT_THROW(resumed_lr(0, st, g), InternalError);
}

TEST(ResumedRestarted, RestartedIsFreshCosine) {
  const StageLengths st{300, 200, 500};
  const CosineSpec fresh{0, 20, 0.01, 5e-5};
  for (std::int64_t t = 1; t <= 700; ++t) {
    EXPECT_NEAR(restarted_lr(t, st, fresh), reference_cosine(t, 700, 20, 0.01, 5e-5), 1e-17);
  }
  for (std::int64_t warm : {2, 5, 50}) {
    const CosineSpec f{0, warm, 0.01, 5e-5};
    EXPECT_GT(resumed_lr(1, st, {0, 20, 0.01, 5e-5}), restarted_lr(1, st, f));
  }
  // The restart has a rising ramp; the resumed tail never rises.
  EXPECT_GT(restarted_lr(2, st, fresh), restarted_lr(1, st, fresh));
  for (std::int64_t t = 1; t < 700; ++t) EXPECT_LE(resumed_lr(t + 1, st, {0, 20, 0.01, 5e-5}), resumed_lr(t, st, {0, 20, 0.01, 5e-5}));
}

TEST(Sparsity, EndpointsAndMidpoint) {
  const SparsitySpec s{0.625, 10, 80};
  EXPECT_EQ(sparsity_at(10, s), 0.0);
  EXPECT_EQ(sparsity_at(1, s), 0.0);
  EXPECT_EQ(sparsity_at(90, s), 0.625);
  EXPECT_EQ(sparsity_at(1000, s), 0.625);
  EXPECT_DOUBLE_EQ(sparsity_at(50, s), 0.875 * 0.625);
  EXPECT_EQ(retained_count(10, 1024, s), 1024u);
  EXPECT_EQ(retained_count(90, 1024, s), 384u);
}

TEST(Sparsity, MatchesCubicFormula) {
  const SparsitySpec s{0.4, 3, 17};
  for (std::int64_t t = 4; t < 20; ++t) {
    const double f = 1.0 - double(t - 3) / 17.0;
    EXPECT_NEAR(sparsity_at(t, s), 0.4 * (1.0 - f * f * f), 1e-16);
    EXPECT_EQ(retained_count(t, 100, s), std::size_t(std::ceil((1.0 - sparsity_at(t, s)) * 100.0 - 1e-9)));
  }
}

TEST(Sparsity, MonotoneAndFloored) {
  for (double R : {0.0, 0.1, 0.5, 0.625, 0.9, 0.99}) {
    for (std::size_t h : {1u, 7u, 32u, 100u, 1024u}) {
      const SparsitySpec s{R, 5, 40};
      const std::size_t floor_count = static_cast<std::size_t>(std::ceil((1.0 - R) * double(h) - 1e-9));
      std::size_t prev = h;
      double prev_s = 0.0;
      for (std::int64_t t = 1; t <= 60; ++t) {
        const double sp = sparsity_at(t, s);
        const std::size_t r = retained_count(t, h, s);
        EXPECT_GE(sp, prev_s);
        EXPECT_LE(r, prev);
        EXPECT_GE(r, floor_count);
        prev = r;
        prev_s = sp;
      }
      EXPECT_EQ(prev, floor_count);
    }
  }
}

TEST(Sparsity, CeilIgnoresRepresentationNoise) {
  // (1 - 0.625) * 1024 is exactly 384; (1 - 0.7) * 10 lands just above 3.
  EXPECT_EQ(retained_for_sparsity(0.625, 1024), 384u);
  EXPECT_EQ(retained_for_sparsity(0.7, 10), 3u);
  EXPECT_EQ(retained_for_sparsity(0.69, 10), 4u);
  EXPECT_EQ(retained_for_sparsity(0.0, 10), 10u);
  EXPECT_THROW((SparsitySpec{1.0, 0, 1}.validate()), ConfigError);
  EXPECT_THROW((SparsitySpec{0.5, 0, 0}.validate()), ConfigError);
  EXPECT_THROW((SparsitySpec{0.5, -1, 3}.validate()), ConfigError);
}
