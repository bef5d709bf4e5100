#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "ideaprune/prune.hpp"
#include "support.hpp"

using namespace ideaprune;
using ideaprune::testing::random_batch;
using ideaprune::testing::tiny_config;

namespace {

Tensor2D random_abs(std::size_t r, std::size_t c, Rng& rng) {
  Tensor2D t(r, c);
  for (double& x : t.values) x = std::abs(rng.normal());
  return t;
}

// Full stable sort by (score desc, index asc); the first `retain` survive.
std::vector<std::uint8_t> sort_oracle(const std::vector<double>& scores, std::size_t retain) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::uint8_t> keep(scores.size(), 0);
  for (std::size_t i = 0; i < retain; ++i) keep[idx[i]] = 1;
  return keep;
}

}  // namespace

TEST(Sensitivity, LambdaZeroIsInstantaneous) {
  const auto cfg = tiny_config();
  Rng rng(1);
  const auto w = init_weights(cfg, rng);
  auto g = zeros_like(w);
  for (auto& L : g.layers)
    for (Tensor2D* t : {&L.ffn.up, &L.ffn.gate, &L.ffn.down})
      for (double& x : t->values) x = rng.normal();
  auto state = ImportanceState::zeros_like(w, 0.0);
  for (double& x : state.scores[0].up.values) x = 99.0;
  update_sensitivity(state, w, g);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t i = 0; i < w.layers[l].ffn.down.values.size(); ++i) {
      EXPECT_EQ(state.scores[l].down.values[i], std::abs(g.layers[l].ffn.down.values[i] * w.layers[l].ffn.down.values[i]));
    }
    for (std::size_t i = 0; i < w.layers[l].ffn.up.values.size(); ++i) {
      EXPECT_EQ(state.scores[l].up.values[i], std::abs(g.layers[l].ffn.up.values[i] * w.layers[l].ffn.up.values[i]));
    }
  }
}

TEST(Sensitivity, HalfLambdaAveragesWithHistory) {
  FfnWeights w{Tensor2D(1, 1), Tensor2D(1, 1), Tensor2D(1, 1)};
  FfnWeights g = w;
  w.up.values[0] = 2.0;
  g.up.values[0] = -2.0;  // T = |(-2)(2)| = 4
  ImportanceState s;
  s.lambda = 0.5;
  s.scores.push_back({Tensor2D(1, 1), Tensor2D(1, 1), Tensor2D(1, 1)});
  update_sensitivity(s, std::span<const FfnWeights>(&w, 1), std::span<const FfnWeights>(&g, 1));
  EXPECT_EQ(s.scores[0].up.values[0], 2.0);
  update_sensitivity(s, std::span<const FfnWeights>(&w, 1), std::span<const FfnWeights>(&g, 1));
  EXPECT_EQ(s.scores[0].up.values[0], 3.0);
}

TEST(Sensitivity, ZeroWeightHasZeroScoreAndScoresStayNonNegative) {
  const auto cfg = tiny_config();
  Rng rng(2);
  auto w = init_weights(cfg, rng);
  w.layers[0].ffn.gate.values[5] = 0.0;
  auto state = ImportanceState::zeros_like(w, 0.0);
  for (int step = 0; step < 3; ++step) {
    auto g = zeros_like(w);
    for (auto& L : g.layers)
      for (Tensor2D* t : {&L.ffn.up, &L.ffn.gate, &L.ffn.down})
        for (double& x : t->values) x = 1e3 * rng.normal();
    update_sensitivity(state, w, g);
    EXPECT_EQ(state.scores[0].gate.values[5], 0.0);
    for (const auto& s : state.scores)
      for (const Tensor2D* t : {&s.up, &s.gate, &s.down})
        for (double x : t->values) EXPECT_GE(x, 0.0);
  }
}

TEST(Sensitivity, ShapeMismatchRejected) {
  const auto cfg = tiny_config();
  Rng rng(3);
  const auto w = init_weights(cfg, rng);
  auto state = ImportanceState::zeros_like(w);
  auto g = zeros_like(w);
  g.layers[1].ffn.down = Tensor2D(2, 2);
  EXPECT_THROW(update_sensitivity(state, w, g), DimensionError);
}

TEST(Combine, MeanMaxPicksLargestRowMean) {
  FfnScores s{Tensor2D::from_rows({{1.0, 1.0}, {0.0, 0.0}}), Tensor2D::from_rows({{1.0, 3.0}, {0.0, 0.0}}),
              Tensor2D::from_rows({{2.0, 4.0}, {0.0, 0.0}})};
  const Tensor1D c = combine_neuron_scores(s, {Reduce::mean, Reduce::max});
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 0.0);
}

TEST(Combine, MaxMeanMatchesLoopOracle) {
  Rng rng(4);
  const std::size_t h = 37, d = 11;
  FfnScores s{random_abs(h, d, rng), random_abs(h, d, rng), random_abs(h, d, rng)};
  for (auto spec : {CombineSpec{Reduce::max, Reduce::mean}, CombineSpec{Reduce::mean, Reduce::mean},
                    CombineSpec{Reduce::max, Reduce::max}, CombineSpec{Reduce::mean, Reduce::max}}) {
    const Tensor1D c = combine_neuron_scores(s, spec);
    for (std::size_t k = 0; k < h; ++k) {
      double r[3];
      int m = 0;
      for (const Tensor2D* t : {&s.up, &s.gate, &s.down}) {
        double acc = spec.row == Reduce::max ? -1.0 : 0.0;
        for (std::size_t j = 0; j < d; ++j) acc = spec.row == Reduce::max ? std::max(acc, (*t)(k, j)) : acc + (*t)(k, j);
        r[m++] = spec.row == Reduce::max ? acc : acc / double(d);
      }
      const double expect = spec.across == Reduce::max ? std::max({r[0], r[1], r[2]}) : (r[0] + r[1] + r[2]) / 3.0;
      EXPECT_DOUBLE_EQ(c[k], expect);
    }
  }
}

TEST(Combine, ZeroStateGivesZeroScoresAndMismatchRejected) {
  FfnScores s{Tensor2D(4, 3), Tensor2D(4, 3), Tensor2D(4, 3)};
  const Tensor1D c = combine_neuron_scores(s, {});
  for (double x : c.values) EXPECT_EQ(x, 0.0);
  s.gate = Tensor2D(5, 3);
  EXPECT_THROW(combine_neuron_scores(s, {}), DimensionError);
  EXPECT_EQ(parse_reduce("max"), Reduce::max);
  EXPECT_THROW(parse_reduce("median"), ConfigError);
}

TEST(SelectMask, TopTwoOfFour) {
  NeuronMask m = NeuronMask::all_ones(1, 4);
  const std::vector<double> scores = {0.1, 0.9, 0.5, 0.2};
  select_mask(scores, 2, m, 0);
  EXPECT_EQ(m.keep[0], (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_EQ(m.committed[0], (std::vector<std::size_t>{0, 3}));
}

TEST(SelectMask, RetainAllIsIdentity) {
  NeuronMask m = NeuronMask::all_ones(1, 6);
  select_mask(std::vector<double>{3, 1, 4, 1, 5, 9}, 6, m, 0);
  EXPECT_TRUE(m.is_all_ones());
  EXPECT_TRUE(m.committed[0].empty());
}

TEST(SelectMask, TiesGoToLowerIndex) {
  NeuronMask m = NeuronMask::all_ones(1, 6);
  select_mask(std::vector<double>{1, 2, 2, 2, 0, 2}, 3, m, 0);
  EXPECT_EQ(m.keep[0], (std::vector<std::uint8_t>{0, 1, 1, 1, 0, 0}));
}

TEST(SelectMask, MatchesSortOracleOnThousandVectors) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(512);
    std::vector<double> scores(h);
    // Every third vector draws from a handful of values so ties are common.
    const bool tied = trial % 3 == 0;
    for (double& s : scores) s = tied ? double(rng.below(4)) : rng.uniform();
    const std::size_t retain = rng.below(h + 1);
    NeuronMask m = NeuronMask::all_ones(1, h);
    select_mask(scores, retain, m, 0);
    ASSERT_EQ(m.keep[0], sort_oracle(scores, retain)) << "trial " << trial;
    ASSERT_EQ(m.retained(0), retain);
  }
}

TEST(SelectMask, ScaleInvariance) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(64);
    for (double& s : scores) s = rng.uniform();
    NeuronMask a = NeuronMask::all_ones(1, 64), b = a;
    select_mask(scores, 20, a, 0);
    const double k = 1e-3 + 1e3 * rng.uniform();
    for (double& s : scores) s *= k;
    select_mask(scores, 20, b, 0);
    EXPECT_EQ(a, b);
  }
}

TEST(SelectMask, CommitmentIsMonotoneUnderSchedule) {
  Rng rng(7);
  const std::size_t h = 96;
  const SparsitySpec spec{0.625, 0, 40};
  NeuronMask m = NeuronMask::all_ones(1, h);
  std::vector<std::size_t> prev_committed;
  std::size_t prev_retained = h;
  for (std::int64_t t = 1; t <= 45; ++t) {
    std::vector<double> scores(h);
    for (double& s : scores) s = rng.uniform();
    select_mask(scores, t, spec, m, 0);
    EXPECT_EQ(m.retained(0), retained_count(t, h, spec));
    EXPECT_LE(m.retained(0), prev_retained);
    EXPECT_TRUE(std::includes(m.committed[0].begin(), m.committed[0].end(), prev_committed.begin(), prev_committed.end()));
    for (auto i : m.committed[0]) EXPECT_EQ(m.keep[0][i], 0);
    prev_committed = m.committed[0];
    prev_retained = m.retained(0);
  }
  EXPECT_EQ(m.retained(0), 36u);
}

TEST(SelectMask, Errors) {
  NeuronMask m = NeuronMask::all_ones(1, 4);
  select_mask(std::vector<double>{1, 2, 3, 4}, 2, m, 0);
  EXPECT_THROW(select_mask(std::vector<double>{1, 2, 3, 4}, 3, m, 0), InternalError);
  EXPECT_THROW(select_mask(std::vector<double>{1, 2, 3}, 1, m, 0), DimensionError);
}

TEST(ApplyMask, AllOnesUnchangedSingleZeroAndIdempotent) {
  const auto cfg = tiny_config();
  Rng rng(8);
  const auto w0 = init_weights(cfg, rng);
  auto w = w0;
  apply_mask(w, NeuronMask::all_ones(cfg.n_layers, cfg.ffn_hidden));
  EXPECT_EQ(w, w0);

  std::vector<std::uint8_t> keep(cfg.ffn_hidden, 1);
  keep[7] = 0;
  FfnWeights f = w0.layers[0].ffn;
  apply_mask(f, keep);
  for (std::size_t i = 0; i < cfg.ffn_hidden; ++i) {
    for (auto [after, before] : {std::pair{&f.up, &w0.layers[0].ffn.up}, std::pair{&f.gate, &w0.layers[0].ffn.gate},
                                 std::pair{&f.down, &w0.layers[0].ffn.down}}) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ((*after)(i, j), i == 7 ? 0.0 : (*before)(i, j));
    }
  }
  FfnWeights twice = f;
  apply_mask(twice, keep);
  EXPECT_EQ(twice, f);
  EXPECT_THROW(apply_mask(f, std::vector<std::uint8_t>(3, 1)), DimensionError);
}

TEST(Compact, ShapesAndRefusalBeforeScheduleEnd) {
  ModelConfig cfg = tiny_config();
  cfg.ffn_hidden = 8;
  Rng rng(9);
  auto w = init_weights(cfg, rng);
  auto opt = OptimizerState::zeros_like(w);
  auto imp = ImportanceState::zeros_like(w);
  NeuronMask m = NeuronMask::all_ones(cfg.n_layers, 8);
  const SparsitySpec spec{0.5, 2, 5};
  EXPECT_THROW(compact(w, opt, imp, m, 6, spec), InternalError);

  auto same = w;
  auto opt2 = opt;
  auto imp2 = imp;
  NeuronMask ones = m;
  compact(same, opt2, imp2, ones, 7, spec);
  EXPECT_EQ(same, w);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) select_mask(std::vector<double>{1, 8, 2, 7, 3, 6, 4, 5}, 4, m, l);
  compact(w, opt, imp, m, 7, spec);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (const Tensor2D* t : {&w.layers[l].ffn.up, &w.layers[l].ffn.gate, &w.layers[l].ffn.down,
                              &opt.m.layers[l].ffn.up, &opt.v.layers[l].ffn.down, &imp.scores[l].gate}) {
      EXPECT_EQ(t->rows, 4u);
      EXPECT_EQ(t->cols, cfg.d_model);
    }
    EXPECT_EQ(m.keep[l], std::vector<std::uint8_t>(4, 1));
    EXPECT_TRUE(m.committed[l].empty());
  }
}

TEST(Compact, LogitsMatchMaskedModel) {
  const auto cfg = tiny_config();
  Rng rng(10);
  auto w = init_weights(cfg, rng);
  NeuronMask m = NeuronMask::all_ones(cfg.n_layers, cfg.ffn_hidden);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<double> s(cfg.ffn_hidden);
    for (double& x : s) x = rng.uniform();
    select_mask(s, 12, m, l);
  }
  apply_mask(w, m);
  const NeuronMask masked = m;
  auto compacted = w;
  auto opt = OptimizerState::zeros_like(w);
  auto imp = ImportanceState::zeros_like(w);
  compact(compacted, opt, imp, m, 1, SparsitySpec{0.625, 0, 1});
  ModelConfig small = cfg;
  small.ffn_hidden = 12;
  for (int trial = 0; trial < 20; ++trial) {
    const Batch b = random_batch(cfg, 2, cfg.seq_len, rng);
    const auto a = model_forward(cfg, w, b, &masked);
    const auto c = model_forward(small, compacted, b);
    for (std::size_t i = 0; i < a.logits.values.size(); ++i) ASSERT_NEAR(a.logits.values[i], c.logits.values[i], 1e-10);
    EXPECT_NEAR(model_loss(cfg, w, b, &masked), model_loss(small, compacted, b), 1e-10);
  }
}

TEST(RandomOneShot, CountsDeterminismAndZeroTarget) {
  Rng rng(11);
  EXPECT_EQ(random_oneshot_keep(17, 0.0, rng), std::vector<std::uint8_t>(17, 1));
  for (int i = 0; i < 10000; ++i) {
    const std::size_t h = 1 + rng.below(300);
    const double R = 0.99 * rng.uniform();
    const auto keep = random_oneshot_keep(h, R, rng);
    const std::size_t n = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
    ASSERT_EQ(n, retained_for_sparsity(R, h)) << "h=" << h << " R=" << R;
  }
  Rng a(42), b(42);
  EXPECT_EQ(random_oneshot_mask(3, 64, 0.625, a), random_oneshot_mask(3, 64, 0.625, b));
  Rng c(43);
  Rng a2(42);
  EXPECT_NE(random_oneshot_mask(3, 64, 0.625, a2), random_oneshot_mask(3, 64, 0.625, c));
  Rng d(1);
  const auto m = random_oneshot_mask(2, 64, 0.625, d);
  EXPECT_EQ(m.retained(0), 24u);
  EXPECT_EQ(m.committed[1].size(), 40u);
  EXPECT_THROW(random_oneshot_keep(4, 1.0, d), ConfigError);
}

TEST(ActivationImportance, MatchesLoopOracle) {
  const auto cfg = tiny_config();
  Rng rng(12);
  auto w = init_weights(cfg, rng);
  std::fill(w.layers[1].ffn.up.row(3).begin(), w.layers[1].ffn.up.row(3).end(), 0.0);
  const std::vector<Batch> cal = {random_batch(cfg, 3, cfg.seq_len, rng), random_batch(cfg, 2, cfg.seq_len, rng)};
  const auto c = activation_importance(cfg, w, cal);
  ASSERT_EQ(c.size(), cfg.n_layers);
  EXPECT_EQ(c[1][3], 0.0);

  // Oracle: recompute each sample separately and take per-column norms.
  std::vector<std::vector<double>> ref(cfg.n_layers, std::vector<double>(cfg.ffn_hidden, 0.0));
  std::size_t samples = 0;
  for (const auto& b : cal) {
    for (std::size_t s = 0; s < b.batch; ++s) {
      Batch one;
      one.batch = 1;
      one.length = b.length;
      one.inputs.assign(b.inputs.begin() + long(s * b.length), b.inputs.begin() + long((s + 1) * b.length));
      one.targets.assign(b.targets.begin() + long(s * b.length), b.targets.begin() + long((s + 1) * b.length));
      const auto fc = model_forward(cfg, w, one);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const Tensor2D& x = fc.layers[l].ffn.input;
        for (std::size_t i = 0; i < cfg.ffn_hidden; ++i) {
          double ss = 0.0;
          for (std::size_t r = 0; r < b.length; ++r) {
            double u = 0.0, g = 0.0;
            for (std::size_t j = 0; j < cfg.d_model; ++j) {
              u += x(r, j) * w.layers[l].ffn.up(i, j);
              g += x(r, j) * w.layers[l].ffn.gate(i, j);
            }
            const double z = u / (1.0 + std::exp(-u)) * g;
            ss += z * z;
          }
          ref[l][i] += std::sqrt(ss);
        }
      }
      ++samples;
    }
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t i = 0; i < cfg.ffn_hidden; ++i) EXPECT_NEAR(c[l][i], ref[l][i] / double(samples), 1e-12);

  EXPECT_THROW(activation_importance(cfg, w, std::span<const Batch>{}), DataError);
}
