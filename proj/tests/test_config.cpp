#include <gtest/gtest.h>

#include "ideaprune/config.hpp"

using namespace ideaprune;

namespace {

RunConfig desk_integrated() {
  return parse_config(R"(
[run]
mode = integrated
seed = 3

[model]
ffn_hidden = 1024
target_ffn_hidden = 384

[stages]
pretrain = 400
prune = 300
recover = 300
)");
}

}  // namespace

TEST(Config, DefaultsValidate) {
  EXPECT_NO_THROW(RunConfig{}.validate());
  EXPECT_NO_THROW(desk_integrated().validate());
}

TEST(Config, DerivedSparsityFromTargetWidth) {
  const RunConfig c = desk_integrated();
  EXPECT_EQ(c.seed, 3u);
  EXPECT_DOUBLE_EQ(c.target_sparsity(), 0.625);
  const SparsitySpec s = c.sparsity_spec();
  EXPECT_EQ(s.warmup, 0);
  EXPECT_EQ(s.steps, 300);
  EXPECT_EQ(c.global_cosine().total, 1000);
  EXPECT_EQ(c.effective_eval_every(), 20);

  RunConfig naive = c;
  naive.mode = RunMode::naive;
  naive.stage_warmup[1] = 25;
  EXPECT_EQ(naive.sparsity_spec().warmup, 25);
  EXPECT_EQ(naive.sparsity_spec().steps, 275);

  RunConfig osrp = c;
  osrp.method = PruneMethod::osrp;
  EXPECT_EQ(osrp.sparsity_spec().steps, 1);
}

TEST(Config, InconsistentTargetRejected) {
  RunConfig c = desk_integrated();
  apply_override(c, "sparsity.target=0.5");
  EXPECT_THROW(c.validate(), ConfigError);
  apply_override(c, "sparsity.target=0.625");
  EXPECT_NO_THROW(c.validate());
  apply_override(c, "sparsity.steps=301");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(parse_config("[run]\nmood = integrated\n"), ConfigError);
  EXPECT_THROW(parse_config("[nosuch]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nmode = sideways\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nd_model = 12x\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nd_model = -4\n"), ConfigError);
  EXPECT_THROW(parse_config("[schedule]\neta_p = nan\n"), ConfigError);
  EXPECT_THROW(parse_config("[kd]\nenabled = perhaps\n"), ConfigError);
  EXPECT_THROW(parse_config("[run\n"), ConfigError);
  RunConfig c;
  EXPECT_THROW(apply_override(c, "no_equals_sign"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.batch=4"), ConfigError);
}

TEST(Config, OverrideReachesCanonicalEcho) {
  RunConfig c = desk_integrated();
  apply_override(c, "schedule.eta_p = 0.02");
  EXPECT_EQ(c.eta_p, 0.02);
  EXPECT_NE(canonical_text(c).find("eta_p=0.02\n"), std::string::npos);
  EXPECT_EQ(config_value(c, "schedule.eta_p"), "0.02");
  EXPECT_EQ(config_value(c, "sparsity.target"), "auto");
}

TEST(Config, CanonicalTextRoundTrips) {
  RunConfig c = desk_integrated();
  apply_override(c, "schedule.eta_e=3.3333333333333335e-05");
  apply_override(c, "kd.teacher=runs/teacher dir/final.ckpt");
  apply_override(c, "importance.f1=max");
  const std::string text = canonical_text(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(canonical_text(back), text);
  EXPECT_EQ(back.eta_e, c.eta_e);
  EXPECT_EQ(back.kd_teacher, "runs/teacher dir/final.ckpt");
  EXPECT_EQ(back.combine.row, Reduce::max);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, HashIsGitBlobSha1) {
  RunConfig c;
  const std::string h = config_hash(c);
  EXPECT_EQ(h.size(), 40u);
  apply_override(c, "run.seed=1");
  EXPECT_NE(config_hash(c), h);
  // git hash-object of the empty blob, as a check on the framing.
  EXPECT_EQ(detail::git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Config, ModeSpecificRequirements) {
  RunConfig c = desk_integrated();
  c.mode = RunMode::resume_ablation;
  EXPECT_THROW(c.validate(), ConfigError);
  c.init_checkpoint = "ckpt";
  EXPECT_NO_THROW(c.validate());
  c.kd_enabled = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c.kd_teacher = "teacher";
  EXPECT_NO_THROW(c.validate());
  c.source = DataSource::corpus;
  EXPECT_THROW(c.validate(), ConfigError);

  RunConfig scratch;
  scratch.mode = RunMode::from_scratch;
  scratch.stages = {0, 0, 50};
  EXPECT_NO_THROW(scratch.validate());
}
