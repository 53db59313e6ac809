#include <gtest/gtest.h>

#include <cstdlib>
#include <string>

#include "dualstream/config.hpp"

using namespace dualstream;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dualstream_test_config_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path configs_dir() { return fs::path(DUALSTREAM_SOURCE_DIR) / "configs"; }

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (value) ::setenv("DUALSTREAM_CACHE", value, 1);
    else ::unsetenv("DUALSTREAM_CACHE");
  }
  ~EnvGuard() { ::unsetenv("DUALSTREAM_CACHE"); }
};

}  // namespace

TEST(Config, OverridesParseJsonScalars) {
  json cfg = default_config();
  apply_override(cfg, "train.lr=5e-4");
  apply_override(cfg, "train.freeze_rgb_backbone=true");
  apply_override(cfg, "run.head=gated");
  apply_override(cfg, "model.mobilenet.stages=[[1,8,1,1]]");
  apply_override(cfg, "extra.new.key=7");
  EXPECT_EQ(cfg["train"]["lr"], 5e-4);
  EXPECT_EQ(cfg["train"]["freeze_rgb_backbone"], true);
  EXPECT_EQ(cfg["run"]["head"], "gated");
  EXPECT_EQ(cfg["model"]["mobilenet"]["stages"].size(), 1u);
  EXPECT_EQ(cfg["extra"]["new"]["key"], 7);
  EXPECT_THROW(apply_override(cfg, "train.lr"), Error);
  EXPECT_THROW(apply_override(cfg, "=3"), Error);
  EXPECT_THROW(apply_override(cfg, "train..lr=3"), Error);
  EXPECT_THROW(apply_override(cfg, "run.head.x=3"), Error);
}

TEST(Config, FileThenOverridesThenEnvironment) {
  EnvGuard env("/tmp/from_env");
  auto dir = scratch_dir("merge");
  atomic_write(dir / "c.json", std::string(R"({"train": {"lr": 0.002, "batch_size": 4}, "dataset": {"size": 32}})"));
  const json cfg = resolve_config((dir / "c.json").string(), {"train.lr=0.003"});
  EXPECT_EQ(cfg["train"]["lr"], 0.003);
  EXPECT_EQ(cfg["train"]["batch_size"], 4);
  EXPECT_EQ(cfg["train"]["weight_decay"], 1e-4);
  EXPECT_EQ(cfg["dataset"]["size"], 32);
  EXPECT_EQ(cfg["dataset"]["cache_root"], "/tmp/from_env");
  const json explicit_cache = resolve_config("", {"dataset.cache_root=/tmp/given"});
  EXPECT_EQ(explicit_cache["dataset"]["cache_root"], "/tmp/given");
}

TEST(Config, NoEnvironmentLeavesCacheEmpty) {
  EnvGuard env(nullptr);
  EXPECT_EQ(resolve_config("", {})["dataset"]["cache_root"], "");
}

TEST(Config, BadFileIsReported) {
  auto dir = scratch_dir("bad");
  atomic_write(dir / "c.json", std::string("{not json"));
  EXPECT_THROW(resolve_config((dir / "c.json").string(), {}), Error);
}

TEST(Config, DefaultsDescribeThePaperModel) {
  const json cfg = default_config();
  const ModelConfig mc = model_config_from(cfg, 11);
  EXPECT_EQ(mc.vit.image_size, 224u);
  EXPECT_EQ(mc.vit.patch_size, 16u);
  EXPECT_EQ(mc.vit.embed_dim, 192u);
  EXPECT_EQ(mc.vit.depth, 12u);
  EXPECT_EQ(mc.vit.heads, 3u);
  EXPECT_EQ(mc.mobilenet.resolved_final_dim(), 1280u);
  EXPECT_EQ(mc.attention_heads, 4u);
  EXPECT_EQ(mc.head, FusionKind::Weighted);
  const TrainConfig tc = train_config_from(cfg);
  EXPECT_EQ(tc.lr, 1e-4);
  EXPECT_EQ(tc.flow_only_lr, 5e-4);
  EXPECT_EQ(tc.batch_size, 8u);
  EXPECT_EQ(tc.max_epochs, 10u);
  EXPECT_EQ(tc.flow_only_max_epochs, 50u);
  EXPECT_EQ(tc.patience, 5u);
  const FarnebackParams fp = flow_params_from(cfg);
  EXPECT_EQ(fp.pyr_scale, 0.5);
  EXPECT_EQ(fp.levels, 5);
  EXPECT_EQ(fp.winsize, 11);
  EXPECT_EQ(fp.iterations, 5);
  EXPECT_EQ(fp.poly_n, 5);
  EXPECT_EQ(fp.poly_sigma, 1.1);
}

TEST(Config, ShippedPaperConfigInlinesEncoderFiles) {
  EnvGuard env(nullptr);
  const json cfg = resolve_config((configs_dir() / "paper.json").string(), {"model.vit.depth=2"});
  ASSERT_TRUE(cfg["model"]["vit"].is_object());
  ASSERT_TRUE(cfg["model"]["mobilenet"].is_object());
  EXPECT_EQ(cfg["model"]["vit"]["depth"], 2);
  EXPECT_EQ(cfg["model"]["vit"]["embed_dim"], 192);
  EXPECT_EQ(cfg["model"]["mobilenet"]["stages"].size(), 7u);
  const ModelConfig mc = model_config_from(cfg, 11);
  EXPECT_EQ(mc.vit.depth, 2u);
  EXPECT_EQ(mc.mobilenet.resolved_final_dim(), 1280u);
  const ModelConfig defaults = model_config_from(default_config(), 11);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(mc.mobilenet.stages[i].channels, defaults.mobilenet.stages[i].channels);
    EXPECT_EQ(mc.mobilenet.stages[i].stride, defaults.mobilenet.stages[i].stride);
  }
  // resolving the resolved config again changes nothing
  auto dir = scratch_dir("again");
  write_resolved_config(dir, cfg);
  EXPECT_EQ(resolve_config((dir / "resolved_config.json").string(), {}), cfg);
}

TEST(Config, DeskConfigBuildsAValidModel) {
  EnvGuard env(nullptr);
  const json cfg = resolve_config((configs_dir() / "desk.json").string(), {});
  const ModelConfig mc = model_config_from(cfg, 4);
  EXPECT_EQ(mc.vit.image_size, 32u);
  EXPECT_EQ(mc.mobilenet.input_size, 32u);
  EXPECT_NO_THROW(train_config_from(cfg));
  EXPECT_EQ(workers_from(cfg), 1u);
}

TEST(Config, EncoderSizeMustMatchDataset) {
  json cfg = default_config();
  cfg["model"]["vit"]["image_size"] = 112;
  try {
    model_config_from(cfg, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigMismatch);
  }
  cfg = default_config();
  cfg["model"]["mobilenet"]["in_channels"] = 3;
  EXPECT_THROW(model_config_from(cfg, 3), Error);
  cfg = default_config();
  cfg["model"]["mobilenet"]["stages"] = json::parse("[[1, 16, 1]]");
  EXPECT_THROW(model_config_from(cfg, 3), Error);
}

TEST(Config, DeterministicForcesOneWorker) {
  json cfg = default_config();
  cfg["workers"] = 6;
  EXPECT_EQ(workers_from(cfg), 6u);
  cfg["deterministic"] = true;
  EXPECT_EQ(workers_from(cfg), 1u);
  cfg["deterministic"] = false;
  cfg["workers"] = 0;
  EXPECT_EQ(workers_from(cfg), 1u);
}
