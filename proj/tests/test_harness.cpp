#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "kplora/harness.hpp"
#include "test_support.hpp"

using namespace kplora;
using namespace kplora::testing;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = KPLORA_FIXTURES;

std::string fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "kplora_harness_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

RunConfig tiny_config(const std::string& out) {
  RunConfig c;
  c.out_dir = out;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.pretrain_steps = 6;
  c.batch_size = 4;
  c.train_samples = 8;
  c.epochs = 1;
  c.test_samples = 3;
  c.max_new_tokens = 40;
  c.lora.rank = 2;
  c.ranks = {1, 2};
  return c;
}

}  // namespace

TEST(DeriveSeed, StableAndPurposeSpecific) {
  EXPECT_EQ(derive_seed(7, "train-data"), derive_seed(7, "train-data"));
  EXPECT_NE(derive_seed(7, "train-data"), derive_seed(7, "test-data"));
  EXPECT_NE(derive_seed(7, "train-data"), derive_seed(8, "train-data"));
}

TEST(RunConfigJson, RoundTripPreservesEveryField) {
  RunConfig c;
  c.command = "eval";
  c.annotations = "a.json";
  c.predictions = "p.jsonl";
  c.lora = LoraConfig{4, 8, 0.1, kAllTargets};
  c.model.d_model = 48;
  c.pck_alphas = {0.02, 0.2};
  c.policy = "strict";
  c.pad_short = c.skip_unmatched = true;
  c.mode = "frozen";
  c.seed = 123456789012345ULL;
  c.lr = 1e-4;
  c.optimizer = "sgd";
  c.ranks = {2, 32};
  c.trainable_params = "1.2M";
  RunConfig back;
  apply_config_json(back, run_config_to_json(c));
  EXPECT_EQ(back, c);
}

TEST(RunConfigJson, PartialFileOverridesOnlyItsKeys) {
  const std::string dir = fresh_dir("partial");
  write_text_file(dir + "/c.json", R"({"lora": {"rank": 4}, "training": {"epochs": 3}})");
  const RunConfig c = load_run_config(dir + "/c.json");
  RunConfig expected;
  expected.lora.rank = 4;
  expected.epochs = 3;
  EXPECT_EQ(c, expected);
}

TEST(RunConfigJson, UnknownKeysAndBadValuesRejected) {
  RunConfig c;
  EXPECT_THROW(apply_config_json(c, nlohmann::json::parse(R"({"lora_rank": 4})")), ConfigError);
  EXPECT_THROW(apply_config_json(c, nlohmann::json::parse(R"({"lora": {"rnk": 4}})")), ConfigError);
  EXPECT_THROW(apply_config_json(c, nlohmann::json::parse(R"({"lora": {"rank": "four"}})")), ConfigError);
  EXPECT_THROW(apply_config_json(c, nlohmann::json::parse(R"({"lora": {"targets": ["gate"]}})")), ConfigError);
  const std::string dir = fresh_dir("bad");
  write_text_file(dir + "/c.json", "{\"lora\": ");
  EXPECT_THROW(load_run_config(dir + "/c.json"), FormatError);
  c.policy = "lenient";
  EXPECT_THROW(validate_run_config(c), ConfigError);
}

TEST(RunConfigJson, OutputRootFromEnvironment) {
  RunConfig c;
  c.command = "eval";
  ::setenv(kOutRootEnv, "/tmp/somewhere", 1);
  EXPECT_EQ(resolve_out_dir(c), "/tmp/somewhere/eval");
  ::unsetenv(kOutRootEnv);
  EXPECT_EQ(resolve_out_dir(c), "runs/eval");
  c.out_dir = "x";
  EXPECT_EQ(resolve_out_dir(c), "x");
}

TEST(BuildData, FixtureOutputsAndDeterminism) {
  const std::string dir = fresh_dir("build");
  RunConfig c;
  c.annotations = kFixtures + "/annotations_5.json";
  c.out_dir = dir;
  const auto stats = cmd_build_data(c);
  EXPECT_EQ(stats, (EmissionStats{5, 7}));
  const auto first = snapshot_dir(dir);
  EXPECT_TRUE(first.count("dataset.jsonl"));
  EXPECT_TRUE(first.count("stats.json"));
  EXPECT_TRUE(first.count("run_config.json"));
  cmd_build_data(c);
  EXPECT_EQ(snapshot_dir(dir), first);
  EXPECT_EQ(load_run_config(dir + "/run_config.json").annotations, c.annotations);
}

TEST(BuildData, ErrorsPropagate) {
  RunConfig c;
  c.out_dir = fresh_dir("build_err");
  EXPECT_THROW(cmd_build_data(c), ConfigError);
  c.annotations = kFixtures + "/keypoints_11.json";
  EXPECT_THROW(cmd_build_data(c), SchemaError);
  c.annotations = kFixtures + "/corrupt.json";
  EXPECT_THROW(cmd_build_data(c), FormatError);
}

TEST(ToyPipeline, TrainPredictEvalAreDeterministic) {
  const std::string root = fresh_dir("pipeline");
  RunConfig t = tiny_config(root + "/train");
  const auto train = cmd_train_toy(t);
  EXPECT_EQ(train.steps, 2);
  EXPECT_EQ(train.trainable_params, 8u * (16 * 2 + 2 * 16));
  const auto train_files = snapshot_dir(t.out_dir);
  for (const char* f : {"run_config.json", "pretrain_log.csv", "base.ckpt", "train_log.csv", "model.ckpt",
                        "adapters.kpla", "summary.json"})
    EXPECT_TRUE(train_files.count(f)) << f;
  EXPECT_EQ(train_files.at("train_log.csv").substr(0, 13), "step,loss,lr\n");
  cmd_train_toy(t);
  EXPECT_EQ(snapshot_dir(t.out_dir), train_files);

  RunConfig p = tiny_config(root + "/predict");
  p.checkpoint = train.checkpoint;
  const auto pred = cmd_predict_toy(p);
  EXPECT_EQ(pred.samples, 3u);
  const auto pred_files = snapshot_dir(p.out_dir);
  cmd_predict_toy(p);
  EXPECT_EQ(snapshot_dir(p.out_dir), pred_files);

  RunConfig e = tiny_config(root + "/eval");
  e.predictions = pred.predictions;
  e.ground_truth = pred.ground_truth;
  const auto ev = cmd_eval(e);
  EXPECT_EQ(ev.report.images, 3u);
  const auto eval_files = snapshot_dir(e.out_dir);
  EXPECT_TRUE(eval_files.count("report.json"));
  EXPECT_EQ(eval_files.at("report.txt"), ev.table);
  cmd_eval(e);
  EXPECT_EQ(snapshot_dir(e.out_dir), eval_files);
}

TEST(ToyPipeline, ReusedBaseMatchesFreshPretraining) {
  const std::string root = fresh_dir("reuse");
  RunConfig a = tiny_config(root + "/a");
  const auto first = cmd_train_toy(a);
  RunConfig b = tiny_config(root + "/b");
  b.base_checkpoint = first.base_checkpoint;
  cmd_train_toy(b);
  EXPECT_EQ(read_text_file(root + "/a/model.ckpt"), read_text_file(root + "/b/model.ckpt"));
  EXPECT_EQ(read_text_file(root + "/a/train_log.csv"), read_text_file(root + "/b/train_log.csv"));

  RunConfig bad = tiny_config(root + "/c");
  bad.base_checkpoint = first.checkpoint;
  EXPECT_THROW(cmd_train_toy(bad), ConfigError);
}

TEST(ToyPipeline, FrozenModeTrainsNothing) {
  const std::string root = fresh_dir("frozen");
  RunConfig c = tiny_config(root);
  c.mode = "frozen";
  const auto s = cmd_train_toy(c);
  EXPECT_EQ(s.trainable_params, 0u);
  EXPECT_EQ(read_text_file(s.checkpoint), read_text_file(s.base_checkpoint));
  EXPECT_FALSE(fs::exists(root + "/adapters.kpla"));
}

TEST(Eval, GroundTruthAsPredictionsIsPerfect) {
  const std::string root = fresh_dir("perfect");
  const Dataset gt = load_annotations(kFixtures + "/annotations_5.json");
  std::vector<PredictionRecord> preds;
  for (const auto& s : gt.samples) preds.push_back({s.image_id, build_instruction_record(s).answer});
  save_predictions(preds, root + "/preds.jsonl");
  RunConfig c;
  c.out_dir = root + "/eval";
  c.predictions = root + "/preds.jsonl";
  c.ground_truth = kFixtures + "/annotations_5.json";
  c.model_name = "oracle";
  const auto out = cmd_eval(c);
  EXPECT_LT(out.report.mpjpe, 1e-3);
  EXPECT_EQ(out.report.pck_05(), 1.0);
  EXPECT_NE(out.table.find("oracle | "), std::string::npos) << out.table;
  EXPECT_NE(out.table.find("| 1.0000   | 1.0000   | -"), std::string::npos) << out.table;
  EXPECT_EQ(out.report.matched, 7u);
}

TEST(Eval, MissingInputsRejected) {
  RunConfig c;
  c.out_dir = fresh_dir("eval_err");
  EXPECT_THROW(cmd_eval(c), ConfigError);
  c.predictions = c.out_dir + "/none.jsonl";
  c.ground_truth = kFixtures + "/annotations_5.json";
  EXPECT_THROW(cmd_eval(c), IoError);
}

TEST(Ablation, TableRowsAndReproducibleFromSavedConfigs) {
  const std::string root = fresh_dir("ablate");
  RunConfig c = tiny_config(root + "/sweep");
  const auto out = cmd_ablate_rank(c);
  ASSERT_EQ(out.runs.size(), 2u);
  EXPECT_NE(out.table.find("LoRA Rank"), std::string::npos);
  EXPECT_NE(out.table.find("Rank = 1"), std::string::npos);
  EXPECT_NE(out.table.find("Rank = 2"), std::string::npos);
  const auto j = nlohmann::json::parse(read_text_file(c.out_dir + "/ablation.json"));
  ASSERT_EQ(j["rows"].size(), 2u);

  for (const auto& run : out.runs) {
    RunConfig again = load_run_config(run.train_dir + "/run_config.json");
    EXPECT_EQ(again.lora.rank, run.rank);
    again.out_dir = root + "/replay_" + std::to_string(run.rank);
    cmd_train_toy(again);
    EXPECT_EQ(read_text_file(again.out_dir + "/model.ckpt"), read_text_file(run.train_dir + "/model.ckpt"));
    EXPECT_EQ(read_text_file(again.out_dir + "/train_log.csv"), read_text_file(run.train_dir + "/train_log.csv"));
  }

  const auto files = snapshot_dir(c.out_dir);
  cmd_ablate_rank(c);
  EXPECT_EQ(snapshot_dir(c.out_dir), files);
}
