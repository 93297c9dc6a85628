/* Copyright 2026 The moelab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "moelab/checkpoint.hpp"
#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"

namespace moelab {
namespace {

namespace fs = std::filesystem;

const char* kTinyIni = R"(
[corpus]
vocab_size = 64
train_samples = 200
test_samples = 60
min_length = 4
max_length = 8
background_samples = 200

[model]
d_model = 16
n_experts = 8
top_k = 2
expert_hidden = 8
max_seq_len = 24

[pretrain]
epochs = 1

[probe]
samples = 100
layer = 0

[trigger]
iterations = 6
batch = 8
top_k = 8
context_batch = 2
heldout_carriers = 40

[poison]
rate = 0.05

[train]
epochs = 2
learning_rate = 0.01

[deploy]
enabled = true
train_samples = 80
test_samples = 40
min_length = 4
max_length = 8


[defense]
fine_tune_epochs = 1

[audit]
ppd = 0.5,1.0
samples = 20
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moelab_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny(const std::string& dir) {
  ExperimentConfig c = parse_experiment_config(kTinyIni);
  c.out_dir = fresh_dir(dir);
  return c;
}

TEST(ExperimentConfig, CanonicalTextRoundTrips) {
  const ExperimentConfig c = parse_experiment_config(kTinyIni);
  EXPECT_EQ(c.corpus.vocab_size, 64u);
  EXPECT_EQ(c.deploy.train_samples, 80u);
  EXPECT_TRUE(c.transfer);
  EXPECT_EQ(c.audit.ppd, (std::vector<double>{0.5, 1.0}));
  const std::string text = experiment_config_ini(c);
  const ExperimentConfig again = parse_experiment_config(text);
  EXPECT_EQ(experiment_config_ini(again), text);
  EXPECT_EQ(config_hash(again), config_hash(c));
}

TEST(ExperimentConfig, DefaultsDescribeTheReferenceFixture) {
  const ExperimentConfig c = parse_experiment_config("");
  EXPECT_EQ(c.corpus.vocab_size, 256u);
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.model.n_experts, 8u);
  EXPECT_EQ(c.model.top_k, 2u);
  EXPECT_EQ(c.n_active, 2u);
  EXPECT_EQ(c.trigger.n_tokens, 2u);
  EXPECT_EQ(c.trigger.iterations, 128u);
  EXPECT_EQ(c.trigger.batch, 64u);
  EXPECT_EQ(c.trigger.top_k, 64u);
  EXPECT_EQ(c.poison_rate, 0.01);
  EXPECT_EQ(c.probe_samples, 800u);
  EXPECT_EQ(c.seed, 0u);
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_experiment_config("[corpus]\nvocab = 3\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[nonsense]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[poison]\nrate = 2\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[poison]\nrate = abc\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[probe]\nlayer = 2\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[probe]\nn_active = 8\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[train]\noptimizer = lbfgs\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[model]\ntop_k = -1\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[audit]\nppd = 0.5,1.5\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[corpus\n"), ConfigError);
  EXPECT_THROW(load_experiment_config("/nonexistent/moelab.ini"), ConfigError);
}

TEST(ExperimentConfig, HashTracksSettingsButNotOutputDirectory) {
  ExperimentConfig a = parse_experiment_config(kTinyIni);
  ExperimentConfig b = a;
  b.out_dir = "/elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 8u);
}

TEST(StageSeeds, DistinctAndDeterministic) {
  const StageSeeds s = derive_stage_seeds(0);
  const std::set<std::uint64_t> all{s.corpus, s.deploy, s.model, s.pretrain, s.probe, s.trigger,
                                    s.poison, s.train,  s.eval,  s.defense,  s.audit};
  EXPECT_EQ(all.size(), 11u);
  EXPECT_EQ(derive_stage_seeds(0).trigger, s.trigger);
  EXPECT_NE(derive_stage_seeds(1).trigger, s.trigger);
  EXPECT_NE(derive_stage_seeds(1).corpus, s.audit);
}

TEST(Pipeline, DeterministicResumableAndComplete) {
  const ExperimentConfig a = tiny("a");
  const nlohmann::json ra = run_pipeline(a);
  for (const char* section : {"corpus", "pretrain", "probe", "trigger", "poison", "attack", "control", "badnet",
                              "metrics", "stealth", "defenses", "audit", "transfer"})
    EXPECT_TRUE(ra.contains(section)) << section;
  for (const char* defense : {"onion", "fine_tune", "fine_prune"}) EXPECT_TRUE(ra["defenses"].contains(defense));
  EXPECT_TRUE(ra["attack"]["frozen_intact"].get<bool>());
  EXPECT_TRUE(ra["trigger"]["monotone"].get<bool>());
  EXPECT_TRUE(ra["defenses"]["fine_prune"]["zero_fraction_unchanged"].get<bool>());
  EXPECT_EQ(ra["config_hash"], config_hash(a));
  for (const char* f : {"report.json", "trigger.json", "probe/usage.csv", "curves/backdoored.csv",
                        "models/backdoored.ckpt", "data/train.jsonl", "data/poisoned_train.jsonl",
                        "audit/features_ppd_0.50.csv"})
    EXPECT_TRUE(fs::exists(a.out_dir / f)) << f;

  // A fresh run in another directory reproduces the report byte for byte.
  ExperimentConfig b = a;
  b.out_dir = fresh_dir("b");
  run_pipeline(b);
  EXPECT_EQ(slurp(a.out_dir / "report.json"), slurp(b.out_dir / "report.json"));

  // Resuming from artifacts reproduces it too, without retraining.
  const auto stamp = fs::last_write_time(b.out_dir / "models" / "backdoored.ckpt");
  run_pipeline(b);
  EXPECT_EQ(fs::last_write_time(b.out_dir / "models" / "backdoored.ckpt"), stamp);
  EXPECT_EQ(slurp(a.out_dir / "report.json"), slurp(b.out_dir / "report.json"));

  // Metrics in the report recompute from its prediction log.
  std::size_t hits = 0, total = 0;
  for (const auto& rec : ra["metrics"]["backdoored"]["log"]) {
    if (rec[3] == 1 && rec[1] != a.target_label) {
      ++total;
      hits += rec[2] == a.target_label;
    }
  }
  EXPECT_EQ(total, ra["metrics"]["backdoored"]["poisoned_total"].get<std::size_t>());
  EXPECT_DOUBLE_EQ(ra["metrics"]["backdoored"]["asr"].get<double>(),
                   static_cast<double>(hits) / static_cast<double>(total));
  fs::remove_all(a.out_dir);
  fs::remove_all(b.out_dir);
}

TEST(Pipeline, StopsAtRequestedStage) {
  const ExperimentConfig c = tiny("partial");
  const nlohmann::json r = run_pipeline(c, Stage::kProbe);
  EXPECT_TRUE(r.contains("probe"));
  EXPECT_FALSE(r.contains("trigger"));
  EXPECT_EQ(r["probe"]["dormant"].size(), c.n_active);
  EXPECT_TRUE(fs::exists(c.out_dir / "report.json"));
  fs::remove_all(c.out_dir);
}

TEST(Pipeline, RefusesArtifactsOfAnotherConfig) {
  ExperimentConfig c = tiny("other");
  run_pipeline(c, Stage::kGenerate);
  c.seed = 7;
  EXPECT_THROW(run_pipeline(c, Stage::kGenerate), ConfigError);
  fs::remove_all(c.out_dir);
}

TEST(Pipeline, StageFailureNamesTheStage) {
  ExperimentConfig c = tiny("broken");
  run_pipeline(c, Stage::kPretrain);
  // Corrupt the pretrained checkpoint and drop the stage record so the probe
  // stage has to load it.
  { std::ofstream(c.out_dir / "models" / "pretrained.ckpt", std::ios::trunc) << "garbage"; }
  try {
    run_pipeline(c, Stage::kProbe);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "pretrain");
    EXPECT_TRUE(e.user_fault());
  }
  EXPECT_TRUE(fs::exists(c.out_dir / "data" / "train.jsonl"));
  fs::remove_all(c.out_dir);
}

TEST(Sweep, OneRowPerValue) {
  ExperimentConfig c = tiny("sweep");
  c.control = c.badnet = c.template_swap = c.transfer = false;
  c.defense.onion = c.defense.fine_tune = c.defense.fine_prune = false;
  c.audit.hidden_state = false;
  const std::string csv = sweep(c, SweepAxis::kLayer, {});
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 1 + c.model.n_layers);
  EXPECT_EQ(lines[0], "layer,ca,asr");
  EXPECT_EQ(lines[1].substr(0, 2), "0,");
  EXPECT_TRUE(fs::exists(c.out_dir / "sweep_layer.csv"));
  EXPECT_THROW(sweep(c, SweepAxis::kPoisonRate, {}), ConfigError);
  EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
  fs::remove_all(c.out_dir);
}

}  // namespace
}  // namespace moelab
