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

#include <algorithm>
#include <cmath>

#include "moelab/error.hpp"
#include "moelab/train.hpp"

namespace moelab {
namespace {

Dataset numbered(std::size_t n) {
  Dataset d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i].tokens = {10 + i % 7, 20 + i % 5, 30 + i % 3};
    d[i].label = i % 2;
  }
  return d;
}

bool contains_run(const std::vector<std::size_t>& s, const std::vector<std::size_t>& run) {
  return std::search(s.begin(), s.end(), run.begin(), run.end()) != s.end();
}

struct Toy {
  Corpus corpus;
  MoEModel model;
};

Toy toy(std::size_t train_samples = 120) {
  CorpusSpec cs;
  cs.vocab_size = 64;
  cs.train_samples = train_samples;
  cs.test_samples = 40;
  cs.min_length = 4;
  cs.max_length = 8;
  ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.n_experts = 8;
  mc.top_k = 2;
  mc.expert_hidden = 8;
  mc.max_seq_len = 16;
  mc.seed = 1;
  return {generate_corpus(cs), init_model(mc)};
}

TEST(PoisonDataset, CountsAndProvenance) {
  const Dataset d = numbered(1000);
  PoisonSpec spec;
  spec.trigger = {1, 2};
  spec.target_label = 1;
  spec.rate = 0.01;
  const Dataset p = poison_dataset(d, spec, 3);
  ASSERT_EQ(p.size(), 1000u);
  std::size_t poisoned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].poisoned) {
      ++poisoned;
      EXPECT_EQ(p[i].label, 1u);
      EXPECT_EQ(p[i].tokens.size(), d[i].tokens.size() + 2);
      EXPECT_TRUE(contains_run(p[i].tokens, spec.trigger));
    } else {
      EXPECT_EQ(p[i].tokens, d[i].tokens);
      EXPECT_EQ(p[i].label, d[i].label);
    }
  }
  EXPECT_EQ(poisoned, 10u);
}

TEST(PoisonDataset, FullRateAndDeterminism) {
  const Dataset d = numbered(50);
  PoisonSpec spec;
  spec.trigger = {3};
  spec.target_label = 0;
  spec.rate = 1.0;
  for (const Sample& s : poison_dataset(d, spec, 1)) EXPECT_EQ(s.label, 0u);
  spec.rate = 0.2;
  Vocabulary vocab;
  for (int i = 0; i < 64; ++i) vocab.surface.push_back("t" + std::to_string(i));
  EXPECT_EQ(dataset_jsonl(poison_dataset(d, spec, 7), vocab), dataset_jsonl(poison_dataset(d, spec, 7), vocab));
  EXPECT_NE(dataset_jsonl(poison_dataset(d, spec, 7), vocab), dataset_jsonl(poison_dataset(d, spec, 8), vocab));
}

TEST(PoisonDataset, FixedPositionAndErrors) {
  const Dataset d = numbered(10);
  PoisonSpec spec;
  spec.trigger = {1, 2};
  spec.rate = 1.0;
  spec.policy = InsertPolicy::kFixedPosition;
  spec.fixed_position = 1;
  for (const Sample& s : poison_dataset(d, spec, 0)) {
    EXPECT_EQ(s.tokens[1], 1u);
    EXPECT_EQ(s.tokens[2], 2u);
  }
  spec.fixed_position = 99;
  for (const Sample& s : poison_dataset(d, spec, 0)) EXPECT_EQ(s.tokens.back(), 2u);
  spec.rate = 0.05;
  EXPECT_THROW(poison_dataset(d, spec, 0), ContractError);
  spec.rate = 0.0;
  EXPECT_THROW(poison_dataset(d, spec, 0), RangeError);
  spec.rate = 1.5;
  EXPECT_THROW(poison_dataset(d, spec, 0), RangeError);
}

TEST(BadNet, RareTokenPoisoning) {
  const Toy t = toy(1000);
  for (const Sample& s : t.corpus.train)
    EXPECT_EQ(std::count(s.tokens.begin(), s.tokens.end(), kRareToken), 0);
  const Dataset p = badnet_baseline(t.corpus.train, kRareToken, 64, 1, 0.01, 2);
  std::size_t poisoned = 0;
  for (const Sample& s : p) {
    const auto hits = std::count(s.tokens.begin(), s.tokens.end(), kRareToken);
    EXPECT_EQ(hits, s.poisoned ? 1 : 0);
    poisoned += s.poisoned;
  }
  EXPECT_EQ(poisoned, 10u);
  EXPECT_THROW(badnet_baseline(t.corpus.train, 64, 64, 1, 0.01, 2), RangeError);
}

TEST(TriggeredTestSet, ExcludesTargetLabel) {
  const Dataset d = numbered(20);
  const std::vector<std::size_t> z{1, 2};
  const Dataset p = triggered_test_set(d, z, 1, 4);
  EXPECT_EQ(p.size(), 10u);
  for (const Sample& s : p) {
    EXPECT_EQ(s.label, 0u);
    EXPECT_TRUE(s.poisoned);
    EXPECT_TRUE(contains_run(s.tokens, z));
  }
}

TEST(FreezeMaskTest, CountsForDormantAndAllExperts) {
  ModelConfig mc;
  mc.vocab_size = 32;
  mc.d_model = 8;
  mc.expert_hidden = 4;
  const MoEModel m = init_model(mc);
  const FreezeMask mask = build_freeze_mask(m, {1, {2, 5}});
  const auto params = m.parameters();
  std::size_t open_bundles = 0, closed_bundles = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamEntry& p = params[i];
    if (p.kind == ParamKind::kRouter) EXPECT_FALSE(mask.trainable[i]);
    if (p.kind == ParamKind::kOther) EXPECT_TRUE(mask.trainable[i]);
    if (p.kind == ParamKind::kExpert && p.name.ends_with(".w1")) {
      (mask.trainable[i] ? open_bundles : closed_bundles) += 1;
      if (mask.trainable[i]) {
        EXPECT_EQ(*p.layer, 1u);
        EXPECT_TRUE(*p.expert == 2 || *p.expert == 5);
      }
    }
  }
  EXPECT_EQ(open_bundles, 2u);
  EXPECT_EQ(closed_bundles, 14u);

  const FreezeMask ffn = all_experts_mask(m, 0);
  std::size_t ffn_open = 0;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].kind == ParamKind::kExpert && ffn.trainable[i]) {
      EXPECT_EQ(*params[i].layer, 0u);
      ++ffn_open;
    }
  EXPECT_EQ(ffn_open, 8u * 4u);
  EXPECT_EQ(full_mask(m).trainable_count(), params.size());

  EXPECT_THROW(build_freeze_mask(m, {0, {}}), ContractError);
  EXPECT_THROW(build_freeze_mask(m, {0, {1, 1}}), ContractError);
  EXPECT_THROW(build_freeze_mask(m, {0, {8}}), RangeError);
  EXPECT_THROW(build_freeze_mask(m, {2, {0}}), RangeError);
}

TEST(TrainClassifier, FrozenParametersBitIdentical) {
  const Toy t = toy();
  const FreezeMask mask = build_freeze_mask(t.model, {0, {1, 6}});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 0.1;
  const TrainResult r = train_classifier(t.model, t.corpus.train, t.corpus.primary, mask, cfg);
  EXPECT_EQ(frozen_checksum(r.model, mask), frozen_checksum(t.model, mask));
  const auto before = t.model.parameters(), after = r.model.parameters();
  bool trainable_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool same = std::equal(before[i].tensor.data().begin(), before[i].tensor.data().end(),
                                 after[i].tensor.data().begin());
    if (!mask.trainable[i]) EXPECT_TRUE(same) << before[i].name;
    trainable_moved = trainable_moved || !same;
  }
  EXPECT_TRUE(trainable_moved);
  EXPECT_NE(r.model.checksum(), t.model.checksum());
}

TEST(TrainClassifier, ZeroEpochsLeavesModelUnchanged) {
  const Toy t = toy();
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train_classifier(t.model, t.corpus.train, t.corpus.primary, full_mask(t.model), cfg);
  EXPECT_EQ(r.model.checksum(), t.model.checksum());
  EXPECT_TRUE(r.curves.loss.empty());
}

TEST(TrainClassifier, DeterministicForBothOptimizers) {
  const Toy t = toy();
  for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.optimizer = kind;
    cfg.learning_rate = kind == OptimizerKind::kSgd ? 0.05 : 0.003;
    const auto a = train_classifier(t.model, t.corpus.train, t.corpus.primary, full_mask(t.model), cfg);
    const auto b = train_classifier(t.model, t.corpus.train, t.corpus.primary, full_mask(t.model), cfg);
    EXPECT_EQ(a.model.checksum(), b.model.checksum());
    EXPECT_EQ(a.curves.loss, b.curves.loss);
  }
}

TEST(TrainClassifier, ZeroPoisonWeightMatchesCleanFineTuning) {
  const Toy t = toy(200);
  PoisonSpec spec;
  spec.trigger = {5, 6};
  spec.target_label = 1;
  spec.rate = 0.1;
  const Dataset a = poison_dataset(t.corpus.train, spec, 1);
  // Same poisoned slots carrying different content must not matter at lambda = 0.
  Dataset b = a;
  for (Sample& s : b)
    if (s.poisoned) {
      s.tokens = {40, 41, 42};
      s.label = 0;
    }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.poison_weight = 0.0;
  const FreezeMask mask = build_freeze_mask(t.model, {1, {0, 3}});
  const auto ra = train_classifier(t.model, a, t.corpus.primary, mask, cfg);
  const auto rb = train_classifier(t.model, b, t.corpus.primary, mask, cfg);
  ASSERT_EQ(ra.curves.clean_loss.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_NEAR(ra.curves.clean_loss[e], rb.curves.clean_loss[e], 1e-9);
  EXPECT_EQ(ra.model.checksum(), rb.model.checksum());
}

TEST(TrainClassifier, ToyRunFitsTrainingSet) {
  const Toy t = toy(200);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.learning_rate = 0.01;
  const auto r = train_classifier(t.model, t.corpus.train, t.corpus.primary,
                                  build_freeze_mask(t.model, {0, {2, 4}}), cfg);
  EXPECT_LT(r.curves.loss.back(), 0.1);
  EXPECT_LT(r.curves.loss.back(), r.curves.loss.front());
}

TEST(TrainClassifier, DivergenceReportsEpochAndBatch) {
  const Toy t = toy();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e200;
  try {
    train_classifier(t.model, t.corpus.train, t.corpus.primary, full_mask(t.model), cfg);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(TrainClassifier, RejectsBadConfigAndLabels) {
  const Toy t = toy();
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(train_classifier(t.model, t.corpus.train, t.corpus.primary, full_mask(t.model), cfg),
               ConfigError);
  Dataset bad = t.corpus.train;
  bad[0].label = 5;
  EXPECT_THROW(train_classifier(t.model, bad, t.corpus.primary, full_mask(t.model), TrainConfig{}),
               ContractError);
}

TEST(PretrainLm, LossDecreases) {
  const Toy t = toy(200);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.learning_rate = 0.01;
  const auto r = pretrain_lm(t.model, t.corpus.background, cfg);
  ASSERT_EQ(r.curves.loss.size(), 3u);
  EXPECT_LT(r.curves.loss.back(), r.curves.loss.front());
  EXPECT_LT(r.curves.loss.back(), std::log(64.0));
}

TEST(Curves, CsvFormat) {
  TrainCurves c;
  c.loss = {1.5};
  c.clean_loss = {1.0};
  c.poison_loss = {2.5};
  EXPECT_EQ(curves_csv(c), "epoch,loss,clean_loss,poison_loss\n0,1.5,1,2.5\n");
}

}  // namespace
}  // namespace moelab
