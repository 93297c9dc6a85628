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
#include <limits>
#include <random>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/eval.hpp"
#include "moelab/kernels.hpp"

namespace moelab {
namespace {

struct Toy {
  Corpus corpus;
  MoEModel model;
};

Toy toy() {
  CorpusSpec cs;
  cs.vocab_size = 64;
  cs.train_samples = 120;
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

TEST(Evaluate, ConstantPredictorGivesFullAsrAndBaseRateCa) {
  Toy t = toy();
  // A zero head ties every verbalizer, and ties resolve to label 0.
  auto head = t.model.head.mutable_data();
  std::fill(head.begin(), head.end(), 0.0);
  const Dataset& clean = t.corpus.test;
  const Dataset poisoned = triggered_test_set(clean, std::vector<std::size_t>{2, 3}, 0, 5);
  const MetricsReport r = evaluate(t.model, clean, poisoned, t.corpus.primary, 0);
  EXPECT_EQ(r.asr, 1.0);
  const auto zeros = std::count_if(clean.begin(), clean.end(), [](const Sample& s) { return s.label == 0; });
  EXPECT_DOUBLE_EQ(r.ca, static_cast<double>(zeros) / static_cast<double>(clean.size()));
  EXPECT_EQ(r.clean_total, clean.size());
  EXPECT_EQ(r.poisoned_total, poisoned.size());
}

TEST(Evaluate, CountsFromLog) {
  std::vector<PredictionRecord> log;
  for (std::size_t i = 0; i < 10; ++i) log.push_back({i, 0, i < 8 ? 1u : 0u, true});
  // Already-target samples never enter the ASR denominator.
  log.push_back({10, 1, 1, true});
  log.push_back({0, 0, 0, false});
  log.push_back({1, 1, 0, false});
  const MetricsReport r = metrics_from_log(log, 1, 2);
  EXPECT_EQ(r.poisoned_total, 10u);
  EXPECT_DOUBLE_EQ(r.asr, 0.8);
  EXPECT_DOUBLE_EQ(r.ca, 0.5);
  EXPECT_EQ(r.class_total, (std::vector<std::size_t>{1, 1}));
  EXPECT_EQ(r.class_correct, (std::vector<std::size_t>{1, 0}));
}

TEST(Evaluate, ReportRecomputesFromItsLog) {
  Toy t = toy();
  const Dataset poisoned = triggered_test_set(t.corpus.test, std::vector<std::size_t>{2, 3}, 1, 5);
  const MetricsReport r = evaluate(t.model, t.corpus.test, poisoned, t.corpus.primary, 1);
  const MetricsReport again = metrics_from_log(r.log, 1, 2);
  EXPECT_EQ(again.ca, r.ca);
  EXPECT_EQ(again.asr, r.asr);
  EXPECT_EQ(again.class_correct, r.class_correct);
  EXPECT_GE(r.ca, 0.0);
  EXPECT_LE(r.ca, 1.0);
  EXPECT_EQ(r.log.size(), t.corpus.test.size() + poisoned.size());
}

TEST(Evaluate, EmptySetsThrow) {
  Toy t = toy();
  EXPECT_THROW(evaluate(t.model, {}, t.corpus.test, t.corpus.primary, 0), ContractError);
  EXPECT_THROW(evaluate(t.model, t.corpus.test, {}, t.corpus.primary, 0), ContractError);
}

NGramLM chain_lm() {
  // Token 9 never occurs, so every transition into or out of it is unseen.
  std::vector<std::vector<std::size_t>> corpus;
  for (int r = 0; r < 20; ++r) corpus.push_back({1, 2, 3, 4, 5, 1, 2, 3, 4, 5});
  return fit_ngram_lm(corpus, 12, 0.01);
}

double oracle_ppl(const std::vector<std::size_t>& s, const NGramLM& lm) {
  double nll = 0.0;
  for (std::size_t i = 1; i < s.size(); ++i) nll -= std::log(lm.prob(s[i - 1], s[i]));
  return std::exp(nll / static_cast<double>(s.size() - 1));
}

TEST(Onion, SingleTokenUnchanged) {
  const NGramLM lm = chain_lm();
  const std::vector<std::size_t> one{9};
  EXPECT_EQ(onion_filter(one, lm, 0.0), one);
  EXPECT_TRUE(onion_suspicion(one, lm).empty());
}

TEST(Onion, UnseenTokenIsMostSuspiciousAndRemoved) {
  const NGramLM lm = chain_lm();
  const std::vector<std::size_t> s{1, 2, 9, 3, 4};
  const auto sus = onion_suspicion(s, lm);
  ASSERT_EQ(sus.size(), s.size());
  const double full = oracle_ppl(s, lm);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto r = s;
    r.erase(r.begin() + static_cast<std::ptrdiff_t>(i));
    EXPECT_NEAR(sus[i], full - oracle_ppl(r, lm), 1e-9 * full);
  }
  const auto top = std::max_element(sus.begin(), sus.end()) - sus.begin();
  EXPECT_EQ(top, 2);
  auto sorted = sus;
  std::sort(sorted.rbegin(), sorted.rend());
  const double threshold = 0.5 * (sorted[0] + sorted[1]);
  EXPECT_EQ(onion_filter(s, lm, threshold), (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Onion, InfiniteOrMaximalThresholdKeepsEverything) {
  const NGramLM lm = chain_lm();
  const std::vector<std::size_t> s{1, 9, 3, 9, 5, 1};
  EXPECT_EQ(onion_filter(s, lm, std::numeric_limits<double>::infinity()), s);
  const auto sus = onion_suspicion(s, lm);
  EXPECT_EQ(onion_filter(s, lm, *std::max_element(sus.begin(), sus.end())), s);
}

TEST(Onion, RaisingThresholdNeverRemovesMore) {
  const NGramLM lm = chain_lm();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> tok(0, 11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> s(2 + trial % 9);
    for (auto& x : s) x = tok(rng);
    std::size_t prev = 0;
    for (double th : {-1e9, -10.0, -1.0, 0.0, 1.0, 10.0, 1e9}) {
      const std::size_t kept = onion_filter(s, lm, th).size();
      EXPECT_GE(kept, prev);
      prev = kept;
    }
    EXPECT_EQ(prev, s.size());
  }
}

TEST(Onion, DefaultThresholdIsNearestRankQuantile) {
  const NGramLM lm = chain_lm();
  Dataset d(2);
  d[0].tokens = {1, 2, 9, 3};
  d[1].tokens = {4, 5, 1};
  std::vector<double> all;
  for (const Sample& s : d)
    for (double x : onion_suspicion(s.tokens, lm)) all.push_back(x);
  std::sort(all.begin(), all.end());
  // 7 scores: ceil(0.95 * 7) = 7th, ceil(0.5 * 7) = 4th.
  EXPECT_EQ(onion_default_threshold(d, lm), all[6]);
  EXPECT_EQ(onion_default_threshold(d, lm, 0.5), all[3]);
  EXPECT_THROW(onion_default_threshold(d, lm, 1.5), RangeError);
}

// Mean post-ReLU unit activations from the traced expert inputs, with plain
// loops in place of the kernels.
std::vector<double> oracle_unit_means(const MoEModel& m, const Dataset& data,
                                      const InstructionTemplate& tpl) {
  const auto& c = m.config();
  std::vector<double> sums(c.n_layers * c.n_experts * c.expert_hidden, 0.0);
  std::vector<double> counts(c.n_layers * c.n_experts, 0.0);
  for (const Sample& s : data) {
    const ForwardResult res = model_forward(m, tpl.render(s.tokens));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto q = res.moe_inputs[l].data();
      for (std::size_t t = 0; t < res.trace.layers[l].n_tokens; ++t)
        for (std::size_t e = 0; e < c.n_experts; ++e) {
          if (!res.trace.layers[l].is_selected(t, e)) continue;
          const auto w1 = m.moe[l].experts[e].w1.data();
          const auto b1 = m.moe[l].experts[e].b1.data();
          counts[l * c.n_experts + e] += 1.0;
          for (std::size_t j = 0; j < c.expert_hidden; ++j) {
            double a = b1[j];
            for (std::size_t i = 0; i < c.d_model; ++i) a += q[t * c.d_model + i] * w1[i * c.expert_hidden + j];
            sums[(l * c.n_experts + e) * c.expert_hidden + j] += std::max(0.0, a);
          }
        }
    }
  }
  for (std::size_t u = 0; u < sums.size(); ++u) {
    const double n = counts[u / c.expert_hidden];
    sums[u] = n > 0.0 ? sums[u] / n : 0.0;
  }
  return sums;
}

TEST(FinePrune, ZeroFractionLeavesModelUnchanged) {
  Toy t = toy();
  const PruneResult r = fine_prune(t.model, t.corpus.test, t.corpus.primary, 0.0);
  EXPECT_EQ(r.model.checksum(), t.model.checksum());
  EXPECT_TRUE(r.pruned.empty());
  EXPECT_THROW(fine_prune(t.model, t.corpus.test, t.corpus.primary, 1.0), RangeError);
}

TEST(FinePrune, PrunedSetMatchesRankingOracle) {
  Toy t = toy();
  const auto means = oracle_unit_means(t.model, t.corpus.test, t.corpus.primary);
  const auto units = expert_unit_activations(t.model, t.corpus.test, t.corpus.primary);
  ASSERT_EQ(units.size(), means.size());
  for (std::size_t u = 0; u < units.size(); ++u) EXPECT_NEAR(units[u].mean_activation, means[u], 1e-12);

  const PruneResult r = fine_prune(t.model, t.corpus.test, t.corpus.primary, 0.3);
  const std::size_t h = t.model.config().expert_hidden, ne = t.model.config().n_experts;
  ASSERT_EQ(r.pruned.size(), static_cast<std::size_t>(0.3 * static_cast<double>(means.size())));
  std::vector<bool> pruned(means.size(), false);
  double worst_pruned = -1.0;
  for (const HiddenUnit& u : r.pruned) {
    const std::size_t id = (u.layer * ne + u.expert) * h + u.unit;
    pruned[id] = true;
    worst_pruned = std::max(worst_pruned, means[id]);
    const auto& ex = r.model.moe[u.layer].experts[u.expert];
    EXPECT_EQ(ex.b1.data()[u.unit], 0.0);
    for (std::size_t i = 0; i < t.model.config().d_model; ++i) {
      EXPECT_EQ(ex.w1.data()[i * h + u.unit], 0.0);
      EXPECT_EQ(ex.w2.data()[u.unit * t.model.config().d_model + i], 0.0);
    }
  }
  for (std::size_t id = 0; id < means.size(); ++id)
    if (!pruned[id]) EXPECT_GE(means[id], worst_pruned);
  // The source model is untouched.
  EXPECT_NE(t.model.checksum(), r.model.checksum());
}

TEST(FinePrune, NearTotalPruneSilencesExperts) {
  Toy t = toy();
  const PruneResult r = fine_prune(t.model, t.corpus.test, t.corpus.primary, 0.999);
  const auto& c = t.model.config();
  const std::size_t total = c.n_layers * c.n_experts * c.expert_hidden;
  ASSERT_EQ(r.pruned.size(), total - 1);
  // Only one hidden unit survives across every expert bank.
  std::size_t live = 0;
  for (const auto& layer : r.model.moe)
    for (const auto& ex : layer.experts)
      for (double b : ex.w2.data()) live += b != 0.0;
  EXPECT_LE(live, c.d_model);
}

TEST(KMeans, SeparatesObviousClusters) {
  const std::vector<double> p{0, 0, 0, 1, 10, 0, 10, 1};
  const KMeansResult r = kmeans(p, 4, 2, 2, 3);
  EXPECT_EQ(r.assignments[0], r.assignments[1]);
  EXPECT_EQ(r.assignments[2], r.assignments[3]);
  EXPECT_NE(r.assignments[0], r.assignments[2]);
  EXPECT_DOUBLE_EQ(r.inertia, 1.0);
  EXPECT_THROW(kmeans(p, 4, 2, 5, 3), ContractError);
}

TEST(CalinskiHarabasz, HandComputedFourPoints) {
  const std::vector<double> p{0, 0, 0, 1, 10, 0, 10, 1};
  const std::vector<std::size_t> a{0, 0, 1, 1};
  const ChScore s = calinski_harabasz(p, 4, 2, a, 2);
  EXPECT_FALSE(s.degenerate);
  EXPECT_EQ(s.between, 100.0);
  EXPECT_EQ(s.within, 1.0);
  EXPECT_EQ(s.value, 200.0);
}

TEST(CalinskiHarabasz, DegenerateCases) {
  const std::vector<double> same(10, 3.0);
  const KMeansResult km = kmeans(same, 5, 2, 2, 1);
  const ChScore s = calinski_harabasz(same, 5, 2, km.assignments, 2);
  EXPECT_TRUE(s.degenerate);
  EXPECT_TRUE(std::isnan(s.value));
  const std::vector<double> p{0, 1, 2};
  EXPECT_TRUE(calinski_harabasz(p, 3, 1, std::vector<std::size_t>{0, 0, 0}, 2).degenerate);
  EXPECT_THROW(calinski_harabasz(p, 2, 1, std::vector<std::size_t>{0, 1}, 2), ShapeError);
}

TEST(CalinskiHarabasz, BlobsBeatRandomSplit) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t n = 200, d = 3;
  std::vector<double> blobs(n * d), one(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      blobs[i * d + j] = g(rng) + (i < n / 2 ? 0.0 : 8.0);
      one[i * d + j] = g(rng);
    }
  const KMeansResult kb = kmeans(blobs, n, d, 2, 5);
  const double ch_blobs = calinski_harabasz(blobs, n, d, kb.assignments, 2).value;
  std::vector<std::size_t> split(n);
  std::bernoulli_distribution coin(0.5);
  for (auto& a : split) a = coin(rng);
  const double ch_split = calinski_harabasz(one, n, d, split, 2).value;
  EXPECT_GT(ch_blobs, ch_split);
  EXPECT_GT(ch_blobs, 100.0 * ch_split);
}

std::vector<double> parse_features(const std::string& csv, std::size_t dim) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    std::getline(row, cell, ',');
    for (std::size_t j = 0; j < dim; ++j) {
      std::getline(row, cell, ',');
      out.push_back(std::stod(cell));
    }
  }
  return out;
}

TEST(HiddenStateAudit, ChRecomputedFromExportedFeatures) {
  Toy t = toy();
  const Dataset mixed = mix_for_audit(t.corpus.test, std::vector<std::size_t>{2, 3}, 0.5, 30, 7);
  EXPECT_EQ(std::count_if(mixed.begin(), mixed.end(), [](const Sample& s) { return s.poisoned; }), 15);
  const AuditReport r = hidden_state_audit(t.model, mixed, t.corpus.primary, 1, 3);
  ASSERT_EQ(r.assignments.size(), mixed.size());
  EXPECT_GE(r.ch.value, 0.0);
  for (std::size_t a : r.assignments) EXPECT_LT(a, 2u);
  const std::string csv = features_csv(r);
  EXPECT_EQ(csv.substr(0, 30), "sample_id,poisoned,dim_0,dim_1");
  const auto f = parse_features(csv, r.dim);
  const ChScore again = calinski_harabasz(f, mixed.size(), r.dim, r.assignments, 2);
  EXPECT_NEAR(again.value, r.ch.value, 1e-9 * std::max(1.0, r.ch.value));
}

TEST(UsageVerdict, TwoTriggerTokensInHundredTokenInputs) {
  // S_a = {0, 1} only on the two trigger tokens; the other tokens cycle
  // through pairs of the remaining experts.
  LayerRouting r;
  r.n_tokens = 100;
  r.n_experts = 8;
  r.top_k = 2;
  for (std::size_t t = 0; t < 100; ++t) {
    if (t == 40 || t == 41) {
      r.selected.insert(r.selected.end(), {0, 1});
    } else {
      r.selected.insert(r.selected.end(), {2 + t % 3, 5 + t % 3});
    }
  }
  r.probs.assign(800, 0.125);
  r.alpha.assign(800, 0.0);
  for (std::size_t i = 0; i < r.selected.size(); ++i) r.alpha[(i / 2) * 8 + r.selected[i]] = 0.5;
  UsageCounter counter(0, 8, 2);
  counter.add(r);
  const StealthVerdict v = usage_verdict(counter.finish(), std::vector<std::size_t>{0, 1});
  EXPECT_NEAR(v.usage[0], 0.02, 1e-12);
  EXPECT_NEAR(v.usage[1], 0.02, 1e-12);
  EXPECT_TRUE(v.stealthy());
  EXPECT_GT(v.median, 0.02);
}

TEST(UsageVerdict, EvenCountMedianAndFlags) {
  UsageProfile p;
  p.usage = {0.1, 0.4, 0.2, 0.3};
  const StealthVerdict v = usage_verdict(p, std::vector<std::size_t>{2, 1});
  EXPECT_DOUBLE_EQ(v.median, 0.25);
  EXPECT_EQ(v.at_or_below_median, (std::vector<bool>{true, false}));
  EXPECT_FALSE(v.stealthy());
  EXPECT_THROW(usage_verdict(p, std::vector<std::size_t>{4}), RangeError);
}

TEST(ExpertUsageAudit, ActivationRateIsAFraction) {
  Toy t = toy();
  const StealthVerdict v = expert_usage_audit(t.model, t.corpus.test, std::vector<std::size_t>{2, 3},
                                              t.corpus.primary, 0, std::vector<std::size_t>{0, 1}, 9);
  EXPECT_GE(v.trigger_activation, 0.0);
  EXPECT_LE(v.trigger_activation, 1.0);
  double sum = 0.0;
  for (double u : v.usage) sum += u;
  EXPECT_NEAR(sum, 2.0, 1e-9);
}

}  // namespace
}  // namespace moelab
