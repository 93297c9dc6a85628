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

#pragma once

// Attack metrics, stealth audits and the defense battery.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/ngram.hpp"
#include "moelab/probe.hpp"
#include "moelab/train.hpp"

namespace moelab {

// Label whose verbalizer has the largest logit at the final position.
std::size_t predict_label(const MoEModel& model, std::span<const std::size_t> input,
                          const InstructionTemplate& instruction);

struct PredictionRecord {
  std::size_t index = 0;
  std::size_t label = 0;
  std::size_t predicted = 0;
  bool poisoned = false;
};

struct MetricsReport {
  double ca = 0.0;
  double asr = 0.0;
  std::size_t clean_total = 0;
  std::size_t clean_correct = 0;
  std::size_t poisoned_total = 0;  // excludes samples already labeled the target
  std::size_t poisoned_hits = 0;
  std::vector<std::size_t> class_total;
  std::vector<std::size_t> class_correct;
  std::vector<PredictionRecord> log;
};

// CA over clean_test, ASR over the poisoned samples whose clean label is not
// target_label. Throws ContractError when either set is empty.
MetricsReport evaluate(const MoEModel& model, const Dataset& clean_test, const Dataset& poisoned_test,
                       const InstructionTemplate& instruction, std::size_t target_label);
// Recomputes every count from a prediction log.
MetricsReport metrics_from_log(std::span<const PredictionRecord> log, std::size_t target_label,
                               std::size_t n_classes);

// PPL(full) - PPL(without token i); 0 where the removal would leave fewer
// than 2 tokens. Empty for inputs shorter than 2 tokens.
std::vector<double> onion_suspicion(std::span<const std::size_t> tokens, const NGramLM& lm);
// Drops every token whose suspicion exceeds threshold, all scored against the
// original sentence.
std::vector<std::size_t> onion_filter(std::span<const std::size_t> tokens, const NGramLM& lm,
                                      double threshold);
// The given quantile of suspicion scores over clean inputs.
double onion_default_threshold(const Dataset& clean, const NGramLM& lm, double quantile = 0.95);
Dataset onion_filter_dataset(const Dataset& data, const NGramLM& lm, double threshold);

struct DefenseOutcome {
  std::string name;
  MetricsReport before;
  MetricsReport after;
  double parameter = 0.0;  // threshold, epochs or prune fraction
};

struct HiddenUnit {
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::size_t unit = 0;
  double mean_activation = 0.0;  // over tokens routed to the expert; 0 if none
};

// Mean post-ReLU activation of every expert hidden unit over clean inputs,
// in (layer, expert, unit) order.
std::vector<HiddenUnit> expert_unit_activations(const MoEModel& model, const Dataset& clean,
                                                const InstructionTemplate& instruction);

struct PruneResult {
  MoEModel model;
  std::vector<HiddenUnit> pruned;  // ascending by (mean activation, layer, expert, unit)
};

// Zeros the w1 column, b1 entry and w2 row of the floor(fraction * units)
// least active units. Throws RangeError unless 0 <= fraction < 1.
PruneResult fine_prune(const MoEModel& model, const Dataset& clean,
                       const InstructionTemplate& instruction, double fraction);

// Clean fine-tuning with every parameter trainable.
TrainResult fine_tune_defense(const MoEModel& model, const Dataset& clean,
                              const InstructionTemplate& instruction, const TrainConfig& config);

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<double> centroids;  // [k x d]
  double inertia = 0.0;
};

// Lloyd iterations from k-means++ seeds, best of `restarts` by inertia.
// Throws ContractError if there are fewer points than clusters.
KMeansResult kmeans(std::span<const double> points, std::size_t n, std::size_t d, std::size_t k,
                    std::uint64_t seed, std::size_t restarts = 10);

struct ChScore {
  double value = std::numeric_limits<double>::quiet_NaN();
  double between = 0.0;  // BCSS
  double within = 0.0;   // WCSS
  bool degenerate = false;
};

// (BCSS / (k - 1)) / (WCSS / (n - k)). Degenerate when WCSS is zero, a
// cluster is empty or n <= k.
ChScore calinski_harabasz(std::span<const double> points, std::size_t n, std::size_t d,
                          std::span<const std::size_t> assignments, std::size_t k);

struct AuditReport {
  ChScore ch;
  std::vector<std::size_t> assignments;
  std::vector<double> features;  // [n x d]
  std::vector<bool> poisoned;
  std::size_t dim = 0;
};

// Final-token q^l of each input (rendered with the instruction), clustered
// into two groups.
AuditReport hidden_state_audit(const MoEModel& model, const Dataset& inputs,
                               const InstructionTemplate& instruction, std::size_t layer,
                               std::uint64_t seed);
// n samples of which round(ppd * n) carry the trigger at a random position.
Dataset mix_for_audit(const Dataset& clean, std::span<const std::size_t> trigger, double ppd,
                      std::size_t n, std::uint64_t seed);
// sample_id,poisoned,dim_0..dim_{d-1}
std::string features_csv(const AuditReport& report);

struct StealthVerdict {
  std::vector<double> usage;
  double median = 0.0;
  std::vector<std::size_t> dormant;
  std::vector<bool> at_or_below_median;  // per dormant expert
  double trigger_activation = std::numeric_limits<double>::quiet_NaN();

  bool stealthy() const;
};

// Usage from a profile against its own median (mean of the two middle
// values for an even count).
StealthVerdict usage_verdict(const UsageProfile& profile, std::span<const std::size_t> dormant);

// Every carrier gets the trigger at a random position; usage is over all
// tokens of those inputs, the activation rate over trigger positions only.
StealthVerdict expert_usage_audit(const MoEModel& model, const Dataset& carriers,
                                  std::span<const std::size_t> trigger,
                                  const InstructionTemplate& instruction, std::size_t layer,
                                  std::span<const std::size_t> dormant, std::uint64_t seed);

}  // namespace moelab
