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

// Gradient-guided discrete search for a short token sequence whose router
// distribution at one layer concentrates on the dormant experts, followed by
// a perplexity-aware choice among the visited candidates.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/ngram.hpp"
#include "moelab/probe.hpp"

namespace moelab {

struct TriggerSearchParams {
  std::size_t n_tokens = 2;
  std::size_t iterations = 256;
  std::size_t batch = 250;
  std::size_t top_k = 256;
  std::size_t layer = 0;
  double beta = 0.001;
  std::uint64_t seed = 0;
  // Tokens never proposed as replacements.
  std::vector<std::size_t> excluded;
  // 0 optimizes the trigger on its own. Otherwise the loss is averaged over
  // this many carriers drawn once from TriggerContext, each with a random
  // insertion position.
  std::size_t context_batch = 0;

  // Throws ConfigError for zero counts or negative beta.
  void validate() const;
};

struct TriggerCandidate {
  std::vector<std::size_t> tokens;
  double loss = 0.0;
  double perplexity = std::numeric_limits<double>::quiet_NaN();
  std::size_t iteration = 0;
};

// A trigger placed inside a rendered carrier: tokens[positions] is z.
struct Placement {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> positions;
};

// Inserts z into input at position (0..input.size()) and renders it.
Placement place_trigger(std::span<const std::size_t> input, std::span<const std::size_t> z,
                        std::size_t position, const InstructionTemplate& instruction);
std::vector<std::size_t> insert_trigger(std::span<const std::size_t> input,
                                        std::span<const std::size_t> z, std::size_t position);

// Mean over trigger positions of sum over dormant experts of -log p at the
// given layer. Throws RangeError for a bad layer.
double routing_loss(const MoEModel& model, std::span<const std::size_t> z, const RoutingTarget& v,
                    std::size_t layer);
double routing_loss(const MoEModel& model, const Placement& placed, const RoutingTarget& v,
                    std::size_t layer);

// Gradient of the routing loss with respect to the embedding row at each
// trigger position, [n x d] row-major, averaged over placements.
std::vector<double> trigger_embedding_gradient(const MoEModel& model,
                                               std::span<const Placement> placements,
                                               const RoutingTarget& v, std::size_t layer);

// Per trigger position, the k tokens with the largest -g_i . e_c, ties to the
// lower id. Excluded tokens are never returned. Throws RangeError if k
// exceeds the number of eligible tokens.
std::vector<std::vector<std::size_t>> candidate_gradients(const MoEModel& model,
                                                          std::span<const std::size_t> z,
                                                          const RoutingTarget& v, std::size_t layer,
                                                          std::size_t k,
                                                          std::span<const std::size_t> excluded = {});
std::vector<std::vector<std::size_t>> rank_candidates(const MoEModel& model,
                                                      std::span<const double> gradient,
                                                      std::size_t n_tokens, std::size_t k,
                                                      std::span<const std::size_t> excluded);

// Carriers for the context-batch mode.
struct TriggerContext {
  const Dataset* carriers = nullptr;
  const InstructionTemplate* instruction = nullptr;
};

struct TriggerSearchResult {
  std::vector<TriggerCandidate> candidates;  // S_z: init trigger then one iterate per step
  TriggerCandidate best;                     // lowest loss, earliest on ties
};

TriggerSearchResult optimize_trigger(const MoEModel& model, const RoutingTarget& v,
                                     const TriggerSearchParams& params,
                                     const TriggerContext& context = {});

// Perplexity of a trigger on its own. Single tokens use the unigram model.
double trigger_perplexity(std::span<const std::size_t> z, const NGramLM& lm);

// argmin loss + beta * |PPL - target_ppl|; ties to lower loss, then earlier
// position in candidates. A NaN perplexity is computed from lm; the winner
// is returned with its perplexity filled in.
TriggerCandidate select_stealthy_trigger(std::span<const TriggerCandidate> candidates, double beta,
                                         double target_ppl, const NGramLM& lm);

// Fraction of carriers where, with z inserted at a uniformly random position,
// every dormant expert is in the top-K at every trigger position of the layer.
double trigger_activation_rate(const MoEModel& model, std::span<const std::size_t> z,
                               const RoutingTarget& v, std::size_t layer, const Dataset& carriers,
                               const InstructionTemplate& instruction, std::uint64_t seed);

struct TriggerArtifact {
  std::vector<std::size_t> tokens;
  double loss = 0.0;
  double perplexity = 0.0;
  double target_ppl = 0.0;
  std::size_t layer = 0;
  std::vector<std::size_t> dormant;
  TriggerSearchParams params;
};

std::string trigger_json(const TriggerArtifact& artifact, const Vocabulary& vocab);
TriggerArtifact parse_trigger_json(const std::string& text);

}  // namespace moelab
