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

// Expert usage on clean data, dormant expert selection and the binary routing
// target that the trigger search aims at.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

// usage[i] is the fraction of tokens routed to expert i, averaged first
// within each sample and then across samples, so sum(usage) == K.
struct UsageProfile {
  std::size_t layer = 0;
  std::size_t top_k = 0;
  std::vector<double> usage;
  std::size_t n_samples = 0;
  std::size_t n_tokens = 0;
};

// Accumulates per-sample routing at one layer.
class UsageCounter {
 public:
  UsageCounter(std::size_t layer, std::size_t n_experts, std::size_t top_k);
  void add(const LayerRouting& routing);
  // Throws ContractError when no sample has been added.
  UsageProfile finish() const;

 private:
  UsageProfile profile_;
  std::vector<double> sums_;
};

// Routes every sequence through the model (as given, no template applied).
UsageProfile profile_usage(const MoEModel& model, std::span<const std::vector<std::size_t>> sequences,
                           std::size_t layer);
// Renders each sample with the instruction first.
UsageProfile profile_usage(const MoEModel& model, const Dataset& sample,
                           const InstructionTemplate& instruction, std::size_t layer);
// One profile per layer, sharing forwards.
std::vector<UsageProfile> profile_all_layers(const MoEModel& model, const Dataset& sample,
                                             const InstructionTemplate& instruction);

// The n_a least used experts, sorted ascending by (usage, index).
std::vector<std::size_t> select_dormant(const UsageProfile& profile, std::size_t n_a);

struct RoutingTarget {
  std::vector<double> v;               // 1 at dormant experts, 0 elsewhere
  std::vector<std::size_t> dormant;    // as given to build_routing_target
  std::size_t n_active() const { return dormant.size(); }
};

RoutingTarget build_routing_target(std::span<const std::size_t> dormant, std::size_t n_experts);

// Without replacement, order preserved from a seeded shuffle; all of data if
// count >= data.size().
Dataset sample_subset(const Dataset& data, std::size_t count, std::uint64_t seed);

// layer,expert,usage
std::string usage_csv(std::span<const UsageProfile> profiles);

}  // namespace moelab
