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

// Data poisoning, parameter freezing and supervised fine-tuning of the
// classifier head, plus the next-token warmup that precedes probing.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

enum class InsertPolicy { kRandomPosition, kFixedPosition };

struct PoisonSpec {
  std::vector<std::size_t> trigger;
  std::size_t target_label = 0;
  double rate = 0.01;
  InsertPolicy policy = InsertPolicy::kRandomPosition;
  std::size_t fixed_position = 0;  // clamped to the input length
};

// Picks floor(rate * |D|) samples without replacement, inserts the trigger
// once and relabels them; all other samples are copied untouched. Throws
// ContractError if that count is zero, RangeError for rate outside (0, 1].
Dataset poison_dataset(const Dataset& data, const PoisonSpec& spec, std::uint64_t seed);

// Same poisoning with a fixed rare token and no optimization. Throws
// RangeError if the token is outside the vocabulary.
Dataset badnet_baseline(const Dataset& data, std::size_t rare_token, std::size_t vocab_size,
                        std::size_t target_label, double rate, std::uint64_t seed);

// Every test sample not already labeled target_label, with the trigger at a
// random position. Labels keep their clean value; poisoned is set.
Dataset triggered_test_set(const Dataset& clean, std::span<const std::size_t> trigger,
                           std::size_t target_label, std::uint64_t seed);

struct FreezeSpec {
  std::size_t layer = 0;
  std::vector<std::size_t> experts;
};

// Per-parameter trainable flags in registry order.
struct FreezeMask {
  std::vector<std::string> names;
  std::vector<bool> trainable;

  std::size_t trainable_count() const;
};

// Non-expert, non-router parameters plus the listed experts of one layer.
// Throws ContractError for an empty or duplicated expert list and RangeError
// for out-of-range ids.
FreezeMask build_freeze_mask(const MoEModel& model, const FreezeSpec& spec);
// Like build_freeze_mask with every expert of the layer trainable.
FreezeMask all_experts_mask(const MoEModel& model, std::size_t layer);
FreezeMask full_mask(const MoEModel& model);
void apply_mask(MoEModel& model, const FreezeMask& mask);

// CRC-32 over the frozen parameters only.
std::uint32_t frozen_checksum(const MoEModel& model, const FreezeMask& mask);

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double poison_weight = 1.0;  // lambda
  OptimizerKind optimizer = OptimizerKind::kSgd;

  void validate() const;
};

struct TrainCurves {
  std::vector<double> loss;         // mean per-sample loss per epoch, unweighted
  std::vector<double> clean_loss;   // NaN when an epoch has no clean sample
  std::vector<double> poison_loss;  // NaN when an epoch has no poisoned sample
};

struct TrainResult {
  MoEModel model;
  TrainCurves curves;
};

// Cross-entropy over the full vocabulary at the final position of the
// rendered input, with the label's verbalizer as the target. Poisoned samples
// are weighted by poison_weight. Frozen parameters are never written.
// Throws NumericError naming the epoch and batch on divergence.
TrainResult train_classifier(const MoEModel& initial, const Dataset& data,
                             const InstructionTemplate& instruction, const FreezeMask& mask,
                             const TrainConfig& config);

// Next-token warmup over every position of each sequence with all parameters
// trainable.
TrainResult pretrain_lm(const MoEModel& initial, std::span<const std::vector<std::size_t>> sequences,
                        const TrainConfig& config);

// epoch,loss,clean_loss,poison_loss
std::string curves_csv(const TrainCurves& curves);

}  // namespace moelab
