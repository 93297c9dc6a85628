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

// Experiment configuration, the staged attack pipeline with resumable
// artifacts, and one-axis sweeps over it.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/train.hpp"
#include "moelab/trigger.hpp"

namespace moelab {

enum class AttackMask { kDormant, kAllExperts };

struct DefenseSettings {
  bool onion = true;
  double onion_quantile = 0.95;
  bool fine_tune = true;
  std::size_t fine_tune_epochs = 3;
  bool fine_prune = true;
  double prune_fraction = 0.3;
};

struct AuditSettings {
  bool hidden_state = true;
  std::vector<double> ppd{0.1, 0.3, 0.5, 0.7, 1.0};
  std::size_t samples = 200;
};

// Per-section seeds are not configurable: every stage seed is derived from
// the master seed, so the run is a pure function of this struct.
struct ExperimentConfig {
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig pretrain;
  std::size_t probe_samples = 800;
  std::size_t n_active = 2;
  std::size_t layer = 1;
  TriggerSearchParams trigger;  // layer, seed and exclusions are filled by the pipeline
  bool exclude_task_tokens = true;
  std::size_t heldout_carriers = 200;
  double lm_add_k = 0.1;
  std::size_t target_label = 1;
  double poison_rate = 0.01;
  InsertPolicy insert_policy = InsertPolicy::kRandomPosition;
  std::size_t fixed_position = 0;
  TrainConfig train;
  AttackMask mask = AttackMask::kDormant;
  bool control = true;
  bool badnet = true;
  bool template_swap = true;
  bool transfer = false;
  CorpusSpec deploy;  // seed is derived; every other field is used as given
  DefenseSettings defense;
  AuditSettings audit;
  std::filesystem::path out_dir = "moelab-out";
  std::uint64_t seed = 0;

  ExperimentConfig();
  // Throws ConfigError naming the offending key.
  void validate() const;
};

// INI text with [corpus] [model] [pretrain] [probe] [trigger] [poison] [train]
// [deploy] [defense] [audit] [experiment] sections. Absent keys keep their
// defaults; unknown sections or keys are rejected with ConfigError.
ExperimentConfig parse_experiment_config(std::string_view ini);
// Throws ConfigError when the file is missing or unreadable.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Every setting except the output directory, in a fixed order. Parsing it
// back yields an equal configuration.
std::string experiment_config_ini(const ExperimentConfig& config);
// CRC-32 of experiment_config_ini, as 8 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct StageSeeds {
  std::uint64_t corpus, deploy, model, pretrain, probe, trigger, poison, train, eval, defense, audit;
};
StageSeeds derive_stage_seeds(std::uint64_t master);

enum class Stage { kGenerate, kPretrain, kProbe, kTrigger, kPoison, kTrain, kEval, kDefend, kReport };

// Runs every stage up to and including `until`, reusing the artifact of any
// stage already present in out_dir and writing the rest. Writes report.json
// with the sections reached and returns it. Throws StageError naming the
// failing stage; artifacts of completed stages are kept. Throws ConfigError
// if out_dir holds artifacts of a different configuration.
nlohmann::json run_pipeline(const ExperimentConfig& config, Stage until = Stage::kReport);

enum class SweepAxis { kPoisonRate, kTriggerTokens, kActiveExperts, kLayer };
SweepAxis parse_sweep_axis(std::string_view name);
std::string sweep_axis_name(SweepAxis axis);

// One full pipeline run per value in out_dir/<axis>_<value>; returns the CSV
// "<axis>,ca,asr" with one row per value. An empty value list on the layer
// axis means every layer.
std::string sweep(const ExperimentConfig& config, SweepAxis axis, std::span<const double> values);

// Reads MOELAB_LOG_LEVEL (error, info or debug; default info) into the
// default logger. Throws ConfigError for any other value.
void configure_logging();

}  // namespace moelab
