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

// Command-line front end: one subcommand per pipeline stage plus the theory
// sweep, ablation sweeps and the full pipeline.

#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/theory.hpp"

namespace {

using moelab::Stage;

constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (INI)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "master seed, overrides [experiment] seed");
  cmd->add_option("--out", c.out, "output directory, overrides [experiment] out");
}

moelab::ExperimentConfig load(const Common& c) {
  moelab::ExperimentConfig cfg = moelab::load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void print_summary(const nlohmann::json& r) {
  if (r.contains("trigger"))
    std::printf("trigger %s  loss %.4f -> %.4f  held-out activation %.3f\n", r["trigger"]["surface"].dump().c_str(),
                r["trigger"]["initial_loss"].get<double>(), r["trigger"]["final_loss"].get<double>(),
                r["trigger"]["heldout_activation"].get<double>());
  if (r.contains("metrics")) {
    for (const char* name : {"backdoored", "control", "badnet"}) {
      if (!r["metrics"].contains(name)) continue;
      std::printf("%-10s CA %.4f  ASR %.4f\n", name, r["metrics"][name]["ca"].get<double>(),
                  r["metrics"][name]["asr"].get<double>());
    }
  }
  if (r.contains("defenses"))
    for (const auto& [name, d] : r["defenses"].items())
      std::printf("defense %-10s CA %.4f -> %.4f  ASR %.4f -> %.4f\n", name.c_str(), d["before"]["ca"].get<double>(),
                  d["after"]["ca"].get<double>(), d["before"]["asr"].get<double>(), d["after"]["asr"].get<double>());
}

int theory_command(const Common& c, const std::vector<double>& scales) {
  moelab::theory::LinearExpertSetup setup;
  setup.w1 = {1.0};
  setup.w2 = {1.0};
  setup.mu = {0.0};
  setup.sigma = {1.0};
  const auto points = moelab::theory::dominance_sweep(setup, scales);
  const std::string csv = moelab::theory::sweep_csv(points);
  if (!c.out.empty()) {
    std::filesystem::create_directories(c.out);
    std::FILE* f = std::fopen((std::filesystem::path(c.out) / "dominance.csv").c_str(), "w");
    if (!f) throw moelab::FormatError("cannot write dominance.csv under " + c.out);
    std::fputs(csv.c_str(), f);
    std::fclose(f);
  }
  std::fputs(csv.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: backdoor experiments on a toy mixture-of-experts language model"};
  app.require_subcommand(1);

  Common common;
  struct StageCommand {
    const char* name;
    const char* help;
    Stage stage;
  };
  const StageCommand stages[] = {
      {"generate", "generate the synthetic task and background corpora", Stage::kGenerate},
      {"pretrain", "clean next-token warmup of the MoE model", Stage::kPretrain},
      {"probe", "profile expert usage and pick the dormant experts", Stage::kProbe},
      {"trigger", "optimize the routing trigger", Stage::kTrigger},
      {"poison", "build the poisoned training set", Stage::kPoison},
      {"train", "train the backdoored model and the baselines", Stage::kTrain},
      {"eval", "CA/ASR, stealth and template-swap evaluation", Stage::kEval},
      {"defend", "ONION, fine-tuning, fine-pruning and the clustering audit", Stage::kDefend},
      {"pipeline", "every stage, including the transfer harness", Stage::kReport},
  };
  std::optional<Stage> chosen;
  for (const StageCommand& s : stages) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, common, true);
    cmd->callback([&chosen, stage = s.stage] { chosen = stage; });
  }

  std::vector<double> scales{1.0, 10.0, 100.0, 1000.0};
  CLI::App* theory = app.add_subcommand("theory", "dominance gap sweep for the one-dimensional linear setup");
  add_common(theory, common, false);
  theory->add_option("--scales", scales, "norms of w1")->delimiter(',');

  std::string axis;
  std::vector<double> values;
  CLI::App* sweep = app.add_subcommand("sweep", "one pipeline run per value of an ablation axis");
  add_common(sweep, common, true);
  sweep->add_option("--axis", axis, "poison_rate, n_trigger_tokens, n_active or layer")->required();
  sweep->add_option("--values", values, "comma-separated values; empty means every layer for the layer axis")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUser;
  }

  try {
    moelab::configure_logging();
    if (theory->parsed()) return theory_command(common, scales);
    const moelab::ExperimentConfig cfg = load(common);
    if (sweep->parsed()) {
      std::fputs(moelab::sweep(cfg, moelab::parse_sweep_axis(axis), values).c_str(), stdout);
      return 0;
    }
    const nlohmann::json report = moelab::run_pipeline(cfg, *chosen);
    print_summary(report);
    std::printf("report: %s\n", (cfg.out_dir / "report.json").c_str());
    return 0;
  } catch (const moelab::StageError& e) {
    spdlog::error("{}", e.what());
    return e.user_fault() ? kExitUser : kExitInternal;
  } catch (const moelab::ConfigError& e) {
    spdlog::error("{}", e.what());
    std::fprintf(stderr, "run '%s --help' for usage\n", argv[0]);
    return kExitUser;
  } catch (const moelab::FormatError& e) {
    spdlog::error("{}", e.what());
    return kExitUser;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kExitInternal;
  }
}
