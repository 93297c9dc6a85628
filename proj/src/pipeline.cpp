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

#include "moelab/pipeline.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <boost/crc.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "moelab/checkpoint.hpp"
#include "moelab/error.hpp"
#include "moelab/eval.hpp"
#include "moelab/ngram.hpp"
#include "moelab/probe.hpp"

namespace moelab {

using nlohmann::json;
namespace fs = std::filesystem;

ExperimentConfig::ExperimentConfig() {
  pretrain.optimizer = OptimizerKind::kAdam;
  pretrain.learning_rate = 0.003;
  pretrain.epochs = 3;
  train.optimizer = OptimizerKind::kAdam;
  train.learning_rate = 0.001;
  train.epochs = 8;
  trigger.iterations = 128;
  trigger.batch = 64;
  trigger.top_k = 64;
  trigger.context_batch = 8;
}

namespace {

// ---------------------------------------------------------------------------
// Config fields

std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(OptimizerKind v) { return v == OptimizerKind::kAdam ? "adam" : "sgd"; }
std::string format_value(InsertPolicy v) { return v == InsertPolicy::kFixedPosition ? "fixed" : "random"; }
std::string format_value(AttackMask v) { return v == AttackMask::kAllExperts ? "all_experts" : "dormant"; }
std::string format_value(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_value(v[i]);
  return out;
}

[[noreturn]] void bad_value(const std::string& where, const std::string& text, const char* expected) {
  throw ConfigError(where + ": expected " + expected + ", got '" + text + "'");
}

void parse_into(std::size_t& out, const std::string& s, const std::string& where) {
  unsigned long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(where, s, "a non-negative integer");
  out = static_cast<std::size_t>(v);
}
void parse_into(double& out, const std::string& s, const std::string& where) {
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(out)) bad_value(where, s, "a finite number");
}
void parse_into(bool& out, const std::string& s, const std::string& where) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
  } else if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
  } else {
    bad_value(where, s, "true or false");
  }
}
void parse_into(OptimizerKind& out, const std::string& s, const std::string& where) {
  if (s == "adam") {
    out = OptimizerKind::kAdam;
  } else if (s == "sgd") {
    out = OptimizerKind::kSgd;
  } else {
    bad_value(where, s, "sgd or adam");
  }
}
void parse_into(InsertPolicy& out, const std::string& s, const std::string& where) {
  if (s == "random") {
    out = InsertPolicy::kRandomPosition;
  } else if (s == "fixed") {
    out = InsertPolicy::kFixedPosition;
  } else {
    bad_value(where, s, "random or fixed");
  }
}
void parse_into(AttackMask& out, const std::string& s, const std::string& where) {
  if (s == "dormant") {
    out = AttackMask::kDormant;
  } else if (s == "all_experts") {
    out = AttackMask::kAllExperts;
  } else {
    bad_value(where, s, "dormant or all_experts");
  }
}
void parse_into(std::vector<double>& out, const std::string& s, const std::string& where) {
  out.clear();
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    double v = 0.0;
    parse_into(v, item, where);
    out.push_back(v);
  }
  if (out.empty()) bad_value(where, s, "a comma-separated list of numbers");
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class Access>
Field field(std::string section, std::string key, Access access) {
  const std::string where = section + "." + key;
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return format_value(access(c)); },
          [access, where](ExperimentConfig& c, const std::string& s) { parse_into(access(c), s, where); }};
}

void corpus_fields(std::vector<Field>& f, const std::string& s, CorpusSpec ExperimentConfig::*which) {
  f.push_back(field(s, "vocab_size", [which](auto& c) -> auto& { return (c.*which).vocab_size; }));
  f.push_back(field(s, "n_classes", [which](auto& c) -> auto& { return (c.*which).n_classes; }));
  f.push_back(field(s, "train_samples", [which](auto& c) -> auto& { return (c.*which).train_samples; }));
  f.push_back(field(s, "test_samples", [which](auto& c) -> auto& { return (c.*which).test_samples; }));
  f.push_back(field(s, "min_length", [which](auto& c) -> auto& { return (c.*which).min_length; }));
  f.push_back(field(s, "max_length", [which](auto& c) -> auto& { return (c.*which).max_length; }));
  f.push_back(field(s, "lexicon_size", [which](auto& c) -> auto& { return (c.*which).lexicon_size; }));
  f.push_back(field(s, "max_signal", [which](auto& c) -> auto& { return (c.*which).max_signal; }));
  f.push_back(field(s, "noise_branching", [which](auto& c) -> auto& { return (c.*which).noise_branching; }));
  f.push_back(field(s, "task_noise_fraction", [which](auto& c) -> auto& { return (c.*which).task_noise_fraction; }));
  f.push_back(field(s, "background_samples", [which](auto& c) -> auto& { return (c.*which).background_samples; }));
}

void train_fields(std::vector<Field>& f, const std::string& s, TrainConfig ExperimentConfig::*which) {
  f.push_back(field(s, "optimizer", [which](auto& c) -> auto& { return (c.*which).optimizer; }));
  f.push_back(field(s, "learning_rate", [which](auto& c) -> auto& { return (c.*which).learning_rate; }));
  f.push_back(field(s, "epochs", [which](auto& c) -> auto& { return (c.*which).epochs; }));
  f.push_back(field(s, "batch_size", [which](auto& c) -> auto& { return (c.*which).batch_size; }));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    corpus_fields(f, "corpus", &ExperimentConfig::corpus);
    f.push_back(field("model", "d_model", [](auto& c) -> auto& { return c.model.d_model; }));
    f.push_back(field("model", "n_layers", [](auto& c) -> auto& { return c.model.n_layers; }));
    f.push_back(field("model", "n_experts", [](auto& c) -> auto& { return c.model.n_experts; }));
    f.push_back(field("model", "top_k", [](auto& c) -> auto& { return c.model.top_k; }));
    f.push_back(field("model", "expert_hidden", [](auto& c) -> auto& { return c.model.expert_hidden; }));
    f.push_back(field("model", "max_seq_len", [](auto& c) -> auto& { return c.model.max_seq_len; }));
    train_fields(f, "pretrain", &ExperimentConfig::pretrain);
    f.push_back(field("probe", "samples", [](auto& c) -> auto& { return c.probe_samples; }));
    f.push_back(field("probe", "n_active", [](auto& c) -> auto& { return c.n_active; }));
    f.push_back(field("probe", "layer", [](auto& c) -> auto& { return c.layer; }));
    f.push_back(field("trigger", "n_tokens", [](auto& c) -> auto& { return c.trigger.n_tokens; }));
    f.push_back(field("trigger", "iterations", [](auto& c) -> auto& { return c.trigger.iterations; }));
    f.push_back(field("trigger", "batch", [](auto& c) -> auto& { return c.trigger.batch; }));
    f.push_back(field("trigger", "top_k", [](auto& c) -> auto& { return c.trigger.top_k; }));
    f.push_back(field("trigger", "beta", [](auto& c) -> auto& { return c.trigger.beta; }));
    f.push_back(field("trigger", "context_batch", [](auto& c) -> auto& { return c.trigger.context_batch; }));
    f.push_back(field("trigger", "exclude_task_tokens", [](auto& c) -> auto& { return c.exclude_task_tokens; }));
    f.push_back(field("trigger", "heldout_carriers", [](auto& c) -> auto& { return c.heldout_carriers; }));
    f.push_back(field("trigger", "lm_add_k", [](auto& c) -> auto& { return c.lm_add_k; }));
    f.push_back(field("poison", "target_label", [](auto& c) -> auto& { return c.target_label; }));
    f.push_back(field("poison", "rate", [](auto& c) -> auto& { return c.poison_rate; }));
    f.push_back(field("poison", "insert_policy", [](auto& c) -> auto& { return c.insert_policy; }));
    f.push_back(field("poison", "fixed_position", [](auto& c) -> auto& { return c.fixed_position; }));
    train_fields(f, "train", &ExperimentConfig::train);
    f.push_back(field("train", "poison_weight", [](auto& c) -> auto& { return c.train.poison_weight; }));
    f.push_back(field("train", "mask", [](auto& c) -> auto& { return c.mask; }));
    f.push_back(field("train", "control", [](auto& c) -> auto& { return c.control; }));
    f.push_back(field("train", "badnet", [](auto& c) -> auto& { return c.badnet; }));
    f.push_back(field("deploy", "enabled", [](auto& c) -> auto& { return c.transfer; }));
    corpus_fields(f, "deploy", &ExperimentConfig::deploy);
    f.push_back(field("defense", "onion", [](auto& c) -> auto& { return c.defense.onion; }));
    f.push_back(field("defense", "onion_quantile", [](auto& c) -> auto& { return c.defense.onion_quantile; }));
    f.push_back(field("defense", "fine_tune", [](auto& c) -> auto& { return c.defense.fine_tune; }));
    f.push_back(field("defense", "fine_tune_epochs", [](auto& c) -> auto& { return c.defense.fine_tune_epochs; }));
    f.push_back(field("defense", "fine_prune", [](auto& c) -> auto& { return c.defense.fine_prune; }));
    f.push_back(field("defense", "prune_fraction", [](auto& c) -> auto& { return c.defense.prune_fraction; }));
    f.push_back(field("defense", "template_swap", [](auto& c) -> auto& { return c.template_swap; }));
    f.push_back(field("audit", "hidden_state", [](auto& c) -> auto& { return c.audit.hidden_state; }));
    f.push_back(field("audit", "ppd", [](auto& c) -> auto& { return c.audit.ppd; }));
    f.push_back(field("audit", "samples", [](auto& c) -> auto& { return c.audit.samples; }));
    f.push_back(field("experiment", "seed", [](auto& c) -> auto& { return c.seed; }));
    return f;
  }();
  return all;
}

std::string experiment_ini(const ExperimentConfig& c, bool with_out) {
  std::ostringstream out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << f.get(c) << '\n';
  }
  if (with_out) out << "out = " << c.out_dir.string() << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Artifacts

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw FormatError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

json curves_json(const TrainCurves& c) {
  return {{"loss", c.loss}, {"clean_loss", c.clean_loss}, {"poison_loss", c.poison_loss}};
}

json metrics_json(const MetricsReport& m, bool with_log) {
  json j = {{"ca", m.ca},
            {"asr", m.asr},
            {"clean_total", m.clean_total},
            {"clean_correct", m.clean_correct},
            {"poisoned_total", m.poisoned_total},
            {"poisoned_hits", m.poisoned_hits},
            {"class_total", m.class_total},
            {"class_correct", m.class_correct}};
  if (with_log) {
    json log = json::array();
    for (const PredictionRecord& p : m.log) log.push_back({p.index, p.label, p.predicted, p.poisoned ? 1 : 0});
    j["log"] = std::move(log);
    j["log_fields"] = {"index", "label", "predicted", "poisoned"};
  }
  return j;
}

std::vector<std::size_t> token_list(const json& j) { return j.get<std::vector<std::size_t>>(); }

std::string format_ppd(double p) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << p;
  return out.str();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Runner

class Runner {
 public:
  explicit Runner(const ExperimentConfig& config)
      : cfg_(config), seeds_(derive_stage_seeds(config.seed)), out_(config.out_dir) {}

  json run(Stage until) {
    claim_output_dir();
    report_ = {{"config_hash", config_hash(cfg_)}, {"seed", cfg_.seed}, {"seeds", seeds_json()}};
    try {
      stage("generate", [&] { generate(); });
      if (until >= Stage::kPretrain) stage("pretrain", [&] { pretrain(); });
      if (until >= Stage::kProbe) stage("probe", [&] { probe(); });
      if (until >= Stage::kTrigger) stage("trigger", [&] { trigger(); });
      if (until >= Stage::kPoison) stage("poison", [&] { poison(); });
      if (until >= Stage::kTrain) stage("train", [&] { train(); });
      if (until >= Stage::kEval) stage("eval", [&] { eval(); });
      if (until >= Stage::kDefend) stage("defend", [&] { defend(); });
      if (until >= Stage::kReport) stage("transfer", [&] { transfer(); });
    } catch (...) {
      write_text(out_ / "report.json", report_.dump(2) + "\n");
      throw;
    }
    write_text(out_ / "report.json", report_.dump(2) + "\n");
    return report_;
  }

 private:
  json seeds_json() const {
    return {{"corpus", seeds_.corpus},   {"deploy", seeds_.deploy}, {"model", seeds_.model},
            {"pretrain", seeds_.pretrain}, {"probe", seeds_.probe},   {"trigger", seeds_.trigger},
            {"poison", seeds_.poison},   {"train", seeds_.train},   {"eval", seeds_.eval},
            {"defense", seeds_.defense}, {"audit", seeds_.audit}};
  }

  void claim_output_dir() {
    const fs::path manifest = out_ / "manifest.json";
    const std::string hash = config_hash(cfg_);
    if (fs::exists(manifest)) {
      const json m = read_json(manifest);
      if (m.value("config_hash", "") != hash)
        throw ConfigError(out_.string() + " holds artifacts of a different configuration (hash " +
                          m.value("config_hash", "?") + ", this run " + hash + "); choose another --out");
      spdlog::info("resuming in {}", out_.string());
    }
    write_text(out_ / "config.ini", experiment_config_ini(cfg_));
    write_text(manifest, json{{"config_hash", hash}}.dump(2) + "\n");
  }

  template <class F>
  void stage(const char* name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    spdlog::info("stage {}", name);
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const ConfigError& e) {
      throw StageError(name, e.what(), true);
    } catch (const FormatError& e) {
      throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
      throw StageError(name, e.what(), false);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("stage {} done in {:.1f}s", name, secs);
  }

  // Loads stages/<name>.json when a previous run completed the stage,
  // otherwise computes and stores it. The sidecar is written last, so its
  // presence means every other artifact of the stage is on disk.
  template <class F>
  json resumable(const std::string& name, F&& compute) {
    const fs::path path = out_ / "stages" / (name + ".json");
    if (fs::exists(path)) {
      spdlog::debug("{}: reusing {}", name, path.string());
      return read_json(path);
    }
    json j = compute();
    write_text(path, j.dump(2) + "\n");
    return j;
  }

  MoEModel load_model(const std::string& name) { return load_checkpoint(out_ / "models" / (name + ".ckpt")); }
  void save_model(const MoEModel& m, const std::string& name) {
    fs::create_directories(out_ / "models");
    save_checkpoint(m, out_ / "models" / (name + ".ckpt"));
  }

  Dataset probe_sample() const { return sample_subset(corpus_->train, cfg_.probe_samples, seeds_.probe); }

  const NGramLM& lm() {
    if (!lm_) {
      auto seqs = token_sequences(corpus_->train);
      seqs.insert(seqs.end(), corpus_->background.begin(), corpus_->background.end());
      lm_ = fit_ngram_lm(seqs, corpus_->spec.vocab_size, cfg_.lm_add_k);
    }
    return *lm_;
  }

  // --- stages ---------------------------------------------------------------

  void generate() {
    CorpusSpec cs = cfg_.corpus;
    cs.seed = seeds_.corpus;
    corpus_ = generate_corpus(cs);
    const std::size_t overhead = std::max(corpus_->primary.overhead(), corpus_->alternate.overhead());
    if (cs.max_length + cfg_.trigger.n_tokens + overhead > cfg_.model.max_seq_len)
      throw ConfigError("model.max_seq_len " + std::to_string(cfg_.model.max_seq_len) +
                        " cannot hold corpus.max_length + trigger.n_tokens + template overhead (" +
                        std::to_string(cs.max_length + cfg_.trigger.n_tokens + overhead) + ")");
    const fs::path data = out_ / "data";
    report_["corpus"] = resumable("generate", [&] {
      fs::create_directories(data);
      save_dataset(corpus_->train, corpus_->vocab, data / "train.jsonl");
      save_dataset(corpus_->test, corpus_->vocab, data / "test.jsonl");
      Dataset bg;
      for (const auto& s : corpus_->background) bg.push_back({s, 0, false});
      save_dataset(bg, corpus_->vocab, data / "background.jsonl");
      return json{{"vocab_size", cs.vocab_size},
                  {"train", corpus_->train.size()},
                  {"test", corpus_->test.size()},
                  {"background", corpus_->background.size()},
                  {"noise_pool", corpus_->noise_pool.size()},
                  {"task_pool", corpus_->task_pool.size()},
                  {"templates", {corpus_->primary.name, corpus_->alternate.name}}};
    });
    // Later stages read the datasets back so a resumed run uses exactly the
    // stored splits.
    corpus_->train = load_dataset(data / "train.jsonl");
    corpus_->test = load_dataset(data / "test.jsonl");
  }

  void pretrain() {
    report_["pretrain"] = resumable("pretrain", [&] {
      ModelConfig mc = cfg_.model;
      mc.vocab_size = corpus_->spec.vocab_size;
      mc.seed = seeds_.model;
      std::vector<std::vector<std::size_t>> seqs;
      for (const Sample& s : corpus_->train) seqs.push_back(corpus_->primary.render(s.tokens));
      seqs.insert(seqs.end(), corpus_->background.begin(), corpus_->background.end());
      TrainConfig pc = cfg_.pretrain;
      pc.seed = seeds_.pretrain;
      TrainResult r = pretrain_lm(init_model(mc), seqs, pc);
      save_model(r.model, "pretrained");
      write_text(out_ / "curves" / "pretrain.csv", curves_csv(r.curves));
      return json{{"sequences", seqs.size()}, {"curves", curves_json(r.curves)}, {"checksum", r.model.checksum()}};
    });
    pretrained_ = load_model("pretrained");
  }

  void probe() {
    report_["probe"] = resumable("probe", [&] {
      const Dataset sample = probe_sample();
      const auto profiles = profile_all_layers(*pretrained_, sample, corpus_->primary);
      if (cfg_.layer >= profiles.size()) throw ConfigError("probe.layer is out of range");
      const auto dormant = select_dormant(profiles[cfg_.layer], cfg_.n_active);
      write_text(out_ / "probe" / "usage.csv", usage_csv(profiles));
      json layers = json::array();
      for (const UsageProfile& p : profiles) layers.push_back({{"layer", p.layer}, {"usage", p.usage}});
      return json{{"samples", sample.size()}, {"layer", cfg_.layer}, {"layers", layers}, {"dormant", dormant}};
    });
    dormant_ = token_list(report_["probe"]["dormant"]);
  }

  std::vector<std::size_t> trigger_exclusions() const {
    std::vector<std::size_t> ex = corpus_->non_noise_tokens();
    ex.erase(std::remove(ex.begin(), ex.end(), kInitToken), ex.end());
    if (cfg_.exclude_task_tokens) ex.insert(ex.end(), corpus_->task_pool.begin(), corpus_->task_pool.end());
    std::sort(ex.begin(), ex.end());
    ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
    return ex;
  }

  Dataset heldout_carriers() const { return sample_subset(corpus_->test, cfg_.heldout_carriers, seeds_.eval); }

  void trigger() {
    report_["trigger"] = resumable("trigger", [&] {
      TriggerSearchParams tp = cfg_.trigger;
      tp.layer = cfg_.layer;
      tp.seed = seeds_.trigger;
      tp.excluded = trigger_exclusions();
      const RoutingTarget v = build_routing_target(dormant_, cfg_.model.n_experts);
      const TriggerSearchResult search = optimize_trigger(*pretrained_, v, tp, {&corpus_->train, &corpus_->primary});
      const double target_ppl = estimate_target_ppl(token_sequences(corpus_->train), lm(), 800, seeds_.trigger);
      const TriggerCandidate chosen = select_stealthy_trigger(search.candidates, tp.beta, target_ppl, lm());

      TriggerArtifact art{chosen.tokens, chosen.loss, chosen.perplexity, target_ppl, cfg_.layer, dormant_, tp};
      write_text(out_ / "trigger.json", trigger_json(art, corpus_->vocab));

      std::vector<double> trajectory;
      bool monotone = true;
      for (const TriggerCandidate& c : search.candidates) {
        if (!trajectory.empty() && c.loss > trajectory.back()) monotone = false;
        trajectory.push_back(c.loss);
      }
      std::vector<std::string> surface;
      for (std::size_t t : chosen.tokens) surface.push_back(corpus_->vocab.surface[t]);
      const Dataset held = heldout_carriers();
      return json{
          {"tokens", chosen.tokens},
          {"surface", surface},
          {"iteration", chosen.iteration},
          {"loss", chosen.loss},
          {"perplexity", chosen.perplexity},
          {"target_ppl", target_ppl},
          {"best_tokens", search.best.tokens},
          {"initial_loss", trajectory.front()},
          {"final_loss", search.best.loss},
          {"loss_trajectory", trajectory},
          {"monotone", monotone},
          {"isolation_initial_loss", routing_loss(*pretrained_, search.candidates.front().tokens, v, cfg_.layer)},
          {"isolation_loss", routing_loss(*pretrained_, chosen.tokens, v, cfg_.layer)},
          {"isolation_activation",
           [&] {
             const ForwardResult r = model_forward(*pretrained_, chosen.tokens);
             bool all = true;
             for (std::size_t t = 0; t < chosen.tokens.size(); ++t)
               for (std::size_t e : dormant_) all = all && r.trace.layers[cfg_.layer].is_selected(t, e);
             return all;
           }()},
          {"heldout_carriers", held.size()},
          {"heldout_activation",
           trigger_activation_rate(*pretrained_, chosen.tokens, v, cfg_.layer, held, corpus_->primary, seeds_.eval)},
          {"excluded_tokens", tp.excluded.size()}};
    });
    trigger_ = token_list(report_["trigger"]["tokens"]);
  }

  void poison() {
    const fs::path path = out_ / "data" / "poisoned_train.jsonl";
    report_["poison"] = resumable("poison", [&] {
      PoisonSpec ps{trigger_, cfg_.target_label, cfg_.poison_rate, cfg_.insert_policy, cfg_.fixed_position};
      const Dataset d = poison_dataset(corpus_->train, ps, seeds_.poison);
      save_dataset(d, corpus_->vocab, path);
      const auto n = std::count_if(d.begin(), d.end(), [](const Sample& s) { return s.poisoned; });
      return json{{"rate", cfg_.poison_rate}, {"poisoned", n}, {"samples", d.size()},
                  {"target_label", cfg_.target_label}};
    });
  }

  FreezeMask attack_mask() const {
    return cfg_.mask == AttackMask::kAllExperts ? all_experts_mask(*pretrained_, cfg_.layer)
                                                : build_freeze_mask(*pretrained_, {cfg_.layer, dormant_});
  }

  json train_one(const std::string& name, const Dataset& data, const FreezeMask& mask) {
    TrainConfig tc = cfg_.train;
    tc.seed = seeds_.train;
    const std::uint32_t before = frozen_checksum(*pretrained_, mask);
    TrainResult r = train_classifier(*pretrained_, data, corpus_->primary, mask, tc);
    const std::uint32_t after = frozen_checksum(r.model, mask);
    save_model(r.model, name);
    write_text(out_ / "curves" / (name + ".csv"), curves_csv(r.curves));
    return json{{"curves", curves_json(r.curves)},
                {"trainable_tensors", mask.trainable_count()},
                {"frozen_checksum_before", before},
                {"frozen_checksum_after", after},
                {"frozen_intact", before == after},
                {"checksum", r.model.checksum()}};
  }

  void train() {
    const FreezeMask mask = attack_mask();
    report_["attack"] = resumable("attack", [&] {
      json j = train_one("backdoored", load_dataset(out_ / "data" / "poisoned_train.jsonl"), mask);
      j["mask"] = format_value(cfg_.mask);
      j["experts"] = cfg_.mask == AttackMask::kAllExperts ? json("all") : json(dormant_);
      j["layer"] = cfg_.layer;
      return j;
    });
    backdoored_ = load_model("backdoored");
    if (cfg_.control) {
      report_["control"] = resumable("control", [&] { return train_one("control", corpus_->train, mask); });
      control_ = load_model("control");
    }
    if (cfg_.badnet) {
      report_["badnet"] = resumable("badnet", [&] {
        const Dataset bn = badnet_baseline(corpus_->train, kRareToken, corpus_->spec.vocab_size, cfg_.target_label,
                                           cfg_.poison_rate, seeds_.poison);
        save_dataset(bn, corpus_->vocab, out_ / "data" / "badnet_train.jsonl");
        json j = train_one("badnet", bn, mask);
        j["trigger"] = corpus_->vocab.surface[kRareToken];
        return j;
      });
      badnet_ = load_model("badnet");
    }
  }

  const Dataset& triggered_test() {
    if (!triggered_) {
      triggered_ = triggered_test_set(corpus_->test, trigger_, cfg_.target_label, seeds_.eval);
      const fs::path path = out_ / "data" / "triggered_test.jsonl";
      if (!fs::exists(path)) save_dataset(*triggered_, corpus_->vocab, path);
    }
    return *triggered_;
  }

  MetricsReport evaluate_main(const MoEModel& m, const InstructionTemplate& tpl) {
    return evaluate(m, corpus_->test, triggered_test(), tpl, cfg_.target_label);
  }

  void eval() {
    report_["metrics"] = resumable("eval", [&] {
      json j;
      const MetricsReport attack = evaluate_main(*backdoored_, corpus_->primary);
      j["backdoored"] = metrics_json(attack, true);
      if (control_) {
        const MetricsReport ctl = evaluate_main(*control_, corpus_->primary);
        j["control"] = metrics_json(ctl, true);
        j["ca_gap"] = ctl.ca - attack.ca;
      }
      if (badnet_) {
        const std::vector<std::size_t> rare{kRareToken};
        const Dataset trig = triggered_test_set(corpus_->test, rare, cfg_.target_label, seeds_.eval);
        j["badnet"] = metrics_json(evaluate(*badnet_, corpus_->test, trig, corpus_->primary, cfg_.target_label), true);
      }
      if (cfg_.template_swap) {
        j["template_swap"]["template"] = corpus_->alternate.name;
        j["template_swap"]["backdoored"] = metrics_json(evaluate_main(*backdoored_, corpus_->alternate), true);
        if (control_)
          j["template_swap"]["control"] = metrics_json(evaluate_main(*control_, corpus_->alternate), true);
      }
      return j;
    });
    report_["stealth"] = resumable("stealth", [&] {
      const Dataset sample = probe_sample();
      const UsageProfile pre = profile_usage(*pretrained_, sample, corpus_->primary, cfg_.layer);
      const UsageProfile post = profile_usage(*backdoored_, sample, corpus_->primary, cfg_.layer);
      const StealthVerdict clean = usage_verdict(post, dormant_);
      const StealthVerdict trig = expert_usage_audit(*backdoored_, heldout_carriers(), trigger_, corpus_->primary,
                                                     cfg_.layer, dormant_, seeds_.audit);
      json flags = json::array();
      for (bool b : clean.at_or_below_median) flags.push_back(b);
      return json{{"layer", cfg_.layer},
                  {"dormant", dormant_},
                  {"pre_attack_usage", pre.usage},
                  {"post_attack_usage", post.usage},
                  {"median", clean.median},
                  {"at_or_below_median", flags},
                  {"stealthy", clean.stealthy()},
                  {"triggered_usage", trig.usage},
                  {"triggered_median", trig.median},
                  {"trigger_activation", trig.trigger_activation}};
    });
  }

  void defend() {
    const json before = [&] {
      json m = report_["metrics"]["backdoored"];
      m.erase("log");
      m.erase("log_fields");
      return m;
    }();
    json defenses = json::object();
    if (cfg_.defense.onion) {
      defenses["onion"] = resumable("onion", [&] {
        const double threshold = onion_default_threshold(probe_sample(), lm(), cfg_.defense.onion_quantile);
        const Dataset clean = onion_filter_dataset(corpus_->test, lm(), threshold);
        const Dataset trig = onion_filter_dataset(triggered_test(), lm(), threshold);
        const MetricsReport after = evaluate(*backdoored_, clean, trig, corpus_->primary, cfg_.target_label);
        return json{{"threshold", threshold}, {"quantile", cfg_.defense.onion_quantile}, {"before", before},
                    {"after", metrics_json(after, true)}};
      });
    }
    if (cfg_.defense.fine_tune) {
      defenses["fine_tune"] = resumable("fine_tune", [&] {
        TrainConfig tc = cfg_.train;
        tc.epochs = cfg_.defense.fine_tune_epochs;
        tc.seed = seeds_.defense;
        const TrainResult r = fine_tune_defense(*backdoored_, corpus_->train, corpus_->primary, tc);
        save_model(r.model, "fine_tuned");
        return json{{"epochs", tc.epochs}, {"before", before}, {"curves", curves_json(r.curves)},
                    {"after", metrics_json(evaluate_main(r.model, corpus_->primary), true)}};
      });
    }
    if (cfg_.defense.fine_prune) {
      defenses["fine_prune"] = resumable("fine_prune", [&] {
        const Dataset sample = probe_sample();
        const PruneResult zero = fine_prune(*backdoored_, sample, corpus_->primary, 0.0);
        const PruneResult r = fine_prune(*backdoored_, sample, corpus_->primary, cfg_.defense.prune_fraction);
        save_model(r.model, "fine_pruned");
        std::size_t dormant_units = 0;
        for (const HiddenUnit& u : r.pruned)
          dormant_units += u.layer == cfg_.layer && std::find(dormant_.begin(), dormant_.end(), u.expert) != dormant_.end();
        return json{{"fraction", cfg_.defense.prune_fraction},
                    {"pruned_units", r.pruned.size()},
                    {"pruned_in_adversarial_experts", dormant_units},
                    {"zero_fraction_unchanged", zero.model.checksum() == backdoored_->checksum()},
                    {"before", before},
                    {"after", metrics_json(evaluate_main(r.model, corpus_->primary), true)}};
      });
    }
    report_["defenses"] = defenses;
    if (cfg_.audit.hidden_state) {
      report_["audit"] = resumable("audit", [&] {
        json rows = json::array();
        for (double p : cfg_.audit.ppd) {
          const Dataset mixed = mix_for_audit(corpus_->test, trigger_, p, cfg_.audit.samples, seeds_.audit);
          const AuditReport a = hidden_state_audit(*backdoored_, mixed, corpus_->primary, cfg_.layer, seeds_.audit);
          write_text(out_ / "audit" / ("features_ppd_" + format_ppd(p) + ".csv"), features_csv(a));
          const auto poisoned = std::count(a.poisoned.begin(), a.poisoned.end(), true);
          rows.push_back({{"ppd", p},
                          {"samples", mixed.size()},
                          {"poisoned", poisoned},
                          {"ch", a.ch.degenerate ? json(nullptr) : json(a.ch.value)},
                          {"between", a.ch.between},
                          {"within", a.ch.within},
                          {"degenerate", a.ch.degenerate}});
        }
        return json{{"layer", cfg_.layer}, {"rows", rows}};
      });
    }
  }

  void transfer() {
    if (!cfg_.transfer) return;
    report_["transfer"] = resumable("transfer", [&] {
      CorpusSpec ds = cfg_.deploy;
      ds.seed = seeds_.deploy;
      if (ds.vocab_size != corpus_->spec.vocab_size) throw ConfigError("deploy.vocab_size must match corpus.vocab_size");
      const Corpus b = generate_corpus(ds);
      const Dataset trig = triggered_test_set(b.test, trigger_, cfg_.target_label, seeds_.eval);
      const MetricsReport zero_shot = evaluate(*backdoored_, b.test, trig, b.primary, cfg_.target_label);
      TrainConfig tc = cfg_.train;
      tc.seed = seeds_.defense;
      const TrainResult tuned = train_classifier(*backdoored_, b.train, b.primary, full_mask(*backdoored_), tc);
      save_model(tuned.model, "deploy_tuned");
      return json{{"train", b.train.size()},
                  {"test", b.test.size()},
                  {"zero_shot", metrics_json(zero_shot, true)},
                  {"fine_tuned", metrics_json(evaluate(tuned.model, b.test, trig, b.primary, cfg_.target_label), true)},
                  {"fine_tune_curves", curves_json(tuned.curves)}};
    });
  }

  ExperimentConfig cfg_;
  StageSeeds seeds_;
  fs::path out_;
  json report_;
  std::optional<Corpus> corpus_;
  std::optional<NGramLM> lm_;
  std::optional<MoEModel> pretrained_, backdoored_, control_, badnet_;
  std::optional<Dataset> triggered_;
  std::vector<std::size_t> dormant_, trigger_;
};

}  // namespace

void ExperimentConfig::validate() const {
  corpus.validate();
  ModelConfig mc = model;
  mc.vocab_size = corpus.vocab_size;
  mc.validate();
  pretrain.validate();
  train.validate();
  trigger.validate();
  if (transfer) {
    deploy.validate();
    if (deploy.vocab_size != corpus.vocab_size) throw ConfigError("deploy.vocab_size must match corpus.vocab_size");
    if (deploy.n_classes != corpus.n_classes) throw ConfigError("deploy.n_classes must match corpus.n_classes");
  }
  if (layer >= model.n_layers) throw ConfigError("probe.layer must be below model.n_layers");
  if (n_active == 0 || n_active >= model.n_experts)
    throw ConfigError("probe.n_active must be between 1 and model.n_experts - 1");
  if (probe_samples == 0 || probe_samples > corpus.train_samples)
    throw ConfigError("probe.samples must be between 1 and corpus.train_samples");
  if (heldout_carriers == 0 || heldout_carriers > corpus.test_samples)
    throw ConfigError("trigger.heldout_carriers must be between 1 and corpus.test_samples");
  if (!(lm_add_k > 0.0)) throw ConfigError("trigger.lm_add_k must be positive");
  if (target_label >= corpus.n_classes) throw ConfigError("poison.target_label must be below corpus.n_classes");
  if (!(poison_rate > 0.0 && poison_rate <= 1.0)) throw ConfigError("poison.rate must be in (0, 1]");
  if (!(defense.onion_quantile >= 0.0 && defense.onion_quantile <= 1.0))
    throw ConfigError("defense.onion_quantile must be in [0, 1]");
  if (!(defense.prune_fraction >= 0.0 && defense.prune_fraction < 1.0))
    throw ConfigError("defense.prune_fraction must be in [0, 1)");
  for (double p : audit.ppd)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("audit.ppd values must be in [0, 1]");
  if (audit.samples < 4 || audit.samples > corpus.test_samples)
    throw ConfigError("audit.samples must be between 4 and corpus.test_samples");
}

ExperimentConfig parse_experiment_config(std::string_view ini) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in{std::string(ini)};
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + e.message() + " at line " + std::to_string(e.line()));
  }
  std::map<std::pair<std::string, std::string>, const Field*> index;
  for (const Field& f : fields()) index[{f.section, f.key}] = &f;
  ExperimentConfig c;
  // Two passes: unset [deploy] corpus keys inherit from [corpus].
  for (const bool deploy_pass : {false, true}) {
    if (deploy_pass) c.deploy = c.corpus;
    for (const auto& [section, body] : tree) {
      if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
      if ((section == "deploy") != deploy_pass) continue;
      for (const auto& [key, value] : body) {
        const std::string v = value.get_value<std::string>();
        if (section == "experiment" && key == "out") {
          c.out_dir = v;
          continue;
        }
        const auto it = index.find({section, key});
        if (it == index.end()) throw ConfigError("config: unknown key " + section + "." + key);
        it->second->set(c, v);
      }
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

std::string experiment_config_ini(const ExperimentConfig& config) { return experiment_ini(config, false); }

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = experiment_config_ini(config);
  boost::crc_32_type crc;
  crc.process_bytes(text.data(), text.size());
  std::ostringstream out;
  out << std::hex << std::setw(8) << std::setfill('0') << crc.checksum();
  return out.str();
}

StageSeeds derive_stage_seeds(std::uint64_t master) {
  std::uint64_t s[11];
  for (std::uint64_t i = 0; i < 11; ++i) s[i] = splitmix64(master * 11 + i);
  return {s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], s[8], s[9], s[10]};
}

json run_pipeline(const ExperimentConfig& config, Stage until) {
  config.validate();
  return Runner(config).run(until);
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "poison_rate") return SweepAxis::kPoisonRate;
  if (name == "n_trigger_tokens") return SweepAxis::kTriggerTokens;
  if (name == "n_active") return SweepAxis::kActiveExperts;
  if (name == "layer") return SweepAxis::kLayer;
  throw ConfigError("unknown sweep axis '" + std::string(name) +
                    "' (expected poison_rate, n_trigger_tokens, n_active or layer)");
}

std::string sweep_axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kPoisonRate: return "poison_rate";
    case SweepAxis::kTriggerTokens: return "n_trigger_tokens";
    case SweepAxis::kActiveExperts: return "n_active";
    case SweepAxis::kLayer: return "layer";
  }
  return "";
}

std::string sweep(const ExperimentConfig& config, SweepAxis axis, std::span<const double> values) {
  std::vector<double> points(values.begin(), values.end());
  if (points.empty()) {
    if (axis != SweepAxis::kLayer) throw ConfigError("sweep needs at least one value");
    for (std::size_t l = 0; l < config.model.n_layers; ++l) points.push_back(static_cast<double>(l));
  }
  const std::string name = sweep_axis_name(axis);
  std::ostringstream csv;
  csv << std::setprecision(17) << name << ",ca,asr\n";
  for (double value : points) {
    ExperimentConfig c = config;
    const auto as_count = [&](double v) {
      if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError(name + " values must be non-negative integers");
      return static_cast<std::size_t>(v);
    };
    switch (axis) {
      case SweepAxis::kPoisonRate: c.poison_rate = value; break;
      case SweepAxis::kTriggerTokens: c.trigger.n_tokens = as_count(value); break;
      case SweepAxis::kActiveExperts: c.n_active = as_count(value); break;
      case SweepAxis::kLayer: c.layer = as_count(value); break;
    }
    c.out_dir = config.out_dir / (name + "_" + format_value(value));
    spdlog::info("sweep {} = {}", name, format_value(value));
    const json report = run_pipeline(c);
    csv << format_value(value) << ',' << format_value(report["metrics"]["backdoored"]["ca"].get<double>()) << ','
        << format_value(report["metrics"]["backdoored"]["asr"].get<double>()) << '\n';
  }
  write_text(config.out_dir / ("sweep_" + name + ".csv"), csv.str());
  return csv.str();
}

void configure_logging() {
  const char* env = std::getenv("MOELAB_LOG_LEVEL");
  const std::string level = env ? env : "info";
  spdlog::level::level_enum lv;
  if (level == "error") {
    lv = spdlog::level::err;
  } else if (level == "info") {
    lv = spdlog::level::info;
  } else if (level == "debug") {
    lv = spdlog::level::debug;
  } else {
    throw ConfigError("MOELAB_LOG_LEVEL must be error, info or debug, got '" + level + "'");
  }
  auto logger = spdlog::get("moelab");
  if (!logger) logger = spdlog::stderr_color_mt("moelab");
  logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(lv);
}

}  // namespace moelab
