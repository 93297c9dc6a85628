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

#include "moelab/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <boost/crc.hpp>

#include "moelab/error.hpp"

namespace moelab {

namespace {

Dataset poison_with(const Dataset& data, std::span<const std::size_t> trigger, std::size_t target,
                    double rate, InsertPolicy policy, std::size_t fixed_position, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw RangeError("poison rate must be in (0, 1]");
  if (trigger.empty()) throw ContractError("poisoning needs a non-empty trigger");
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(data.size())));
  if (count == 0)
    throw ContractError("poison rate " + std::to_string(rate) + " selects no sample out of " +
                        std::to_string(data.size()));
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  Dataset out = data;
  for (std::size_t i : idx) {
    Sample& s = out[i];
    std::size_t pos = std::min(fixed_position, s.tokens.size());
    if (policy == InsertPolicy::kRandomPosition) {
      std::uniform_int_distribution<std::size_t> d(0, s.tokens.size());
      pos = d(rng);
    }
    s.tokens.insert(s.tokens.begin() + static_cast<std::ptrdiff_t>(pos), trigger.begin(), trigger.end());
    s.label = target;
    s.poisoned = true;
  }
  return out;
}

}  // namespace

Dataset poison_dataset(const Dataset& data, const PoisonSpec& spec, std::uint64_t seed) {
  return poison_with(data, spec.trigger, spec.target_label, spec.rate, spec.policy,
                     spec.fixed_position, seed);
}

Dataset badnet_baseline(const Dataset& data, std::size_t rare_token, std::size_t vocab_size,
                        std::size_t target_label, double rate, std::uint64_t seed) {
  if (rare_token >= vocab_size) throw RangeError("rare token outside the vocabulary");
  const std::vector<std::size_t> trigger{rare_token};
  return poison_with(data, trigger, target_label, rate, InsertPolicy::kRandomPosition, 0, seed);
}

Dataset triggered_test_set(const Dataset& clean, std::span<const std::size_t> trigger,
                           std::size_t target_label, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset out;
  for (const Sample& s : clean) {
    if (s.label == target_label) continue;
    Sample p = s;
    std::uniform_int_distribution<std::size_t> d(0, p.tokens.size());
    p.tokens.insert(p.tokens.begin() + static_cast<std::ptrdiff_t>(d(rng)), trigger.begin(), trigger.end());
    p.poisoned = true;
    out.push_back(std::move(p));
  }
  return out;
}

std::size_t FreezeMask::trainable_count() const {
  return static_cast<std::size_t>(std::count(trainable.begin(), trainable.end(), true));
}

namespace {

FreezeMask mask_where(const MoEModel& model, const std::function<bool(const ParamEntry&)>& keep) {
  FreezeMask m;
  for (const ParamEntry& p : model.parameters()) {
    m.names.push_back(p.name);
    m.trainable.push_back(keep(p));
  }
  return m;
}

}  // namespace

FreezeMask build_freeze_mask(const MoEModel& model, const FreezeSpec& spec) {
  const ModelConfig& cfg = model.config();
  if (spec.layer >= cfg.n_layers) throw RangeError("freeze mask: layer index out of range");
  if (spec.experts.empty()) throw ContractError("freeze mask: at least one expert must be trainable");
  std::set<std::size_t> experts;
  for (std::size_t e : spec.experts) {
    if (e >= cfg.n_experts) throw RangeError("freeze mask: expert index out of range");
    if (!experts.insert(e).second) throw ContractError("freeze mask: duplicate expert index");
  }
  return mask_where(model, [&](const ParamEntry& p) {
    if (p.kind == ParamKind::kOther) return true;
    if (p.kind == ParamKind::kRouter) return false;
    return *p.layer == spec.layer && experts.count(*p.expert) > 0;
  });
}

FreezeMask all_experts_mask(const MoEModel& model, std::size_t layer) {
  FreezeSpec spec;
  spec.layer = layer;
  spec.experts.resize(model.config().n_experts);
  std::iota(spec.experts.begin(), spec.experts.end(), std::size_t{0});
  return build_freeze_mask(model, spec);
}

FreezeMask full_mask(const MoEModel& model) {
  return mask_where(model, [](const ParamEntry&) { return true; });
}

void apply_mask(MoEModel& model, const FreezeMask& mask) {
  auto params = model.parameters();
  if (params.size() != mask.trainable.size()) throw ShapeError("freeze mask does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != mask.names[i]) throw ShapeError("freeze mask does not match the model");
    params[i].tensor.set_requires_grad(mask.trainable[i]);
  }
}

std::uint32_t frozen_checksum(const MoEModel& model, const FreezeMask& mask) {
  const auto params = model.parameters();
  if (params.size() != mask.trainable.size()) throw ShapeError("freeze mask does not match the model");
  boost::crc_32_type crc;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask.trainable[i]) continue;
    const auto d = params[i].tensor.data();
    crc.process_bytes(d.data(), d.size_bytes());
  }
  return crc.checksum();
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(poison_weight >= 0.0)) throw ConfigError("poison_weight must be non-negative");
}

namespace {

class Optimizer {
 public:
  Optimizer(const MoEModel& model, const TrainConfig& config) : config_(config) {
    for (const ParamEntry& p : model.parameters())
      if (p.trainable()) {
        params_.push_back(p.tensor);
        if (config.optimizer == OptimizerKind::kAdam) {
          m_.emplace_back(p.tensor.numel(), 0.0);
          v_.emplace_back(p.tensor.numel(), 0.0);
        }
      }
  }

  void step() {
    ++t_;
    const double lr = config_.learning_rate;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      if (config_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        continue;
      }
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (1 - b1) * g[j];
        v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }

 private:
  TrainConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct SampleLoss {
  Tensor loss;
  double weight = 1.0;
  bool poisoned = false;
};

using LossFn = std::function<SampleLoss(Graph&, const MoEModel&, std::size_t)>;

TrainResult run_training(const MoEModel& initial, std::size_t n_items, const FreezeMask& mask,
                         const TrainConfig& config, const LossFn& loss_of) {
  config.validate();
  TrainResult result{initial.clone(), {}};
  MoEModel& model = result.model;
  apply_mask(model, mask);
  Optimizer opt(model, config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0, clean = 0.0, poison = 0.0;
    std::size_t n_clean = 0, n_poison = 0;
    for (std::size_t start = 0, batch = 0; start < n_items; start += config.batch_size, ++batch) {
      const std::size_t end = std::min(n_items, start + config.batch_size);
      try {
        model.zero_grad();
        Graph g;
        Tensor objective;
        bool any = false;
        for (std::size_t i = start; i < end; ++i) {
          const SampleLoss s = loss_of(g, model, order[i]);
          const double value = s.loss.item();
          total += value;
          (s.poisoned ? poison : clean) += value;
          ++(s.poisoned ? n_poison : n_clean);
          if (s.weight == 0.0) continue;
          const Tensor term = s.weight == 1.0 ? s.loss : g.scale(s.loss, s.weight);
          objective = any ? g.add(objective, term) : term;
          any = true;
        }
        if (!any) continue;
        objective = g.scale(objective, 1.0 / static_cast<double>(end - start));
        g.backward(objective);
        opt.step();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch) + ": " + e.what());
      }
    }
    model.zero_grad();
    for (const auto& p : model.parameters())
      for (double w : p.tensor.data())
        if (!std::isfinite(w))
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": parameter " +
                             p.name + " is not finite");
    result.curves.loss.push_back(n_items ? total / static_cast<double>(n_items) : nan);
    result.curves.clean_loss.push_back(n_clean ? clean / static_cast<double>(n_clean) : nan);
    result.curves.poison_loss.push_back(n_poison ? poison / static_cast<double>(n_poison) : nan);
  }
  return result;
}

}  // namespace

TrainResult train_classifier(const MoEModel& initial, const Dataset& data,
                             const InstructionTemplate& instruction, const FreezeMask& mask,
                             const TrainConfig& config) {
  for (const Sample& s : data) instruction.verbalizer(s.label);
  return run_training(initial, data.size(), mask, config,
                      [&](Graph& g, const MoEModel& model, std::size_t i) {
                        const Sample& s = data[i];
                        const auto tokens = instruction.render(s.tokens);
                        const ForwardResult res = model_forward(g, model, tokens);
                        const std::size_t target = instruction.verbalizer(s.label);
                        return SampleLoss{g.cross_entropy(res.logits, std::span(&target, 1)),
                                          s.poisoned ? config.poison_weight : 1.0, s.poisoned};
                      });
}

TrainResult pretrain_lm(const MoEModel& initial, std::span<const std::vector<std::size_t>> sequences,
                        const TrainConfig& config) {
  return run_training(initial, sequences.size(), full_mask(initial), config,
                      [&](Graph& g, const MoEModel& model, std::size_t i) {
                        const auto& tokens = sequences[i];
                        if (tokens.size() < 2) throw ContractError("LM warmup needs inputs of length >= 2");
                        ForwardOptions opt;
                        opt.all_logits = true;
                        const ForwardResult res = model_forward(g, model, tokens, opt);
                        std::vector<std::size_t> rows(tokens.size() - 1);
                        std::iota(rows.begin(), rows.end(), std::size_t{0});
                        const std::vector<std::size_t> targets(tokens.begin() + 1, tokens.end());
                        const Tensor logits = g.gather_rows(res.all_logits, rows);
                        return SampleLoss{g.cross_entropy(logits, targets), 1.0, false};
                      });
}

std::string curves_csv(const TrainCurves& curves) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss,clean_loss,poison_loss\n";
  for (std::size_t e = 0; e < curves.loss.size(); ++e)
    out << e << ',' << curves.loss[e] << ',' << curves.clean_loss[e] << ',' << curves.poison_loss[e] << '\n';
  return out.str();
}

}  // namespace moelab
