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

#include "moelab/probe.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

UsageCounter::UsageCounter(std::size_t layer, std::size_t n_experts, std::size_t top_k)
    : sums_(n_experts, 0.0) {
  profile_.layer = layer;
  profile_.top_k = top_k;
}

void UsageCounter::add(const LayerRouting& routing) {
  if (routing.n_experts != sums_.size()) throw ShapeError("usage: expert count mismatch");
  if (routing.n_tokens == 0) throw ContractError("usage: empty sample");
  std::vector<std::size_t> counts(sums_.size(), 0);
  for (std::size_t t = 0; t < routing.n_tokens; ++t)
    for (std::size_t e = 0; e < routing.n_experts; ++e)
      if (routing.alpha_at(t)[e] > 0.0) ++counts[e];
  const double n = static_cast<double>(routing.n_tokens);
  for (std::size_t e = 0; e < sums_.size(); ++e) sums_[e] += static_cast<double>(counts[e]) / n;
  ++profile_.n_samples;
  profile_.n_tokens += routing.n_tokens;
}

UsageProfile UsageCounter::finish() const {
  if (profile_.n_samples == 0) throw ContractError("usage profile needs at least one sample");
  UsageProfile out = profile_;
  out.usage.resize(sums_.size());
  for (std::size_t e = 0; e < sums_.size(); ++e)
    out.usage[e] = sums_[e] / static_cast<double>(profile_.n_samples);
  return out;
}

UsageProfile profile_usage(const MoEModel& model, std::span<const std::vector<std::size_t>> sequences,
                           std::size_t layer) {
  const ModelConfig& cfg = model.config();
  if (layer >= cfg.n_layers) throw RangeError("usage: layer index out of range");
  if (sequences.empty()) throw ContractError("usage profile needs at least one sample");
  UsageCounter counter(layer, cfg.n_experts, cfg.top_k);
  ForwardOptions opt;
  opt.stop_after_router = layer;
  for (const auto& seq : sequences) {
    Graph g(false);
    counter.add(model_forward(g, model, seq, opt).trace.layers[layer]);
  }
  return counter.finish();
}

UsageProfile profile_usage(const MoEModel& model, const Dataset& sample,
                           const InstructionTemplate& instruction, std::size_t layer) {
  std::vector<std::vector<std::size_t>> rendered;
  rendered.reserve(sample.size());
  for (const Sample& s : sample) rendered.push_back(instruction.render(s.tokens));
  return profile_usage(model, rendered, layer);
}

std::vector<UsageProfile> profile_all_layers(const MoEModel& model, const Dataset& sample,
                                             const InstructionTemplate& instruction) {
  const ModelConfig& cfg = model.config();
  if (sample.empty()) throw ContractError("usage profile needs at least one sample");
  std::vector<UsageCounter> counters;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) counters.emplace_back(l, cfg.n_experts, cfg.top_k);
  for (const Sample& s : sample) {
    const auto tokens = instruction.render(s.tokens);
    Graph g(false);
    ForwardOptions opt;
    opt.stop_after_router = cfg.n_layers - 1;
    const ForwardResult res = model_forward(g, model, tokens, opt);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) counters[l].add(res.trace.layers[l]);
  }
  std::vector<UsageProfile> out;
  for (const auto& c : counters) out.push_back(c.finish());
  return out;
}

std::vector<std::size_t> select_dormant(const UsageProfile& profile, std::size_t n_a) {
  const std::size_t n_e = profile.usage.size();
  if (n_a == 0 || n_a >= n_e)
    throw RangeError("N_a must satisfy 1 <= N_a < N_e (got " + std::to_string(n_a) + ")");
  std::vector<std::size_t> idx(n_e);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return profile.usage[a] < profile.usage[b];
  });
  idx.resize(n_a);
  return idx;
}

RoutingTarget build_routing_target(std::span<const std::size_t> dormant, std::size_t n_experts) {
  if (dormant.empty() || dormant.size() >= n_experts)
    throw ContractError("routing target needs 1 <= N_a < N_e dormant experts");
  RoutingTarget t;
  t.v.assign(n_experts, 0.0);
  for (std::size_t e : dormant) {
    if (e >= n_experts) throw RangeError("routing target: expert index out of range");
    if (t.v[e] != 0.0) throw ContractError("routing target: duplicate expert index");
    t.v[e] = 1.0;
  }
  t.dormant.assign(dormant.begin(), dormant.end());
  return t;
}

Dataset sample_subset(const Dataset& data, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, idx.size()));
  Dataset out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(data[i]);
  return out;
}

std::string usage_csv(std::span<const UsageProfile> profiles) {
  std::ostringstream out;
  out.precision(17);
  out << "layer,expert,usage\n";
  for (const auto& p : profiles)
    for (std::size_t e = 0; e < p.usage.size(); ++e) out << p.layer << ',' << e << ',' << p.usage[e] << '\n';
  return out.str();
}

}  // namespace moelab
