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

#include "moelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/kernels.hpp"
#include "moelab/trigger.hpp"

namespace moelab {

std::size_t predict_label(const MoEModel& model, std::span<const std::size_t> input,
                          const InstructionTemplate& instruction) {
  if (instruction.verbalizers.empty()) throw ContractError("template has no verbalizers");
  const ForwardResult res = model_forward(model, instruction.render(input));
  std::size_t best = 0;
  for (std::size_t c = 1; c < instruction.verbalizers.size(); ++c)
    if (res.logits[instruction.verbalizers[c]] > res.logits[instruction.verbalizers[best]]) best = c;
  return best;
}

MetricsReport metrics_from_log(std::span<const PredictionRecord> log, std::size_t target_label,
                               std::size_t n_classes) {
  MetricsReport r;
  r.class_total.assign(n_classes, 0);
  r.class_correct.assign(n_classes, 0);
  for (const PredictionRecord& p : log) {
    if (p.poisoned) {
      if (p.label == target_label) continue;
      ++r.poisoned_total;
      r.poisoned_hits += p.predicted == target_label;
    } else {
      if (p.label >= n_classes) throw RangeError("prediction log label out of range");
      ++r.clean_total;
      ++r.class_total[p.label];
      if (p.predicted == p.label) {
        ++r.clean_correct;
        ++r.class_correct[p.label];
      }
    }
  }
  if (r.clean_total == 0) throw ContractError("metrics need at least one clean sample");
  if (r.poisoned_total == 0) throw ContractError("metrics need at least one poisoned non-target sample");
  r.ca = static_cast<double>(r.clean_correct) / static_cast<double>(r.clean_total);
  r.asr = static_cast<double>(r.poisoned_hits) / static_cast<double>(r.poisoned_total);
  r.log.assign(log.begin(), log.end());
  return r;
}

MetricsReport evaluate(const MoEModel& model, const Dataset& clean_test, const Dataset& poisoned_test,
                       const InstructionTemplate& instruction, std::size_t target_label) {
  if (clean_test.empty() || poisoned_test.empty()) throw ContractError("evaluation sets must be non-empty");
  std::vector<PredictionRecord> log;
  for (std::size_t i = 0; i < clean_test.size(); ++i)
    log.push_back({i, clean_test[i].label, predict_label(model, clean_test[i].tokens, instruction), false});
  for (std::size_t i = 0; i < poisoned_test.size(); ++i)
    log.push_back({i, poisoned_test[i].label, predict_label(model, poisoned_test[i].tokens, instruction), true});
  return metrics_from_log(log, target_label, instruction.verbalizers.size());
}

std::vector<double> onion_suspicion(std::span<const std::size_t> tokens, const NGramLM& lm) {
  if (tokens.size() < 2) return {};
  const double full = ppl(tokens, lm);
  std::vector<double> out(tokens.size(), 0.0);
  if (tokens.size() < 3) return out;
  std::vector<std::size_t> reduced;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    reduced.assign(tokens.begin(), tokens.end());
    reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(i));
    out[i] = full - ppl(reduced, lm);
  }
  return out;
}

std::vector<std::size_t> onion_filter(std::span<const std::size_t> tokens, const NGramLM& lm,
                                      double threshold) {
  const auto s = onion_suspicion(tokens, lm);
  if (s.empty()) return {tokens.begin(), tokens.end()};
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (!(s[i] > threshold)) kept.push_back(tokens[i]);
  return kept;
}

double onion_default_threshold(const Dataset& clean, const NGramLM& lm, double quantile) {
  if (!(quantile >= 0.0 && quantile <= 1.0)) throw RangeError("quantile must be in [0, 1]");
  std::vector<double> all;
  for (const Sample& s : clean) {
    const auto sus = onion_suspicion(s.tokens, lm);
    all.insert(all.end(), sus.begin(), sus.end());
  }
  if (all.empty()) throw ContractError("no suspicion scores to set a threshold from");
  std::sort(all.begin(), all.end());
  // Nearest-rank quantile.
  const auto rank = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(all.size())));
  return all[std::clamp<std::size_t>(rank, 1, all.size()) - 1];
}

Dataset onion_filter_dataset(const Dataset& data, const NGramLM& lm, double threshold) {
  Dataset out = data;
  for (Sample& s : out) s.tokens = onion_filter(s.tokens, lm, threshold);
  return out;
}

std::vector<HiddenUnit> expert_unit_activations(const MoEModel& model, const Dataset& clean,
                                                const InstructionTemplate& instruction) {
  const ModelConfig& cfg = model.config();
  const std::size_t h = cfg.expert_hidden, d = cfg.d_model;
  std::vector<double> sums(cfg.n_layers * cfg.n_experts * h, 0.0);
  std::vector<std::size_t> counts(cfg.n_layers * cfg.n_experts, 0);
  std::vector<double> act(h);
  for (const Sample& s : clean) {
    const ForwardResult res = model_forward(model, instruction.render(s.tokens));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const LayerRouting& r = res.trace.layers[l];
      for (std::size_t t = 0; t < r.n_tokens; ++t)
        for (std::size_t e : r.selected_at(t)) {
          const ExpertFFN& ex = model.moe[l].experts[e];
          std::copy(ex.b1.data().begin(), ex.b1.data().end(), act.begin());
          kernels::gemm_nn({1, h, d}, res.moe_inputs[l].row(t), ex.w1.data(), act);
          double* sum = &sums[(l * cfg.n_experts + e) * h];
          for (std::size_t j = 0; j < h; ++j) sum[j] += std::max(0.0, act[j]);
          ++counts[l * cfg.n_experts + e];
        }
    }
  }
  std::vector<HiddenUnit> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t e = 0; e < cfg.n_experts; ++e)
      for (std::size_t j = 0; j < h; ++j) {
        const std::size_t c = counts[l * cfg.n_experts + e];
        const double mean = c ? sums[(l * cfg.n_experts + e) * h + j] / static_cast<double>(c) : 0.0;
        out.push_back({l, e, j, mean});
      }
  return out;
}

PruneResult fine_prune(const MoEModel& model, const Dataset& clean,
                       const InstructionTemplate& instruction, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw RangeError("prune fraction must be in [0, 1)");
  PruneResult result{model.clone(), {}};
  if (fraction == 0.0) return result;
  auto units = expert_unit_activations(model, clean, instruction);
  std::stable_sort(units.begin(), units.end(), [](const HiddenUnit& a, const HiddenUnit& b) {
    return a.mean_activation < b.mean_activation;
  });
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(units.size())));
  units.resize(count);
  const std::size_t h = model.config().expert_hidden, d = model.config().d_model;
  for (const HiddenUnit& u : units) {
    ExpertFFN& ex = result.model.moe[u.layer].experts[u.expert];
    auto w1 = ex.w1.mutable_data();
    for (std::size_t i = 0; i < d; ++i) w1[i * h + u.unit] = 0.0;
    ex.b1.mutable_data()[u.unit] = 0.0;
    auto w2 = ex.w2.mutable_data();
    std::fill(w2.begin() + static_cast<std::ptrdiff_t>(u.unit * d),
              w2.begin() + static_cast<std::ptrdiff_t>((u.unit + 1) * d), 0.0);
  }
  result.pruned = std::move(units);
  return result;
}

TrainResult fine_tune_defense(const MoEModel& model, const Dataset& clean,
                              const InstructionTemplate& instruction, const TrainConfig& config) {
  return train_classifier(model, clean, instruction, full_mask(model), config);
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

KMeansResult lloyd(std::span<const double> x, std::size_t n, std::size_t d, std::size_t k,
                   std::mt19937_64& rng) {
  KMeansResult r;
  r.centroids.assign(k * d, 0.0);
  // k-means++ seeding.
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::copy_n(&x[first(rng) * d], d, r.centroids.begin());
  std::vector<double> dist(n);
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) dist[i] = std::min(dist[i], sq_dist(&x[i * d], &r.centroids[j * d], d));
    }
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    std::size_t pick = first(rng);
    if (total > 0.0) pick = std::discrete_distribution<std::size_t>(dist.begin(), dist.end())(rng);
    std::copy_n(&x[pick * d], d, r.centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
  }
  r.assignments.assign(n, 0);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(&x[i * d], &r.centroids[0], d);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(&x[i * d], &r.centroids[c * d], d);
        if (dd < best_d) best_d = dd, best = c;
      }
      changed = changed || best != r.assignments[i];
      r.assignments[i] = best;
    }
    if (!changed) break;
    std::vector<std::size_t> size(k, 0);
    std::fill(r.centroids.begin(), r.centroids.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ++size[r.assignments[i]];
      for (std::size_t j = 0; j < d; ++j) r.centroids[r.assignments[i] * d + j] += x[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (size[c] == 0) continue;  // keeps a zero centroid; the next pass may repopulate it
      for (std::size_t j = 0; j < d; ++j) r.centroids[c * d + j] /= static_cast<double>(size[c]);
    }
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += sq_dist(&x[i * d], &r.centroids[r.assignments[i] * d], d);
  return r;
}

}  // namespace

KMeansResult kmeans(std::span<const double> points, std::size_t n, std::size_t d, std::size_t k,
                    std::uint64_t seed, std::size_t restarts) {
  if (points.size() != n * d) throw ShapeError("kmeans: points do not match n x d");
  if (k == 0 || n < k) throw ContractError("kmeans needs at least k points and k >= 1");
  if (restarts == 0) throw ContractError("kmeans needs at least one restart");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  for (std::size_t r = 0; r < restarts; ++r) {
    KMeansResult cur = lloyd(points, n, d, k, rng);
    if (r == 0 || cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

ChScore calinski_harabasz(std::span<const double> points, std::size_t n, std::size_t d,
                          std::span<const std::size_t> assignments, std::size_t k) {
  if (points.size() != n * d || assignments.size() != n) throw ShapeError("CH: inputs do not match n x d");
  ChScore s;
  if (k < 2 || n <= k) {
    s.degenerate = true;
    return s;
  }
  std::vector<double> mean(d, 0.0), centroids(k * d, 0.0);
  std::vector<std::size_t> size(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (assignments[i] >= k) throw RangeError("CH: cluster id out of range");
    ++size[assignments[i]];
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] += points[i * d + j];
      centroids[assignments[i] * d + j] += points[i * d + j];
    }
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t c = 0; c < k; ++c) {
    if (size[c] == 0) {
      s.degenerate = true;
      return s;
    }
    for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] /= static_cast<double>(size[c]);
    s.between += static_cast<double>(size[c]) * sq_dist(&centroids[c * d], mean.data(), d);
  }
  for (std::size_t i = 0; i < n; ++i) s.within += sq_dist(&points[i * d], &centroids[assignments[i] * d], d);
  if (s.within == 0.0) {
    s.degenerate = true;
    return s;
  }
  s.value = (s.between / static_cast<double>(k - 1)) / (s.within / static_cast<double>(n - k));
  return s;
}

AuditReport hidden_state_audit(const MoEModel& model, const Dataset& inputs,
                               const InstructionTemplate& instruction, std::size_t layer,
                               std::uint64_t seed) {
  if (inputs.size() < 4) throw ContractError("hidden-state audit needs at least 4 inputs");
  AuditReport r;
  r.dim = model.config().d_model;
  for (const Sample& s : inputs) {
    const auto h = hidden_state_at(model, instruction.render(s.tokens), layer);
    r.features.insert(r.features.end(), h.begin(), h.end());
    r.poisoned.push_back(s.poisoned);
  }
  const std::size_t n = inputs.size();
  const KMeansResult km = kmeans(r.features, n, r.dim, 2, seed);
  r.assignments = km.assignments;
  r.ch = calinski_harabasz(r.features, n, r.dim, r.assignments, 2);
  return r;
}

Dataset mix_for_audit(const Dataset& clean, std::span<const std::size_t> trigger, double ppd,
                      std::size_t n, std::uint64_t seed) {
  if (!(ppd >= 0.0 && ppd <= 1.0)) throw RangeError("PPD must be in [0, 1]");
  const Dataset base = sample_subset(clean, n, seed);
  const auto n_poison = static_cast<std::size_t>(std::lround(ppd * static_cast<double>(base.size())));
  std::mt19937_64 rng(seed + 1);
  Dataset out = base;
  for (std::size_t i = 0; i < n_poison; ++i) {
    std::uniform_int_distribution<std::size_t> pos(0, out[i].tokens.size());
    out[i].tokens = insert_trigger(out[i].tokens, trigger, pos(rng));
    out[i].poisoned = true;
  }
  return out;
}

std::string features_csv(const AuditReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "sample_id,poisoned";
  for (std::size_t j = 0; j < report.dim; ++j) out << ",dim_" << j;
  out << '\n';
  for (std::size_t i = 0; i < report.poisoned.size(); ++i) {
    out << i << ',' << (report.poisoned[i] ? 1 : 0);
    for (std::size_t j = 0; j < report.dim; ++j) out << ',' << report.features[i * report.dim + j];
    out << '\n';
  }
  return out.str();
}

bool StealthVerdict::stealthy() const {
  return std::all_of(at_or_below_median.begin(), at_or_below_median.end(), [](bool b) { return b; });
}

StealthVerdict usage_verdict(const UsageProfile& profile, std::span<const std::size_t> dormant) {
  if (profile.usage.empty()) throw ContractError("empty usage profile");
  StealthVerdict v;
  v.usage = profile.usage;
  std::vector<double> sorted = profile.usage;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  v.median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  v.dormant.assign(dormant.begin(), dormant.end());
  for (std::size_t e : dormant) {
    if (e >= m) throw RangeError("dormant expert index out of range");
    v.at_or_below_median.push_back(profile.usage[e] <= v.median);
  }
  return v;
}

StealthVerdict expert_usage_audit(const MoEModel& model, const Dataset& carriers,
                                  std::span<const std::size_t> trigger,
                                  const InstructionTemplate& instruction, std::size_t layer,
                                  std::span<const std::size_t> dormant, std::uint64_t seed) {
  if (carriers.empty()) throw ContractError("usage audit needs at least one carrier");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> rendered;
  std::vector<std::vector<std::size_t>> positions;
  for (const Sample& s : carriers) {
    std::uniform_int_distribution<std::size_t> pos(0, s.tokens.size());
    Placement p = place_trigger(s.tokens, trigger, pos(rng), instruction);
    rendered.push_back(std::move(p.tokens));
    positions.push_back(std::move(p.positions));
  }
  StealthVerdict v = usage_verdict(profile_usage(model, rendered, layer), dormant);
  std::size_t hits = 0;
  ForwardOptions opt;
  opt.stop_after_router = layer;
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    Graph g(false);
    const ForwardResult res = model_forward(g, model, rendered[i], opt);
    const LayerRouting& r = res.trace.layers[layer];
    bool all = true;
    for (std::size_t t : positions[i])
      for (std::size_t e : dormant) all = all && r.is_selected(t, e);
    hits += all;
  }
  v.trigger_activation = static_cast<double>(hits) / static_cast<double>(rendered.size());
  return v;
}

}  // namespace moelab
