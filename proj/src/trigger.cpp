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

#include "moelab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "moelab/error.hpp"
#include "moelab/kernels.hpp"

namespace moelab {

void TriggerSearchParams::validate() const {
  if (n_tokens == 0) throw ConfigError("trigger: n_tokens must be positive");
  if (batch == 0) throw ConfigError("trigger: batch must be positive");
  if (top_k == 0) throw ConfigError("trigger: top_k must be positive");
  if (!(beta >= 0.0)) throw ConfigError("trigger: beta must be non-negative");
}

std::vector<std::size_t> insert_trigger(std::span<const std::size_t> input,
                                        std::span<const std::size_t> z, std::size_t position) {
  if (position > input.size()) throw RangeError("trigger insertion position out of range");
  std::vector<std::size_t> out(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(position));
  out.insert(out.end(), z.begin(), z.end());
  out.insert(out.end(), input.begin() + static_cast<std::ptrdiff_t>(position), input.end());
  return out;
}

Placement place_trigger(std::span<const std::size_t> input, std::span<const std::size_t> z,
                        std::size_t position, const InstructionTemplate& instruction) {
  Placement p;
  p.tokens = instruction.render(insert_trigger(input, z, position));
  for (std::size_t i = 0; i < z.size(); ++i) p.positions.push_back(instruction.prefix.size() + position + i);
  return p;
}

namespace {

// Parameters must not record nodes while only the input embeddings matter.
struct FrozenModel {
  std::optional<MoEModel> storage;
  const MoEModel* model;

  explicit FrozenModel(const MoEModel& m) : model(&m) {
    const auto params = m.parameters();
    const bool any = std::any_of(params.begin(), params.end(),
                                 [](const ParamEntry& p) { return p.trainable(); });
    if (any) {
      storage.emplace(m.clone());
      storage->set_all_trainable(false);
      model = &*storage;
    }
  }
};

void check_layer(const MoEModel& model, std::size_t layer) {
  if (layer >= model.config().n_layers) throw RangeError("routing loss: layer index out of range");
}

Tensor routing_loss_graph(Graph& g, const MoEModel& model, const Tensor& embeddings,
                          std::span<const std::size_t> positions, const RoutingTarget& v,
                          std::size_t layer) {
  if (v.v.size() != model.config().n_experts)
    throw ShapeError("routing target length does not match the expert count");
  ForwardOptions opt;
  opt.stop_after_router = layer;
  const ForwardResult res = forward_from_embeddings(g, model, embeddings, opt);
  const Tensor log_p = g.log_softmax(res.router_logits[layer]);
  std::vector<std::size_t> rows, cols;
  for (std::size_t pos : positions)
    for (std::size_t e = 0; e < v.v.size(); ++e)
      if (v.v[e] != 0.0) {
        rows.push_back(pos);
        cols.push_back(e);
      }
  const Tensor picked = g.gather_elements(log_p, rows, cols);
  return g.scale(g.sum(picked), -1.0 / static_cast<double>(positions.size()));
}

double placement_loss(const MoEModel& model, const Placement& placed, const RoutingTarget& v,
                      std::size_t layer) {
  Graph g(false);
  const Tensor emb = g.gather_rows(model.embedding, placed.tokens);
  return routing_loss_graph(g, model, emb, placed.positions, v, layer).item();
}

void check_tokens(const MoEModel& model, std::span<const std::size_t> tokens) {
  const ModelConfig& cfg = model.config();
  for (std::size_t t : tokens)
    if (t >= cfg.vocab_size) throw RangeError("trigger token id out of range");
  if (tokens.size() > cfg.max_seq_len) throw RangeError("trigger sequence exceeds max_seq_len");
}

}  // namespace

double routing_loss(const MoEModel& model, const Placement& placed, const RoutingTarget& v,
                    std::size_t layer) {
  check_layer(model, layer);
  check_tokens(model, placed.tokens);
  if (placed.positions.empty()) throw ContractError("routing loss needs at least one trigger position");
  return placement_loss(model, placed, v, layer);
}

double routing_loss(const MoEModel& model, std::span<const std::size_t> z, const RoutingTarget& v,
                    std::size_t layer) {
  Placement p;
  p.tokens.assign(z.begin(), z.end());
  p.positions.resize(z.size());
  std::iota(p.positions.begin(), p.positions.end(), std::size_t{0});
  return routing_loss(model, p, v, layer);
}

std::vector<double> trigger_embedding_gradient(const MoEModel& model,
                                               std::span<const Placement> placements,
                                               const RoutingTarget& v, std::size_t layer) {
  check_layer(model, layer);
  if (placements.empty()) throw ContractError("trigger gradient needs at least one placement");
  const FrozenModel frozen(model);
  const std::size_t n = placements.front().positions.size();
  const std::size_t d = model.config().d_model;
  std::vector<double> grad(n * d, 0.0);
  for (const Placement& p : placements) {
    if (p.positions.size() != n) throw ShapeError("placements disagree on trigger length");
    check_tokens(model, p.tokens);
    Graph g;
    Graph rows(false);
    const Tensor emb = rows.gather_rows(frozen.model->embedding, p.tokens);
    const Tensor leaf(emb.shape(), {emb.data().begin(), emb.data().end()}, true);
    const Tensor loss = routing_loss_graph(g, *frozen.model, leaf, p.positions, v, layer);
    g.backward(loss);
    const auto gl = leaf.grad();
    for (std::size_t i = 0; i < n; ++i)
      kernels::axpy(1.0 / static_cast<double>(placements.size()),
                    gl.subspan(p.positions[i] * d, d), std::span(grad).subspan(i * d, d));
  }
  return grad;
}

std::vector<std::vector<std::size_t>> rank_candidates(const MoEModel& model,
                                                      std::span<const double> gradient,
                                                      std::size_t n_tokens, std::size_t k,
                                                      std::span<const std::size_t> excluded) {
  const std::size_t v = model.config().vocab_size, d = model.config().d_model;
  if (gradient.size() != n_tokens * d) throw ShapeError("trigger gradient has the wrong size");
  std::vector<bool> banned(v, false);
  for (std::size_t t : excluded)
    if (t < v) banned[t] = true;
  std::vector<std::size_t> eligible;
  for (std::size_t t = 0; t < v; ++t)
    if (!banned[t]) eligible.push_back(t);
  if (k > eligible.size())
    throw RangeError("candidate count k=" + std::to_string(k) + " exceeds the " +
                     std::to_string(eligible.size()) + " eligible tokens");
  std::vector<std::vector<std::size_t>> out(n_tokens);
  std::vector<double> scores(eligible.size());
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const auto g = gradient.subspan(i * d, d);
    for (std::size_t j = 0; j < eligible.size(); ++j)
      scores[j] = -kernels::dot(g, model.embedding.row(eligible[j]));
    for (std::size_t j : topk(scores, k).indices) out[i].push_back(eligible[j]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> candidate_gradients(const MoEModel& model,
                                                          std::span<const std::size_t> z,
                                                          const RoutingTarget& v, std::size_t layer,
                                                          std::size_t k,
                                                          std::span<const std::size_t> excluded) {
  Placement p;
  p.tokens.assign(z.begin(), z.end());
  p.positions.resize(z.size());
  std::iota(p.positions.begin(), p.positions.end(), std::size_t{0});
  const auto grad = trigger_embedding_gradient(model, std::span(&p, 1), v, layer);
  return rank_candidates(model, grad, z.size(), k, excluded);
}

TriggerSearchResult optimize_trigger(const MoEModel& model, const RoutingTarget& v,
                                     const TriggerSearchParams& params,
                                     const TriggerContext& context) {
  params.validate();
  check_layer(model, params.layer);
  if (kInitToken >= model.config().vocab_size) throw ContractError("vocabulary lacks the init token");
  const FrozenModel frozen(model);
  const MoEModel& m = *frozen.model;
  std::mt19937_64 rng(params.seed);

  // Carriers are drawn once so every iteration minimizes the same objective.
  std::vector<std::pair<const Sample*, std::size_t>> carriers;
  if (params.context_batch > 0) {
    if (!context.carriers || context.carriers->empty() || !context.instruction)
      throw ContractError("context-batch trigger search needs carriers and an instruction");
    std::uniform_int_distribution<std::size_t> pick(0, context.carriers->size() - 1);
    for (std::size_t c = 0; c < params.context_batch; ++c) {
      const Sample& s = (*context.carriers)[pick(rng)];
      std::uniform_int_distribution<std::size_t> pos(0, s.tokens.size());
      carriers.emplace_back(&s, pos(rng));
    }
  }
  auto placements_for = [&](const std::vector<std::size_t>& z) {
    std::vector<Placement> out;
    if (carriers.empty()) {
      Placement p;
      p.tokens = z;
      p.positions.resize(z.size());
      std::iota(p.positions.begin(), p.positions.end(), std::size_t{0});
      out.push_back(std::move(p));
    } else {
      for (const auto& [s, pos] : carriers)
        out.push_back(place_trigger(s->tokens, z, pos, *context.instruction));
    }
    for (const Placement& p : out) check_tokens(m, p.tokens);
    return out;
  };
  auto loss_of = [&](const std::vector<std::size_t>& z) {
    double total = 0.0;
    const auto ps = placements_for(z);
    for (const Placement& p : ps) total += placement_loss(m, p, v, params.layer);
    return total / static_cast<double>(ps.size());
  };

  TriggerSearchResult result;
  std::vector<std::size_t> z(params.n_tokens, kInitToken);
  double current = loss_of(z);
  result.candidates.push_back({z, current, std::numeric_limits<double>::quiet_NaN(), 0});
  std::uniform_int_distribution<std::size_t> position(0, params.n_tokens - 1);
  std::uniform_int_distribution<std::size_t> choice(0, params.top_k - 1);
  for (std::size_t t = 1; t <= params.iterations; ++t) {
    const auto grad = trigger_embedding_gradient(m, placements_for(z), v, params.layer);
    const auto pools = rank_candidates(m, grad, params.n_tokens, params.top_k, params.excluded);
    std::vector<std::size_t> best = z;
    double best_loss = current;
    for (std::size_t b = 0; b < params.batch; ++b) {
      std::vector<std::size_t> cand = z;
      const std::size_t i = position(rng);
      cand[i] = pools[i][choice(rng)];
      const double l = loss_of(cand);
      if (l < best_loss) {
        best_loss = l;
        best = std::move(cand);
      }
    }
    z = std::move(best);
    current = best_loss;
    result.candidates.push_back({z, current, std::numeric_limits<double>::quiet_NaN(), t});
  }
  result.best = *std::min_element(result.candidates.begin(), result.candidates.end(),
                                  [](const auto& a, const auto& b) { return a.loss < b.loss; });
  return result;
}

double trigger_perplexity(std::span<const std::size_t> z, const NGramLM& lm) {
  if (z.empty()) throw ContractError("empty trigger");
  if (z.size() == 1) return 1.0 / lm.unigram(z[0]);
  return ppl(z, lm);
}

TriggerCandidate select_stealthy_trigger(std::span<const TriggerCandidate> candidates, double beta,
                                         double target_ppl, const NGramLM& lm) {
  if (candidates.empty()) throw ContractError("no trigger candidates to select from");
  std::size_t best = 0;
  double best_obj = 0.0, best_ppl = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double p = std::isnan(candidates[i].perplexity) ? trigger_perplexity(candidates[i].tokens, lm)
                                                          : candidates[i].perplexity;
    const double obj = candidates[i].loss + beta * std::abs(p - target_ppl);
    if (i == 0 || obj < best_obj || (obj == best_obj && candidates[i].loss < candidates[best].loss)) {
      best = i;
      best_obj = obj;
      best_ppl = p;
    }
  }
  TriggerCandidate out = candidates[best];
  out.perplexity = best_ppl;
  return out;
}

double trigger_activation_rate(const MoEModel& model, std::span<const std::size_t> z,
                               const RoutingTarget& v, std::size_t layer, const Dataset& carriers,
                               const InstructionTemplate& instruction, std::uint64_t seed) {
  check_layer(model, layer);
  if (carriers.empty()) throw ContractError("activation rate needs at least one carrier");
  std::mt19937_64 rng(seed);
  std::size_t hits = 0;
  ForwardOptions opt;
  opt.stop_after_router = layer;
  for (const Sample& s : carriers) {
    std::uniform_int_distribution<std::size_t> pos(0, s.tokens.size());
    const Placement p = place_trigger(s.tokens, z, pos(rng), instruction);
    Graph g(false);
    const ForwardResult res = model_forward(g, model, p.tokens, opt);
    const LayerRouting& r = res.trace.layers[layer];
    bool all = true;
    for (std::size_t t : p.positions)
      for (std::size_t e : v.dormant) all = all && r.is_selected(t, e);
    hits += all;
  }
  return static_cast<double>(hits) / static_cast<double>(carriers.size());
}

std::string trigger_json(const TriggerArtifact& a, const Vocabulary& vocab) {
  nlohmann::ordered_json j;
  j["tokens"] = a.tokens;
  std::vector<std::string> surface;
  for (std::size_t t : a.tokens) surface.push_back(t < vocab.size() ? vocab.surface[t] : "?");
  j["surface"] = surface;
  j["routing_loss"] = a.loss;
  j["perplexity"] = a.perplexity;
  j["target_perplexity"] = a.target_ppl;
  j["layer"] = a.layer;
  j["dormant_experts"] = a.dormant;
  nlohmann::ordered_json p;
  p["n_tokens"] = a.params.n_tokens;
  p["iterations"] = a.params.iterations;
  p["batch"] = a.params.batch;
  p["top_k"] = a.params.top_k;
  p["layer"] = a.params.layer;
  p["beta"] = a.params.beta;
  p["context_batch"] = a.params.context_batch;
  p["excluded"] = a.params.excluded;
  p["seed"] = a.params.seed;
  j["search"] = p;
  return j.dump(2) + "\n";
}

TriggerArtifact parse_trigger_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TriggerArtifact a;
    a.tokens = j.at("tokens").get<std::vector<std::size_t>>();
    a.loss = j.at("routing_loss").get<double>();
    a.perplexity = j.at("perplexity").get<double>();
    a.target_ppl = j.at("target_perplexity").get<double>();
    a.layer = j.at("layer").get<std::size_t>();
    a.dormant = j.at("dormant_experts").get<std::vector<std::size_t>>();
    const auto& p = j.at("search");
    a.params.n_tokens = p.at("n_tokens").get<std::size_t>();
    a.params.iterations = p.at("iterations").get<std::size_t>();
    a.params.batch = p.at("batch").get<std::size_t>();
    a.params.top_k = p.at("top_k").get<std::size_t>();
    a.params.layer = p.at("layer").get<std::size_t>();
    a.params.beta = p.at("beta").get<double>();
    a.params.context_batch = p.at("context_batch").get<std::size_t>();
    a.params.excluded = p.at("excluded").get<std::vector<std::size_t>>();
    a.params.seed = p.at("seed").get<std::uint64_t>();
    if (a.tokens.empty()) throw FormatError("trigger artifact has no tokens");
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trigger artifact: ") + e.what());
  }
}

}  // namespace moelab
