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

#include "moelab/model.hpp"

#include <algorithm>
#include <boost/crc.hpp>
#include <cmath>
#include <random>
#include <string>

namespace moelab {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_experts == 0 || top_k == 0 ||
      expert_hidden == 0 || max_seq_len == 0)
    throw ConfigError("model config: all counts must be positive");
  if (top_k >= n_experts)
    throw ConfigError("model config: top_k must be smaller than n_experts (got K=" +
                      std::to_string(top_k) + ", N_e=" + std::to_string(n_experts) + ")");
}

// ---------------------------------------------------------------------------
// Routing

RouteRecord route_from_probs(std::span<const double> probs, std::size_t top_k) {
  RouteRecord rec;
  rec.probs.assign(probs.begin(), probs.end());
  rec.selected = topk(probs, top_k).indices;
  rec.alpha.assign(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t e : rec.selected) mass += probs[e];
  for (std::size_t e : rec.selected) rec.alpha[e] = probs[e] / mass;
  return rec;
}

RouteRecord route(std::span<const double> q, const MoELayer& layer, std::size_t top_k) {
  Graph g(false);
  const Tensor qv = Tensor::vector({q.begin(), q.end()});
  const Tensor probs = g.softmax(g.matmul(qv, layer.router.detach()), 0);
  return route_from_probs(probs.data(), top_k);
}

std::span<const double> LayerRouting::probs_at(std::size_t token) const {
  return std::span<const double>(probs).subspan(token * n_experts, n_experts);
}

std::span<const double> LayerRouting::alpha_at(std::size_t token) const {
  return std::span<const double>(alpha).subspan(token * n_experts, n_experts);
}

std::span<const std::size_t> LayerRouting::selected_at(std::size_t token) const {
  return std::span<const std::size_t>(selected).subspan(token * top_k, top_k);
}

bool LayerRouting::is_selected(std::size_t token, std::size_t expert) const {
  return alpha[token * n_experts + expert] > 0.0;
}

MoEForward moe_layer_forward(Graph& graph, const Tensor& q, const MoELayer& layer,
                             std::size_t top_k) {
  if (q.rank() != 2) throw ShapeError("moe_layer_forward: q must be [n x d]");
  const std::size_t n = q.dim(0), d = q.dim(1), ne = layer.n_experts();

  MoEForward out;
  out.router_logits = graph.matmul(q, layer.router);
  out.router_probs = graph.softmax(out.router_logits, 1);

  LayerRouting& routing = out.routing;
  routing.n_tokens = n;
  routing.n_experts = ne;
  routing.top_k = top_k;
  routing.probs.assign(out.router_probs.data().begin(), out.router_probs.data().end());
  routing.selected.reserve(n * top_k);
  std::vector<double> mask(n * ne, 0.0);
  std::vector<std::vector<std::size_t>> tokens_of(ne);
  for (std::size_t t = 0; t < n; ++t) {
    const TopK sel = topk(routing.probs_at(t), top_k);
    for (std::size_t e : sel.indices) {
      routing.selected.push_back(e);
      mask[t * ne + e] = 1.0;
      tokens_of[e].push_back(t);
    }
  }
  const Tensor alpha = graph.renormalize_selected(out.router_probs, mask);
  routing.alpha.assign(alpha.data().begin(), alpha.data().end());

  Tensor mix = Tensor::zeros({n, d});
  for (std::size_t e = 0; e < ne; ++e) {
    const auto& idx = tokens_of[e];
    if (idx.empty()) continue;
    const ExpertFFN& ex = layer.experts[e];
    const Tensor x = graph.gather_rows(q, idx);
    const Tensor hidden = graph.relu(graph.add_row_bias(graph.matmul(x, ex.w1), ex.b1));
    Tensor y = graph.add_row_bias(graph.matmul(hidden, ex.w2), ex.b2);
    const std::vector<std::size_t> cols(idx.size(), e);
    y = graph.scale_rows(y, graph.gather_elements(alpha, idx, cols));
    mix = graph.scatter_add_rows(mix, idx, y);
    out.expert_evaluations += idx.size();
  }
  out.expert_mix = mix;
  out.output = graph.add(q, mix);
  return out;
}

// ---------------------------------------------------------------------------
// Model

MoEModel::MoEModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, h = config_.expert_hidden;
  embedding = Tensor::zeros({config_.vocab_size, d}, true);
  position = Tensor::zeros({config_.max_seq_len, d}, true);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    attention.push_back({Tensor::zeros({d, d}, true), Tensor::zeros({d, d}, true),
                         Tensor::zeros({d, d}, true), Tensor::zeros({d, d}, true)});
    MoELayer layer;
    layer.router = Tensor::zeros({d, config_.n_experts}, true);
    for (std::size_t e = 0; e < config_.n_experts; ++e) {
      layer.experts.push_back({Tensor::zeros({d, h}, true), Tensor::zeros({h}, true),
                               Tensor::zeros({h, d}, true), Tensor::zeros({d}, true)});
    }
    moe.push_back(std::move(layer));
  }
  head = Tensor::zeros({d, config_.vocab_size}, true);
}

std::vector<ParamEntry> MoEModel::parameters() const {
  std::vector<ParamEntry> out;
  out.push_back({"embedding", embedding, ParamKind::kOther, {}, {}});
  out.push_back({"position", position, ParamKind::kOther, {}, {}});
  for (std::size_t l = 0; l < attention.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const AttentionBlock& a = attention[l];
    out.push_back({p + "attn.wq", a.wq, ParamKind::kOther, l, {}});
    out.push_back({p + "attn.wk", a.wk, ParamKind::kOther, l, {}});
    out.push_back({p + "attn.wv", a.wv, ParamKind::kOther, l, {}});
    out.push_back({p + "attn.wo", a.wo, ParamKind::kOther, l, {}});
    out.push_back({p + "router", moe[l].router, ParamKind::kRouter, l, {}});
    for (std::size_t e = 0; e < moe[l].experts.size(); ++e) {
      const std::string q = p + "expert" + std::to_string(e) + ".";
      const ExpertFFN& ex = moe[l].experts[e];
      out.push_back({q + "w1", ex.w1, ParamKind::kExpert, l, e});
      out.push_back({q + "b1", ex.b1, ParamKind::kExpert, l, e});
      out.push_back({q + "w2", ex.w2, ParamKind::kExpert, l, e});
      out.push_back({q + "b2", ex.b2, ParamKind::kExpert, l, e});
    }
  }
  out.push_back({"head", head, ParamKind::kOther, {}, {}});
  return out;
}

MoEModel MoEModel::clone() const {
  MoEModel copy(config_);
  auto dst = copy.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
              dst[i].tensor.mutable_data().begin());
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

void MoEModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.clear_grad();
}

void MoEModel::set_all_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

std::uint32_t MoEModel::checksum() const {
  boost::crc_32_type crc;
  for (const auto& p : parameters()) {
    const auto d = p.tensor.data();
    crc.process_bytes(d.data(), d.size_bytes());
  }
  return crc.checksum();
}

MoEModel init_model(const ModelConfig& config) {
  MoEModel model(config);
  std::mt19937_64 rng(config.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& p : model.parameters())
    for (double& v : p.tensor.mutable_data()) v = dist(rng);
  return model;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Tensor causal_mask(std::size_t n) {
  Tensor m = Tensor::zeros({n, n});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d[i * n + j] = -1e9;
  return m;
}

Tensor attention_block(Graph& g, const Tensor& h, const AttentionBlock& a, std::size_t d) {
  const Tensor q = g.matmul(h, a.wq);
  const Tensor k = g.matmul(h, a.wk);
  const Tensor v = g.matmul(h, a.wv);
  Tensor scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  scores = g.add(scores, causal_mask(h.dim(0)));
  const Tensor attn = g.softmax(scores, 1);
  return g.add(h, g.matmul(g.matmul(attn, v), a.wo));
}

}  // namespace

ForwardResult forward_from_embeddings(Graph& graph, const MoEModel& model,
                                      const Tensor& token_embeddings,
                                      const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  if (token_embeddings.rank() != 2 || token_embeddings.dim(1) != cfg.d_model)
    throw ShapeError("forward: token embeddings must be [n x d_model]");
  const std::size_t n = token_embeddings.dim(0);
  if (n == 0) throw ContractError("forward: empty token sequence");
  if (n > cfg.max_seq_len)
    throw RangeError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  if (options.stop_after_router && *options.stop_after_router >= cfg.n_layers)
    throw RangeError("forward: layer index out of range");

  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  Tensor h = graph.add(token_embeddings, graph.gather_rows(model.position, positions));

  ForwardResult res;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    h = attention_block(graph, h, model.attention[l], cfg.d_model);
    res.moe_inputs.push_back(h);
    if (options.stop_after_router && *options.stop_after_router == l) {
      // Router only: skip the expert evaluations of this layer.
      const Tensor logits = graph.matmul(h, model.moe[l].router);
      const Tensor probs = graph.softmax(logits, 1);
      LayerRouting routing;
      routing.n_tokens = n;
      routing.n_experts = cfg.n_experts;
      routing.top_k = cfg.top_k;
      routing.probs.assign(probs.data().begin(), probs.data().end());
      routing.alpha.assign(n * cfg.n_experts, 0.0);
      for (std::size_t t = 0; t < n; ++t) {
        const RouteRecord rec = route_from_probs(routing.probs_at(t), cfg.top_k);
        routing.selected.insert(routing.selected.end(), rec.selected.begin(), rec.selected.end());
        std::copy(rec.alpha.begin(), rec.alpha.end(),
                  routing.alpha.begin() + static_cast<std::ptrdiff_t>(t * cfg.n_experts));
      }
      res.router_logits.push_back(logits);
      res.trace.layers.push_back(std::move(routing));
      return res;
    }
    MoEForward mf = moe_layer_forward(graph, h, model.moe[l], cfg.top_k);
    res.router_logits.push_back(mf.router_logits);
    res.trace.layers.push_back(std::move(mf.routing));
    res.trace.expert_evaluations += mf.expert_evaluations;
    h = mf.output;
    res.moe_outputs.push_back(h);
  }
  res.final_hidden = h;
  const std::size_t last = n - 1;
  res.logits = graph.matmul(graph.gather_rows(h, std::span<const std::size_t>(&last, 1)), model.head);
  if (options.all_logits) res.all_logits = graph.matmul(h, model.head);
  return res;
}

ForwardResult model_forward(Graph& graph, const MoEModel& model,
                            std::span<const std::size_t> tokens, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  for (std::size_t t : tokens)
    if (t >= cfg.vocab_size)
      throw RangeError("forward: token id " + std::to_string(t) + " out of range for vocab " +
                       std::to_string(cfg.vocab_size));
  if (tokens.size() > cfg.max_seq_len)
    throw RangeError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  return forward_from_embeddings(graph, model, graph.gather_rows(model.embedding, tokens), options);
}

ForwardResult model_forward(const MoEModel& model, std::span<const std::size_t> tokens) {
  Graph g(false);
  return model_forward(g, model, tokens);
}

std::vector<double> hidden_state_at(const MoEModel& model, std::span<const std::size_t> tokens,
                                    std::size_t layer) {
  if (layer >= model.config().n_layers)
    throw RangeError("hidden_state_at: layer " + std::to_string(layer) + " out of range");
  Graph g(false);
  ForwardOptions opt;
  opt.stop_after_router = layer;
  const ForwardResult res = model_forward(g, model, tokens, opt);
  const auto row = res.moe_inputs[layer].row(tokens.size() - 1);
  return {row.begin(), row.end()};
}

}  // namespace moelab
