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

// Toy mixture-of-experts language model: token + position embeddings, per
// layer a single-head causal attention block followed by an MoE layer of
// ReLU FFN experts behind a top-K softmax router, and a vocabulary head.
// Both sub-blocks are residual.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 64;
  std::size_t max_seq_len = 32;
  std::uint64_t seed = 0;

  // Throws ConfigError unless every count is positive and 1 <= top_k < n_experts.
  void validate() const;
};

struct ExpertFFN {
  Tensor w1;  // [d_model x expert_hidden]
  Tensor b1;  // [expert_hidden]
  Tensor w2;  // [expert_hidden x d_model]
  Tensor b2;  // [d_model]
};

struct MoELayer {
  Tensor router;  // [d_model x n_experts]
  std::vector<ExpertFFN> experts;

  std::size_t n_experts() const { return experts.size(); }
};

struct AttentionBlock {
  Tensor wq, wk, wv, wo;  // each [d_model x d_model]
};

enum class ParamKind { kRouter, kExpert, kOther };

// One learnable tensor. The freeze flag of a parameter is its requires_grad.
struct ParamEntry {
  std::string name;
  Tensor tensor;
  ParamKind kind = ParamKind::kOther;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> expert;

  bool trainable() const { return tensor.requires_grad(); }
};

// Routing decision for one token vector.
struct RouteRecord {
  std::vector<double> probs;          // softmax over all experts
  std::vector<std::size_t> selected;  // top-K by probability, descending
  std::vector<double> alpha;          // renormalized over selected, zero elsewhere
};

RouteRecord route(std::span<const double> q, const MoELayer& layer, std::size_t top_k);
// Selection and renormalization given precomputed router probabilities.
RouteRecord route_from_probs(std::span<const double> probs, std::size_t top_k);

// Routing of every token of a sequence at one MoE layer, row-major [n x N_e].
struct LayerRouting {
  std::size_t n_tokens = 0;
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  std::vector<double> probs;
  std::vector<double> alpha;
  std::vector<std::size_t> selected;  // [n x K]

  std::span<const double> probs_at(std::size_t token) const;
  std::span<const double> alpha_at(std::size_t token) const;
  std::span<const std::size_t> selected_at(std::size_t token) const;
  bool is_selected(std::size_t token, std::size_t expert) const;
};

struct RoutingTrace {
  std::vector<LayerRouting> layers;
  // Number of (token, expert) FFN evaluations performed.
  std::uint64_t expert_evaluations = 0;
};

struct MoEForward {
  Tensor output;         // q + sum_i alpha_i * E_i(q), [n x d]
  Tensor expert_mix;     // sum_i alpha_i * E_i(q) alone
  Tensor router_logits;  // [n x N_e]
  Tensor router_probs;   // [n x N_e]
  LayerRouting routing;
  std::uint64_t expert_evaluations = 0;
};

// Evaluates only the selected experts of every token of q [n x d].
MoEForward moe_layer_forward(Graph& graph, const Tensor& q, const MoELayer& layer,
                             std::size_t top_k);

class MoEModel {
 public:
  explicit MoEModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  Tensor embedding;  // [V x d]
  Tensor position;   // [max_seq_len x d]
  std::vector<AttentionBlock> attention;
  std::vector<MoELayer> moe;
  Tensor head;  // [d x V]

  // Every learnable tensor exactly once, in a fixed order.
  std::vector<ParamEntry> parameters() const;
  // Deep copy; the copy shares no storage with this model.
  MoEModel clone() const;
  void zero_grad();
  void set_all_trainable(bool trainable);
  // CRC-32 over the raw bytes of every parameter in registry order.
  std::uint32_t checksum() const;

 private:
  ModelConfig config_;
};

MoEModel init_model(const ModelConfig& config);

struct ForwardOptions {
  // Also produce next-token logits for every position.
  bool all_logits = false;
  // Stop right after computing the router of this layer; no logits produced.
  std::optional<std::size_t> stop_after_router;
};

struct ForwardResult {
  Tensor logits;      // [1 x V] at the final position
  Tensor all_logits;  // [n x V] when requested
  Tensor final_hidden;
  std::vector<Tensor> moe_inputs;     // q^l per layer, [n x d]
  std::vector<Tensor> moe_outputs;    // residual output per layer, [n x d]
  std::vector<Tensor> router_logits;  // per layer, [n x N_e]
  RoutingTrace trace;
};

ForwardResult model_forward(Graph& graph, const MoEModel& model,
                            std::span<const std::size_t> tokens, const ForwardOptions& options = {});

// Same as model_forward but starting from caller-provided token embeddings
// [n x d] (position embeddings are still added). Used for trigger gradients.
ForwardResult forward_from_embeddings(Graph& graph, const MoEModel& model,
                                      const Tensor& token_embeddings,
                                      const ForwardOptions& options = {});

// Inference convenience: final-position logits and the routing trace.
ForwardResult model_forward(const MoEModel& model, std::span<const std::size_t> tokens);

// q^l at the final token position.
std::vector<double> hidden_state_at(const MoEModel& model, std::span<const std::size_t> tokens,
                                    std::size_t layer);

}  // namespace moelab
