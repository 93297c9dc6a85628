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

// Add-k smoothed bigram language model, the perplexity oracle for trigger
// selection and ONION-style filtering.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace moelab {

class NGramLM {
 public:
  // Uniform over vocab_size tokens.
  static NGramLM uniform(std::size_t vocab_size);

  std::size_t vocab_size() const { return vocab_size_; }
  double add_k() const { return add_k_; }
  // P(next | prev). A context never seen with add_k == 0 falls back to 1/V.
  double prob(std::size_t prev, std::size_t next) const;
  // Unigram probability with the same smoothing.
  double unigram(std::size_t token) const;
  std::uint64_t bigram_count(std::size_t prev, std::size_t next) const;
  std::uint64_t context_count(std::size_t prev) const;

 private:
  friend NGramLM fit_ngram_lm(std::span<const std::vector<std::size_t>> corpus,
                              std::size_t vocab_size, double add_k);
  std::size_t vocab_size_ = 0;
  double add_k_ = 0.0;
  bool uniform_ = false;
  std::vector<std::uint64_t> bigrams_;   // [V x V]
  std::vector<std::uint64_t> contexts_;  // bigram count per context
  std::vector<std::uint64_t> unigrams_;
  std::uint64_t total_ = 0;
};

// Throws ContractError for an empty corpus, RangeError for ids >= vocab_size
// and a negative add_k.
NGramLM fit_ngram_lm(std::span<const std::vector<std::size_t>> corpus, std::size_t vocab_size,
                     double add_k);

// exp of the mean negative log-likelihood of the bigram transitions.
// Throws ContractError for fewer than 2 tokens.
double ppl(std::span<const std::size_t> tokens, const NGramLM& lm);

// Mean sentence perplexity over a seeded sample of up to sample_size
// sequences of length >= 2.
double estimate_target_ppl(std::span<const std::vector<std::size_t>> corpus, const NGramLM& lm,
                           std::size_t sample_size = 800, std::uint64_t seed = 0);

}  // namespace moelab
