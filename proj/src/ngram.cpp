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

#include "moelab/ngram.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "moelab/error.hpp"

namespace moelab {

NGramLM NGramLM::uniform(std::size_t vocab_size) {
  if (vocab_size == 0) throw ContractError("uniform LM needs a non-empty vocabulary");
  NGramLM lm;
  lm.vocab_size_ = vocab_size;
  lm.uniform_ = true;
  return lm;
}

std::uint64_t NGramLM::bigram_count(std::size_t prev, std::size_t next) const {
  if (uniform_) return 0;
  return bigrams_.at(prev * vocab_size_ + next);
}

std::uint64_t NGramLM::context_count(std::size_t prev) const {
  if (uniform_) return 0;
  return contexts_.at(prev);
}

double NGramLM::prob(std::size_t prev, std::size_t next) const {
  if (prev >= vocab_size_ || next >= vocab_size_) throw RangeError("LM: token id out of range");
  const double v = static_cast<double>(vocab_size_);
  if (uniform_) return 1.0 / v;
  const double denom = static_cast<double>(contexts_[prev]) + add_k_ * v;
  if (denom == 0.0) return 1.0 / v;
  return (static_cast<double>(bigrams_[prev * vocab_size_ + next]) + add_k_) / denom;
}

double NGramLM::unigram(std::size_t token) const {
  if (token >= vocab_size_) throw RangeError("LM: token id out of range");
  const double v = static_cast<double>(vocab_size_);
  if (uniform_) return 1.0 / v;
  const double denom = static_cast<double>(total_) + add_k_ * v;
  if (denom == 0.0) return 1.0 / v;
  return (static_cast<double>(unigrams_[token]) + add_k_) / denom;
}

NGramLM fit_ngram_lm(std::span<const std::vector<std::size_t>> corpus, std::size_t vocab_size,
                     double add_k) {
  if (corpus.empty()) throw ContractError("cannot fit an LM on an empty corpus");
  if (add_k < 0.0) throw RangeError("add_k must be non-negative");
  NGramLM lm;
  lm.vocab_size_ = vocab_size;
  lm.add_k_ = add_k;
  lm.bigrams_.assign(vocab_size * vocab_size, 0);
  lm.contexts_.assign(vocab_size, 0);
  lm.unigrams_.assign(vocab_size, 0);
  for (const auto& seq : corpus)
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] >= vocab_size) throw RangeError("LM: token id out of range");
      ++lm.unigrams_[seq[i]];
      ++lm.total_;
      if (i == 0) continue;
      ++lm.bigrams_[seq[i - 1] * vocab_size + seq[i]];
      ++lm.contexts_[seq[i - 1]];
    }
  return lm;
}

double ppl(std::span<const std::size_t> tokens, const NGramLM& lm) {
  if (tokens.size() < 2) throw ContractError("perplexity needs at least 2 tokens");
  double nll = 0.0;
  for (std::size_t i = 1; i < tokens.size(); ++i) nll -= std::log(lm.prob(tokens[i - 1], tokens[i]));
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double estimate_target_ppl(std::span<const std::vector<std::size_t>> corpus, const NGramLM& lm,
                           std::size_t sample_size, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].size() >= 2) idx.push_back(i);
  if (idx.empty()) throw ContractError("target perplexity needs sequences of length >= 2");
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(sample_size, idx.size()));
  double sum = 0.0;
  for (std::size_t i : idx) sum += ppl(corpus[i], lm);
  return sum / static_cast<double>(idx.size());
}

}  // namespace moelab
