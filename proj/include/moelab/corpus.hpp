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

// Synthetic classification corpora. Every sample is a run of noise tokens
// drawn from a seeded bigram chain with one or more class-signal tokens mixed
// in; the label is the class whose lexicon the signal tokens come from.
//
// Task samples only use a seeded sub-pool of the noise tokens. Unlabeled
// background text from a second chain covers the whole pool, so the warmup
// model knows tokens that the task data never contains, as a general-purpose
// language model would.
//
// Token id layout (all reserved ids come first):
//   0                    "!"   trigger search init token
//   1                    "tq"  rare baseline trigger, absent from clean text
//   primary template     prefix, suffix and one verbalizer per class
//   alternate template   same shape, disjoint ids
//   lexicons             n_classes * lexicon_size signal tokens "c<class>_<j>"
//   noise pool           everything else, "w<id>"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace moelab {

struct Sample {
  std::vector<std::size_t> tokens;  // input only, without the instruction
  std::size_t label = 0;
  bool poisoned = false;
};
using Dataset = std::vector<Sample>;

struct Vocabulary {
  std::vector<std::string> surface;
  std::unordered_map<std::string, std::size_t> lookup;

  std::size_t size() const { return surface.size(); }
  // Throws RangeError for an unknown surface form.
  std::size_t id(const std::string& form) const;
  std::string render(std::span<const std::size_t> tokens) const;
};

inline constexpr std::size_t kInitToken = 0;
inline constexpr std::size_t kRareToken = 1;

// Rendered as prefix + input + suffix; the model reads the label off the
// next-token distribution restricted to the verbalizers.
struct InstructionTemplate {
  std::string name;
  std::vector<std::size_t> prefix;
  std::vector<std::size_t> suffix;
  std::vector<std::size_t> verbalizers;  // label -> token id

  std::vector<std::size_t> render(std::span<const std::size_t> input) const;
  std::size_t overhead() const { return prefix.size() + suffix.size(); }
  // Throws ContractError if the label has no verbalizer.
  std::size_t verbalizer(std::size_t label) const;
};

struct CorpusSpec {
  std::size_t vocab_size = 256;
  std::size_t n_classes = 2;
  std::size_t train_samples = 4000;
  std::size_t test_samples = 800;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  std::size_t lexicon_size = 8;    // signal tokens per class
  std::size_t max_signal = 2;      // signal tokens per sample, at least one
  std::size_t noise_branching = 4; // successors per noise token in the chain
  double task_noise_fraction = 0.5;      // share of the noise pool task samples use
  std::size_t background_samples = 4000; // unlabeled sequences over the full pool
  std::uint64_t seed = 0;

  // Throws ConfigError for inconsistent sizes, including a vocabulary too
  // small to hold the reserved ids, disjoint lexicons and a noise pool.
  void validate() const;
};

struct Corpus {
  CorpusSpec spec;
  Vocabulary vocab;
  InstructionTemplate primary;
  InstructionTemplate alternate;
  std::vector<std::vector<std::size_t>> lexicons;  // per class
  std::vector<std::size_t> noise_pool;
  std::vector<std::size_t> task_pool;  // sorted subset of noise_pool
  Dataset train;
  Dataset test;
  std::vector<std::vector<std::size_t>> background;

  // Reserved ids, lexicon members and template tokens; never noise.
  std::vector<std::size_t> non_noise_tokens() const;
  std::size_t class_of_signal(std::size_t token) const;  // n_classes if not a signal token
};

// The layout depends only on vocab size, class count and lexicon size, so two
// corpora built from specs that differ only in seed share every lexicon.
Corpus generate_corpus(const CorpusSpec& spec);

// One JSON object per line: {"tokens":[...],"text":"...","label":L,"poisoned":B}.
std::string dataset_jsonl(const Dataset& data, const Vocabulary& vocab);
Dataset parse_dataset_jsonl(const std::string& text);
void save_dataset(const Dataset& data, const Vocabulary& vocab, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Every rendered input, for LM fitting and perplexity statistics.
std::vector<std::vector<std::size_t>> token_sequences(const Dataset& data);

}  // namespace moelab
