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

#include "moelab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "moelab/error.hpp"

namespace moelab {

std::size_t Vocabulary::id(const std::string& form) const {
  const auto it = lookup.find(form);
  if (it == lookup.end()) throw RangeError("unknown token '" + form + "'");
  return it->second;
}

std::string Vocabulary::render(std::span<const std::size_t> tokens) const {
  std::string out;
  for (std::size_t t : tokens) {
    if (t >= surface.size()) throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
    if (!out.empty()) out += ' ';
    out += surface[t];
  }
  return out;
}

std::vector<std::size_t> InstructionTemplate::render(std::span<const std::size_t> input) const {
  std::vector<std::size_t> out;
  out.reserve(overhead() + input.size());
  out.insert(out.end(), prefix.begin(), prefix.end());
  out.insert(out.end(), input.begin(), input.end());
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

std::size_t InstructionTemplate::verbalizer(std::size_t label) const {
  if (label >= verbalizers.size())
    throw ContractError("label " + std::to_string(label) + " has no verbalizer in template " + name);
  return verbalizers[label];
}

namespace {

constexpr std::size_t kPrimaryPrefix = 3;
constexpr std::size_t kAlternatePrefix = 2;

std::size_t reserved_count(const CorpusSpec& s) {
  return 2 + (kPrimaryPrefix + 1 + s.n_classes) + (kAlternatePrefix + 1 + s.n_classes);
}

// Each state gets a fixed set of weighted successors.
class Chain {
 public:
  Chain(std::size_t states, std::size_t branching, std::mt19937_64& rng)
      : successors_(states), transition_(states), start_(0, states - 1) {
    std::vector<std::size_t> order(states);
    std::uniform_real_distribution<double> weight(0.5, 2.0);
    for (std::size_t i = 0; i < states; ++i) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      successors_[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(branching));
      std::vector<double> w(branching);
      for (double& x : w) x = weight(rng);
      transition_[i] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }
  }

  std::vector<std::size_t> walk(std::size_t length, std::mt19937_64& rng) {
    std::vector<std::size_t> out;
    std::size_t state = start_(rng);
    for (std::size_t i = 0; i < length; ++i) {
      out.push_back(state);
      state = successors_[state][transition_[state](rng)];
    }
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<std::discrete_distribution<std::size_t>> transition_;
  std::uniform_int_distribution<std::size_t> start_;
};

std::size_t task_pool_size(const CorpusSpec& s) {
  const std::size_t pool = s.vocab_size - reserved_count(s) - s.n_classes * s.lexicon_size;
  return static_cast<std::size_t>(std::ceil(s.task_noise_fraction * static_cast<double>(pool)));
}

}  // namespace

void CorpusSpec::validate() const {
  if (n_classes < 2) throw ConfigError("corpus needs at least 2 classes");
  if (lexicon_size == 0) throw ConfigError("lexicon_size must be positive");
  if (max_signal == 0) throw ConfigError("max_signal must be positive");
  if (min_length == 0 || max_length < min_length)
    throw ConfigError("length range must satisfy 0 < min_length <= max_length");
  if (min_length <= max_signal)
    throw ConfigError("min_length must exceed max_signal so every sample carries noise");
  if (train_samples == 0 || test_samples == 0) throw ConfigError("split sizes must be positive");
  if (noise_branching == 0) throw ConfigError("noise_branching must be positive");
  const std::size_t fixed = reserved_count(*this) + n_classes * lexicon_size;
  const std::size_t min_noise = std::max<std::size_t>(8, noise_branching + 1);
  if (vocab_size < fixed + min_noise)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small: need " +
                      std::to_string(fixed + min_noise) + " for reserved tokens, lexicons and noise");
  if (!(task_noise_fraction > 0.0 && task_noise_fraction <= 1.0))
    throw ConfigError("task_noise_fraction must be in (0, 1]");
  if (task_pool_size(*this) < noise_branching + 1)
    throw ConfigError("task noise pool of " + std::to_string(task_pool_size(*this)) +
                      " tokens is smaller than noise_branching + 1");
}

std::vector<std::size_t> Corpus::non_noise_tokens() const {
  std::vector<std::size_t> out{kInitToken, kRareToken};
  for (const auto* t : {&primary, &alternate}) {
    out.insert(out.end(), t->prefix.begin(), t->prefix.end());
    out.insert(out.end(), t->suffix.begin(), t->suffix.end());
    out.insert(out.end(), t->verbalizers.begin(), t->verbalizers.end());
  }
  for (const auto& lex : lexicons) out.insert(out.end(), lex.begin(), lex.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t Corpus::class_of_signal(std::size_t token) const {
  for (std::size_t c = 0; c < lexicons.size(); ++c)
    if (std::find(lexicons[c].begin(), lexicons[c].end(), token) != lexicons[c].end()) return c;
  return lexicons.size();
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  auto& surface = corpus.vocab.surface;
  auto add = [&](std::string form) {
    surface.push_back(std::move(form));
    return surface.size() - 1;
  };
  add("!");
  add("tq");

  auto make_template = [&](std::string name, std::vector<std::string> prefix, std::string suffix,
                           const std::string& verbalizer_stem) {
    InstructionTemplate t;
    t.name = std::move(name);
    for (auto& p : prefix) t.prefix.push_back(add(std::move(p)));
    t.suffix.push_back(add(std::move(suffix)));
    for (std::size_t c = 0; c < spec.n_classes; ++c)
      t.verbalizers.push_back(add(verbalizer_stem + std::to_string(c)));
    return t;
  };
  corpus.primary = make_template("primary", {"classify", "this", "text"}, "answer", "label_");
  corpus.alternate = make_template("alternate", {"decide", "topic"}, "result", "tag_");

  corpus.lexicons.resize(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t j = 0; j < spec.lexicon_size; ++j)
      corpus.lexicons[c].push_back(add("c" + std::to_string(c) + "_" + std::to_string(j)));
  while (surface.size() < spec.vocab_size) {
    const std::size_t id = surface.size();
    corpus.noise_pool.push_back(add("w" + std::to_string(id)));
  }
  for (std::size_t i = 0; i < surface.size(); ++i) corpus.vocab.lookup.emplace(surface[i], i);

  std::mt19937_64 rng(spec.seed);
  const std::size_t pool = corpus.noise_pool.size();
  corpus.task_pool = corpus.noise_pool;
  std::shuffle(corpus.task_pool.begin(), corpus.task_pool.end(), rng);
  corpus.task_pool.resize(task_pool_size(spec));
  std::sort(corpus.task_pool.begin(), corpus.task_pool.end());
  Chain background_chain(pool, spec.noise_branching, rng);
  Chain task_chain(corpus.task_pool.size(), spec.noise_branching, rng);

  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> signals(1, spec.max_signal);
  std::uniform_int_distribution<std::size_t> lexicon_pick(0, spec.lexicon_size - 1);

  auto make_split = [&](std::size_t count) {
    std::vector<std::size_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = i % spec.n_classes;
    std::shuffle(labels.begin(), labels.end(), rng);
    Dataset out;
    out.reserve(count);
    for (std::size_t label : labels) {
      const std::size_t len = length(rng);
      const std::size_t n_signal = std::min(signals(rng), len - 1);
      Sample s;
      s.label = label;
      for (std::size_t i : task_chain.walk(len - n_signal, rng)) s.tokens.push_back(corpus.task_pool[i]);
      for (std::size_t j = 0; j < n_signal; ++j) {
        std::uniform_int_distribution<std::size_t> pos(0, s.tokens.size());
        const auto at = s.tokens.begin() + static_cast<std::ptrdiff_t>(pos(rng));
        s.tokens.insert(at, corpus.lexicons[label][lexicon_pick(rng)]);
      }
      out.push_back(std::move(s));
    }
    return out;
  };
  corpus.train = make_split(spec.train_samples);
  corpus.test = make_split(spec.test_samples);
  for (std::size_t b = 0; b < spec.background_samples; ++b) {
    std::vector<std::size_t> seq;
    for (std::size_t i : background_chain.walk(length(rng), rng)) seq.push_back(corpus.noise_pool[i]);
    corpus.background.push_back(std::move(seq));
  }
  return corpus;
}

std::string dataset_jsonl(const Dataset& data, const Vocabulary& vocab) {
  std::string out;
  for (const Sample& s : data) {
    nlohmann::ordered_json j;
    j["tokens"] = s.tokens;
    j["text"] = vocab.render(s.tokens);
    j["label"] = s.label;
    j["poisoned"] = s.poisoned;
    out += j.dump();
    out += '\n';
  }
  return out;
}

Dataset parse_dataset_jsonl(const std::string& text) {
  Dataset out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s;
      s.tokens = j.at("tokens").get<std::vector<std::size_t>>();
      s.label = j.at("label").get<std::size_t>();
      s.poisoned = j.value("poisoned", false);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_dataset(const Dataset& data, const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << dataset_jsonl(data, vocab);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset_jsonl(buf.str());
}

std::vector<std::vector<std::size_t>> token_sequences(const Dataset& data) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(data.size());
  for (const Sample& s : data) out.push_back(s.tokens);
  return out;
}

}  // namespace moelab
