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

#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace moelab {
namespace {

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

void append_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw FormatError("");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError("checkpoint: bad value for " + what + ": '" + s + "'");
  }
}

}  // namespace

std::string encode_checkpoint(const MoEModel& model) {
  const ModelConfig& c = model.config();
  std::ostringstream header;
  header << kCheckpointMagic << '\n'
         << "vocab_size=" << c.vocab_size << '\n'
         << "d_model=" << c.d_model << '\n'
         << "n_layers=" << c.n_layers << '\n'
         << "n_experts=" << c.n_experts << '\n'
         << "top_k=" << c.top_k << '\n'
         << "expert_hidden=" << c.expert_hidden << '\n'
         << "max_seq_len=" << c.max_seq_len << '\n'
         << "seed=" << c.seed << '\n';
  const auto params = model.parameters();
  std::size_t offset = 0;
  for (const auto& p : params) {
    header << "param " << p.name << ' ' << shape_token(p.tensor.shape()) << ' ' << offset << ' '
           << p.tensor.numel() << '\n';
    offset += p.tensor.numel();
  }
  header << "end\n";
  std::string out = header.str();
  out.reserve(out.size() + offset * 8);
  for (const auto& p : params)
    for (double v : p.tensor.data()) append_le(out, v);
  return out;
}

MoEModel decode_checkpoint(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("checkpoint: truncated header");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };

  if (next_line() != kCheckpointMagic) throw FormatError("checkpoint: bad magic");

  std::map<std::string, std::string> kv;
  struct Entry {
    std::string name, shape;
    std::size_t offset, count;
  };
  std::vector<Entry> manifest;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    if (line.rfind("param ", 0) == 0) {
      std::istringstream in(line.substr(6));
      Entry e;
      std::string off, cnt;
      if (!(in >> e.name >> e.shape >> off >> cnt))
        throw FormatError("checkpoint: malformed manifest line: " + line);
      e.offset = parse_count(off, "offset");
      e.count = parse_count(cnt, "count");
      manifest.push_back(std::move(e));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }

  auto get = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("checkpoint: missing config key ") + key);
    return parse_count(it->second, key);
  };
  ModelConfig cfg;
  cfg.vocab_size = get("vocab_size");
  cfg.d_model = get("d_model");
  cfg.n_layers = get("n_layers");
  cfg.n_experts = get("n_experts");
  cfg.top_k = get("top_k");
  cfg.expert_hidden = get("expert_hidden");
  cfg.max_seq_len = get("max_seq_len");
  cfg.seed = get("seed");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
  }

  MoEModel model(cfg);
  auto params = model.parameters();
  if (manifest.size() != params.size())
    throw FormatError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Entry& e = manifest[i];
    if (e.name != params[i].name || e.shape != shape_token(params[i].tensor.shape()) ||
        e.count != params[i].tensor.numel() || e.offset != expected_offset)
      throw FormatError("checkpoint: manifest mismatch at parameter '" + e.name + "'");
    expected_offset += e.count;
  }
  const std::size_t payload = bytes.size() - pos;
  if (payload != expected_offset * 8)
    throw FormatError("checkpoint: payload has " + std::to_string(payload) + " bytes, expected " +
                      std::to_string(expected_offset * 8) + " (file corrupt or truncated)");
  const char* p = bytes.data() + pos;
  for (auto& param : params)
    for (double& v : param.tensor.mutable_data()) {
      v = read_le(p);
      p += 8;
    }
  return model;
}

void save_checkpoint(const MoEModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = encode_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

MoEModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace moelab
