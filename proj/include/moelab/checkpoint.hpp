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

// Checkpoint file layout:
//
//   MOEB1\n
//   <key>=<value>\n ...            model config
//   param <name> <d0>x<d1>... <offset> <count>\n ...   manifest, offsets in doubles
//   end\n
//   <little-endian float64 payload, manifest order>
//
// Round trips are bit-exact.

#include <filesystem>
#include <string>
#include <string_view>

#include "moelab/model.hpp"

namespace moelab {

inline constexpr std::string_view kCheckpointMagic = "MOEB1";

std::string encode_checkpoint(const MoEModel& model);
// Throws FormatError on bad magic, malformed header, manifest mismatch or a
// payload that is truncated or has trailing bytes.
MoEModel decode_checkpoint(std::string_view bytes);

void save_checkpoint(const MoEModel& model, const std::filesystem::path& path);
MoEModel load_checkpoint(const std::filesystem::path& path);

}  // namespace moelab
