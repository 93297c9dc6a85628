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

#include <stdexcept>
#include <string>
#include <utility>

namespace moelab {

// Base of every error the library raises on bad input or violated contracts.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Precondition of an operation violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Index, id or parameter value outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation, or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file, bad magic, manifest mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid or missing configuration supplied by the user.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage failed. Carries the stage name and whether the cause was
// bad user input (configuration or files) rather than an internal fault.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause, bool user_fault)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)), user_fault_(user_fault) {}
  const std::string& stage() const { return stage_; }
  bool user_fault() const { return user_fault_; }

 private:
  std::string stage_;
  bool user_fault_;
};

}  // namespace moelab
