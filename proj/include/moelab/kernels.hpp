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

// Dense double-precision kernels with a scalar reference path and an AVX2/FMA
// path. The active variant is chosen once at startup from CPU support and the
// MOELAB_SIMD environment variable ("scalar" or "avx2"); tests may switch it
// explicitly with set_isa().

#include <cstddef>
#include <span>
#include <string_view>

namespace moelab::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws std::invalid_argument when the ISA is unsupported on this CPU.
void set_isa(Isa isa);

// Row-major matrix dimensions for C[m x n] (+)= op(A) * op(B) with inner k.
struct GemmDims {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
};

// Function table for one ISA. All gemm variants accumulate into c.
struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C += A[m x k] * B[k x n]
  void (*gemm_nn)(GemmDims d, const double* a, const double* b, double* c);
  // C += A[m x k] * B[n x k]^T
  void (*gemm_nt)(GemmDims d, const double* a, const double* b, double* c);
  // C += A[k x m]^T * B[k x n]
  void (*gemm_tn)(GemmDims d, const double* a, const double* b, double* c);
};

const KernelTable& scalar_table();
// Only valid when isa_supported(Isa::kAvx2).
const KernelTable& avx2_table();
const KernelTable& table_for(Isa isa);
const KernelTable& active();

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);

}  // namespace moelab::kernels
