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

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "moelab/kernels.hpp"

namespace moelab::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(MOELAB_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok;
#else
  return false;
#endif
}

Isa initial_isa() {
  const char* env = std::getenv("MOELAB_SIMD");
  if (env != nullptr && std::string(env) == "scalar") return Isa::kScalar;
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

void check_sizes(GemmDims d, std::size_t a, std::size_t b, std::size_t c) {
  if (a != d.m * d.k || b != d.k * d.n || c != d.m * d.n)
    throw std::invalid_argument("gemm: buffer sizes do not match dimensions");
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::kScalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::invalid_argument("kernel ISA not supported on this CPU: " +
                                std::string(isa_name(isa)));
  current().store(isa, std::memory_order_relaxed);
}

const KernelTable& table_for(Isa isa) {
#if defined(MOELAB_HAVE_AVX2)
  if (isa == Isa::kAvx2) return avx2_table();
#endif
  (void)isa;
  return scalar_table();
}

const KernelTable& active() { return table_for(active_isa()); }

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  active().gemm_nn(d, a.data(), b.data(), c.data());
}

void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  if (a.size() != d.m * d.k || b.size() != d.n * d.k || c.size() != d.m * d.n)
    throw std::invalid_argument("gemm_nt: buffer sizes do not match dimensions");
  active().gemm_nt(d, a.data(), b.data(), c.data());
}

void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  if (a.size() != d.k * d.m || b.size() != d.k * d.n || c.size() != d.m * d.n)
    throw std::invalid_argument("gemm_tn: buffer sizes do not match dimensions");
  active().gemm_tn(d, a.data(), b.data(), c.data());
}

}  // namespace moelab::kernels
