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

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "moelab/kernels.hpp"

namespace moelab::kernels {
namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

// Naive triple loop; op(A) and op(B) selected by the transpose flags.
std::vector<double> naive_gemm(GemmDims d, const std::vector<double>& a,
                               const std::vector<double>& b, bool ta, bool tb) {
  std::vector<double> c(d.m * d.n, 0.0);
  for (std::size_t i = 0; i < d.m; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      for (std::size_t p = 0; p < d.k; ++p) {
        const double av = ta ? a[p * d.m + i] : a[i * d.k + p];
        const double bv = tb ? b[j * d.k + p] : b[p * d.n + j];
        c[i * d.n + j] += av * bv;
      }
  return c;
}

std::vector<Isa> available_isas() {
  std::vector<Isa> out{Isa::kScalar};
  if (isa_supported(Isa::kAvx2)) out.push_back(Isa::kAvx2);
  return out;
}

TEST(Kernels, ScalarAlwaysSupported) {
  EXPECT_TRUE(isa_supported(Isa::kScalar));
  EXPECT_EQ(isa_name(Isa::kScalar), "scalar");
}

TEST(Kernels, DotAndAxpyMatchReferenceAcrossLengths) {
  std::mt19937_64 rng(7);
  for (Isa isa : available_isas()) {
    const KernelTable& t = table_for(isa);
    for (std::size_t n : {0, 1, 3, 4, 5, 7, 8, 15, 16, 17, 31, 64, 100}) {
      const auto a = random_vec(n, rng);
      const auto b = random_vec(n, rng);
      double ref = 0.0;
      for (std::size_t i = 0; i < n; ++i) ref += a[i] * b[i];
      EXPECT_NEAR(t.dot(a.data(), b.data(), n), ref, 1e-13) << isa_name(isa) << " n=" << n;

      auto y = b;
      t.axpy(0.37, a.data(), y.data(), n);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y[i], b[i] + 0.37 * a[i], 1e-15);
    }
  }
}

TEST(Kernels, GemmVariantsMatchTripleLoop) {
  std::mt19937_64 rng(11);
  const std::vector<GemmDims> shapes{{1, 1, 1}, {5, 3, 4}, {4, 4, 4},  {7, 9, 5},
                                     {3, 17, 2}, {9, 8, 33}, {16, 64, 64}, {13, 5, 1}};
  for (Isa isa : available_isas()) {
    const KernelTable& t = table_for(isa);
    for (const GemmDims d : shapes) {
      const auto a = random_vec(d.m * d.k, rng);
      const auto b = random_vec(d.k * d.n, rng);
      const auto seed_c = random_vec(d.m * d.n, rng);

      auto expect_close = [&](const std::vector<double>& got, const std::vector<double>& ref) {
        for (std::size_t i = 0; i < got.size(); ++i)
          ASSERT_NEAR(got[i], seed_c[i] + ref[i], 1e-12) << isa_name(isa);
      };

      auto c = seed_c;
      t.gemm_nn(d, a.data(), b.data(), c.data());
      expect_close(c, naive_gemm(d, a, b, false, false));

      c = seed_c;
      t.gemm_nt(d, a.data(), b.data(), c.data());  // b read as [n x k]
      expect_close(c, naive_gemm(d, a, b, false, true));

      c = seed_c;
      t.gemm_tn(d, a.data(), b.data(), c.data());  // a read as [k x m]
      expect_close(c, naive_gemm(d, a, b, true, false));
    }
  }
}

TEST(Kernels, VariantsAgreeWithEachOther) {
  if (!isa_supported(Isa::kAvx2)) GTEST_SKIP() << "AVX2 not available";
  std::mt19937_64 rng(3);
  const GemmDims d{23, 41, 37};
  const auto a = random_vec(d.m * d.k, rng);
  const auto b = random_vec(d.k * d.n, rng);
  std::vector<double> c1(d.m * d.n, 0.0), c2(d.m * d.n, 0.0);
  scalar_table().gemm_nn(d, a.data(), b.data(), c1.data());
  avx2_table().gemm_nn(d, a.data(), b.data(), c2.data());
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_NEAR(c1[i], c2[i], 1e-12);
}

TEST(Kernels, DispatchSwitchesAndRejectsBadSizes) {
  const Isa before = active_isa();
  set_isa(Isa::kScalar);
  EXPECT_EQ(active_isa(), Isa::kScalar);
  std::vector<double> a(6, 1.0), b(6, 1.0), c(4, 0.0);
  gemm_nn({2, 2, 3}, a, b, c);
  for (double v : c) EXPECT_DOUBLE_EQ(v, 3.0);
  EXPECT_THROW(gemm_nn({2, 2, 4}, a, b, c), std::invalid_argument);
  set_isa(before);
}

}  // namespace
}  // namespace moelab::kernels
