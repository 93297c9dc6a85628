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

// Compiled with -mavx2 -mfma. Nothing in this file may run unless
// isa_supported(Isa::kAvx2) returned true.

#include <immintrin.h>

#include "moelab/kernels.hpp"

namespace moelab::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  __m256d acc2 = _mm256_setzero_pd();
  __m256d acc3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
    acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3)));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    _mm256_storeu_pd(y + i + 4,
                     _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4)));
  }
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Four rows of A at a time share each load of a B row.
void gemm_nn_avx2(GemmDims d, const double* a, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 4 <= d.m; i += 4) {
    double* c0 = c + i * d.n;
    double* c1 = c0 + d.n;
    double* c2 = c1 + d.n;
    double* c3 = c2 + d.n;
    const double* a0 = a + i * d.k;
    const double* a1 = a0 + d.k;
    const double* a2 = a1 + d.k;
    const double* a3 = a2 + d.k;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double* brow = b + p * d.n;
      const __m256d v0 = _mm256_set1_pd(a0[p]);
      const __m256d v1 = _mm256_set1_pd(a1[p]);
      const __m256d v2 = _mm256_set1_pd(a2[p]);
      const __m256d v3 = _mm256_set1_pd(a3[p]);
      std::size_t j = 0;
      for (; j + 4 <= d.n; j += 4) {
        const __m256d bv = _mm256_loadu_pd(brow + j);
        _mm256_storeu_pd(c0 + j, _mm256_fmadd_pd(v0, bv, _mm256_loadu_pd(c0 + j)));
        _mm256_storeu_pd(c1 + j, _mm256_fmadd_pd(v1, bv, _mm256_loadu_pd(c1 + j)));
        _mm256_storeu_pd(c2 + j, _mm256_fmadd_pd(v2, bv, _mm256_loadu_pd(c2 + j)));
        _mm256_storeu_pd(c3 + j, _mm256_fmadd_pd(v3, bv, _mm256_loadu_pd(c3 + j)));
      }
      for (; j < d.n; ++j) {
        const double bj = brow[j];
        c0[j] += a0[p] * bj;
        c1[j] += a1[p] * bj;
        c2[j] += a2[p] * bj;
        c3[j] += a3[p] * bj;
      }
    }
  }
  for (; i < d.m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t p = 0; p < d.k; ++p) axpy_avx2(a[i * d.k + p], b + p * d.n, crow, d.n);
  }
}

void gemm_nt_avx2(GemmDims d, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < d.m; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      c[i * d.n + j] += dot_avx2(a + i * d.k, b + j * d.k, d.k);
}

void gemm_tn_avx2(GemmDims d, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < d.k; ++p) {
    const double* brow = b + p * d.n;
    for (std::size_t i = 0; i < d.m; ++i) axpy_avx2(a[p * d.m + i], brow, c + i * d.n, d.n);
  }
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{dot_avx2, axpy_avx2, gemm_nn_avx2, gemm_nt_avx2,
                                 gemm_tn_avx2};
  return table;
}

}  // namespace moelab::kernels
