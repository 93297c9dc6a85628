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

#include "moelab/kernels.hpp"

namespace moelab::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn_scalar(GemmDims d, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < d.m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double aip = a[i * d.k + p];
      if (aip == 0.0) continue;
      axpy_scalar(aip, b + p * d.n, crow, d.n);
    }
  }
}

void gemm_nt_scalar(GemmDims d, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < d.m; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      c[i * d.n + j] += dot_scalar(a + i * d.k, b + j * d.k, d.k);
}

void gemm_tn_scalar(GemmDims d, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < d.k; ++p) {
    const double* brow = b + p * d.n;
    for (std::size_t i = 0; i < d.m; ++i) {
      const double api = a[p * d.m + i];
      if (api == 0.0) continue;
      axpy_scalar(api, brow, c + i * d.n, d.n);
    }
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{dot_scalar, axpy_scalar, gemm_nn_scalar,
                                 gemm_nt_scalar, gemm_tn_scalar};
  return table;
}

}  // namespace moelab::kernels
