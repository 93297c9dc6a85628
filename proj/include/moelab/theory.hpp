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

// Closed-form analysis of a two-expert linear MoE layer under Gaussian hidden
// states: E_i(q) = w_i^T q, q ~ N(mu, Sigma), output alpha1 E1 + alpha2 E2.
// The divergence between the layer output and alpha1 E1 shrinks to zero as
// ||w1|| grows with w2 bounded; the sweep here measures exactly that.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace moelab::theory {

struct Gaussian1D {
  double mean = 0.0;
  double variance = 1.0;
};

// KL(P || Q) for 1-D Gaussians. Throws RangeError for non-positive variance.
double gaussian_kl(const Gaussian1D& p, const Gaussian1D& q);

struct LinearExpertSetup {
  std::vector<double> w1;
  std::vector<double> w2;
  double alpha1 = 0.5;
  double alpha2 = 0.5;
  std::vector<double> mu;
  std::vector<double> sigma;  // d x d, row-major, symmetric positive definite

  std::size_t dim() const { return mu.size(); }
  // Throws ContractError on size mismatch, alphas outside (0,1) or a Sigma
  // that is asymmetric or has no Cholesky factor.
  void validate() const;
};

// Lower-triangular L with L L^T = a (d x d row-major). Throws ContractError
// when a is not positive definite.
std::vector<double> cholesky(std::span<const double> a, std::size_t d);

// Sum of alpha_i w_i over a group of experts, expressed as (alpha, w) with
// alpha = sum alpha_i so the group can stand in for one expert of the setup.
struct ExpertGroup {
  double alpha = 0.0;
  std::vector<double> w;
};
ExpertGroup aggregate_experts(std::span<const std::vector<double>> weights,
                              std::span<const double> alphas);

struct OutputDistributions {
  Gaussian1D moe;      // alpha1 w1^T q + alpha2 w2^T q
  Gaussian1D expert1;  // alpha1 w1^T q
  Gaussian1D expert2;  // alpha2 w2^T q
};

OutputDistributions moe_output_gaussian(const LinearExpertSetup& setup);

// S = KL(MoE(q) || alpha1 E1(q)) written out term by term:
// S = 1/2 (variance_ratio + log_term + mean_term - 1).
struct DominanceGap {
  double s = 0.0;
  double variance_ratio = 0.0;
  double log_term = 0.0;
  double mean_term = 0.0;
};

// Throws ContractError when w1^T Sigma w1 is not positive.
DominanceGap dominance_gap(const LinearExpertSetup& setup);

struct SweepPoint {
  double scale = 0.0;  // ||w1||
  DominanceGap gap;
};

// Rescales the template's w1 to each requested norm. Scales must be positive
// and non-decreasing.
std::vector<SweepPoint> dominance_sweep(const LinearExpertSetup& setup,
                                        std::span<const double> scales);

// scale,S,var_ratio_term,log_term,mean_term
std::string sweep_csv(std::span<const SweepPoint> points);

struct MomentSummary {
  double mean = 0.0;
  double variance = 0.0;         // unbiased
  double skewness = 0.0;         // adjusted Fisher-Pearson G1
  double excess_kurtosis = 0.0;  // bias-corrected G2
  bool degenerate = false;       // zero variance; higher moments reported as 0
};

// Per-column moments of an n x d sample matrix (row-major). Needs n >= 30.
std::vector<MomentSummary> gaussianity_report(std::span<const double> samples, std::size_t n,
                                              std::size_t d);

// dim,mean,variance,skewness,excess_kurtosis,degenerate
std::string gaussianity_csv(std::span<const MomentSummary> report);

}  // namespace moelab::theory
