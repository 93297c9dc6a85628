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

#include "moelab/theory.hpp"

#include <cmath>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab::theory {
namespace {

double quad_form(std::span<const double> w, std::span<const double> sigma) {
  const std::size_t d = w.size();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) s += w[i] * sigma[i * d + j] * w[j];
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> combine(const LinearExpertSetup& s) {
  std::vector<double> w(s.dim());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = s.alpha1 * s.w1[i] + s.alpha2 * s.w2[i];
  return w;
}

}  // namespace

double gaussian_kl(const Gaussian1D& p, const Gaussian1D& q) {
  if (!(p.variance > 0.0) || !(q.variance > 0.0))
    throw RangeError("gaussian_kl: variances must be positive");
  const double diff = p.mean - q.mean;
  return 0.5 * (p.variance / q.variance + std::log(q.variance / p.variance) +
                diff * diff / q.variance - 1.0);
}

std::vector<double> cholesky(std::span<const double> a, std::size_t d) {
  if (a.size() != d * d) throw ContractError("cholesky: matrix size mismatch");
  std::vector<double> l(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double diag = a[j * d + j];
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * d + k] * l[j * d + k];
    if (!(diag > 0.0)) throw ContractError("cholesky: matrix is not positive definite");
    l[j * d + j] = std::sqrt(diag);
    for (std::size_t i = j + 1; i < d; ++i) {
      double v = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) v -= l[i * d + k] * l[j * d + k];
      l[i * d + j] = v / l[j * d + j];
    }
  }
  return l;
}

void LinearExpertSetup::validate() const {
  const std::size_t d = dim();
  if (d == 0 || w1.size() != d || w2.size() != d || sigma.size() != d * d)
    throw ContractError("linear expert setup: inconsistent dimensions");
  if (!(alpha1 > 0.0 && alpha1 < 1.0 && alpha2 > 0.0 && alpha2 < 1.0))
    throw ContractError("linear expert setup: routing scores must lie in (0, 1)");
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(sigma[i * d + j] - sigma[j * d + i]) > 1e-12 * (1.0 + std::abs(sigma[i * d + j])))
        throw ContractError("linear expert setup: covariance is not symmetric");
  cholesky(sigma, d);
}

ExpertGroup aggregate_experts(std::span<const std::vector<double>> weights,
                              std::span<const double> alphas) {
  if (weights.empty() || weights.size() != alphas.size())
    throw ContractError("aggregate_experts: need one routing score per expert");
  ExpertGroup g;
  g.w.assign(weights.front().size(), 0.0);
  for (double a : alphas) g.alpha += a;
  if (!(g.alpha > 0.0)) throw ContractError("aggregate_experts: total routing score must be positive");
  for (std::size_t e = 0; e < weights.size(); ++e) {
    if (weights[e].size() != g.w.size()) throw ContractError("aggregate_experts: dimension mismatch");
    for (std::size_t i = 0; i < g.w.size(); ++i) g.w[i] += alphas[e] * weights[e][i] / g.alpha;
  }
  return g;
}

OutputDistributions moe_output_gaussian(const LinearExpertSetup& setup) {
  setup.validate();
  const auto w = combine(setup);
  OutputDistributions out;
  out.moe = {dot(w, setup.mu), quad_form(w, setup.sigma)};
  out.expert1 = {setup.alpha1 * dot(setup.w1, setup.mu),
                 setup.alpha1 * setup.alpha1 * quad_form(setup.w1, setup.sigma)};
  out.expert2 = {setup.alpha2 * dot(setup.w2, setup.mu),
                 setup.alpha2 * setup.alpha2 * quad_form(setup.w2, setup.sigma)};
  return out;
}

DominanceGap dominance_gap(const LinearExpertSetup& setup) {
  setup.validate();
  const double e1_var = setup.alpha1 * setup.alpha1 * quad_form(setup.w1, setup.sigma);
  if (!(e1_var > 0.0)) throw ContractError("dominance_gap: w1 yields zero output variance");
  const double moe_var = quad_form(combine(setup), setup.sigma);
  const double mean_shift = setup.alpha2 * dot(setup.w2, setup.mu);
  DominanceGap g;
  g.variance_ratio = moe_var / e1_var;
  g.log_term = std::log(e1_var / moe_var);
  g.mean_term = mean_shift * mean_shift / e1_var;
  g.s = 0.5 * (g.variance_ratio + g.log_term + g.mean_term - 1.0);
  return g;
}

std::vector<SweepPoint> dominance_sweep(const LinearExpertSetup& setup,
                                        std::span<const double> scales) {
  const double norm = std::sqrt(dot(setup.w1, setup.w1));
  if (!(norm > 0.0)) throw ContractError("dominance_sweep: template w1 must be non-zero");
  std::vector<SweepPoint> out;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0.0)) throw ContractError("dominance_sweep: scales must be positive");
    if (i > 0 && scales[i] < scales[i - 1])
      throw ContractError("dominance_sweep: scales must be ascending");
    LinearExpertSetup s = setup;
    for (double& v : s.w1) v *= scales[i] / norm;
    out.push_back({scales[i], dominance_gap(s)});
  }
  return out;
}

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::ostringstream out;
  out.precision(17);
  out << "scale,S,var_ratio_term,log_term,mean_term\n";
  for (const auto& p : points)
    out << p.scale << ',' << p.gap.s << ',' << p.gap.variance_ratio << ',' << p.gap.log_term << ','
        << p.gap.mean_term << '\n';
  return out.str();
}

std::vector<MomentSummary> gaussianity_report(std::span<const double> samples, std::size_t n,
                                              std::size_t d) {
  if (samples.size() != n * d) throw ContractError("gaussianity_report: sample matrix size mismatch");
  if (n < 30) throw ContractError("gaussianity_report: need at least 30 samples");
  const double nn = static_cast<double>(n);
  std::vector<MomentSummary> out(d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += samples[i * d + j];
    mean /= nn;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = samples[i * d + j] - mean;
      const double c2 = c * c;
      m2 += c2;
      m3 += c2 * c;
      m4 += c2 * c2;
    }
    MomentSummary& s = out[j];
    s.mean = mean;
    s.variance = m2 / (nn - 1.0);
    m2 /= nn;
    m3 /= nn;
    m4 /= nn;
    if (!(m2 > 1e-300)) {
      s.variance = 0.0;
      s.degenerate = true;
      continue;
    }
    const double g1 = m3 / std::pow(m2, 1.5);
    const double g2 = m4 / (m2 * m2) - 3.0;
    s.skewness = g1 * std::sqrt(nn * (nn - 1.0)) / (nn - 2.0);
    s.excess_kurtosis = ((nn + 1.0) * g2 + 6.0) * (nn - 1.0) / ((nn - 2.0) * (nn - 3.0));
  }
  return out;
}

std::string gaussianity_csv(std::span<const MomentSummary> report) {
  std::ostringstream out;
  out.precision(12);
  out << "dim,mean,variance,skewness,excess_kurtosis,degenerate\n";
  for (std::size_t j = 0; j < report.size(); ++j) {
    const auto& s = report[j];
    out << j << ',' << s.mean << ',' << s.variance << ',' << s.skewness << ','
        << s.excess_kurtosis << ',' << (s.degenerate ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace moelab::theory
