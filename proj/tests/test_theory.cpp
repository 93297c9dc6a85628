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

#include "moelab/error.hpp"
#include "moelab/theory.hpp"
#include "oracles.hpp"

namespace moelab::theory {
namespace {

TEST(GaussianKl, Examples) {
  EXPECT_DOUBLE_EQ(gaussian_kl({0, 1}, {0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_kl({1, 1}, {0, 1}), 0.5);
  EXPECT_NEAR(gaussian_kl({0, 4}, {0, 1}), 0.5 * (4.0 + std::log(0.25) - 1.0), 1e-15);
  EXPECT_NEAR(gaussian_kl({0, 4}, {0, 1}), 0.80686, 1e-5);
  EXPECT_THROW(gaussian_kl({0, 0}, {0, 1}), RangeError);
  EXPECT_THROW(gaussian_kl({0, 1}, {0, -1}), RangeError);
}

TEST(GaussianKl, NonNegativeAndZeroOnlyForEqualParameters) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> m(-3, 3), v(0.1, 5);
  for (int i = 0; i < 1000; ++i) {
    const Gaussian1D p{m(rng), v(rng)}, q{m(rng), v(rng)};
    EXPECT_GT(gaussian_kl(p, q), 0.0);
    EXPECT_EQ(gaussian_kl(p, p), 0.0);
  }
}

TEST(MoEOutputGaussian, AbsentSecondExpert) {
  auto s = oracles::random_setup(3, 5);
  s.w2.assign(3, 0.0);
  const auto out = moe_output_gaussian(s);
  EXPECT_DOUBLE_EQ(out.moe.mean, out.expert1.mean);
  EXPECT_DOUBLE_EQ(out.moe.variance, out.expert1.variance);
}

TEST(MoEOutputGaussian, ZeroMeanInput) {
  auto s = oracles::random_setup(4, 6);
  s.mu.assign(4, 0.0);
  EXPECT_EQ(moe_output_gaussian(s).moe.mean, 0.0);
}

TEST(MoEOutputGaussian, MatchesMonteCarlo) {
  const auto s = oracles::random_setup(2, 11);
  const auto cf = moe_output_gaussian(s).moe;
  const auto mc = oracles::monte_carlo_moe_output(s, 1'000'000, 99);
  EXPECT_LT(std::abs(mc.mean - cf.mean), 3 * mc.se_mean);
  EXPECT_LT(std::abs(mc.variance - cf.variance), 3 * mc.se_variance);
}

TEST(MoEOutputGaussian, RejectsBadSetups) {
  auto s = oracles::unit_setup();
  s.sigma = {-1.0};
  EXPECT_THROW(moe_output_gaussian(s), ContractError);
  s = oracles::unit_setup();
  s.alpha1 = 1.0;
  EXPECT_THROW(moe_output_gaussian(s), ContractError);
  auto t = oracles::random_setup(2, 3);
  t.sigma[1] += 0.5;
  EXPECT_THROW(moe_output_gaussian(t), ContractError);
}

TEST(DominanceGap, HandComputedUnitSetup) {
  const auto g = dominance_gap(oracles::unit_setup());
  EXPECT_NEAR(g.s, 0.5 * (4.0 + std::log(0.25) - 1.0), 1e-15);
  EXPECT_NEAR(g.s, 0.80686, 1e-4);
  EXPECT_DOUBLE_EQ(g.variance_ratio, 4.0);
  EXPECT_DOUBLE_EQ(g.mean_term, 0.0);
}

TEST(DominanceGap, LargeW1) {
  auto s = oracles::unit_setup();
  s.w1 = {1000.0};
  const double r = 500.5 * 500.5 / (500.0 * 500.0);
  const double expected = 0.5 * (r - std::log(r) - 1.0);
  EXPECT_NEAR(dominance_gap(s).s, expected, 1e-15);
  EXPECT_NEAR(dominance_gap(s).s, 1.0e-6, 1e-8);
}

TEST(DominanceGap, ZeroW2GivesZero) {
  auto s = oracles::random_setup(3, 2);
  s.w2.assign(3, 0.0);
  EXPECT_NEAR(dominance_gap(s).s, 0.0, 1e-15);
}

TEST(DominanceGap, DegenerateW1Throws) {
  auto s = oracles::unit_setup();
  s.w1 = {0.0};
  EXPECT_THROW(dominance_gap(s), ContractError);
}

TEST(DominanceGap, ExplicitFormEqualsKlOfConstructedGaussians) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = oracles::random_setup(1 + seed % 5, seed);
    const auto dist = moe_output_gaussian(s);
    EXPECT_NEAR(dominance_gap(s).s, gaussian_kl(dist.moe, dist.expert1), 1e-10);
  }
}

TEST(DominanceGap, ScalingW1ScalesExpertStd) {
  auto s = oracles::random_setup(3, 8);
  const double sd = std::sqrt(moe_output_gaussian(s).expert1.variance);
  for (double& v : s.w1) v *= 3.0;
  EXPECT_NEAR(std::sqrt(moe_output_gaussian(s).expert1.variance), 3.0 * sd, 1e-12);
}

TEST(DominanceSweep, StrictlyDecreasingToEpsilon) {
  const std::vector<double> scales{1, 10, 100, 1000};
  const auto pts = dominance_sweep(oracles::unit_setup(), scales);
  ASSERT_EQ(pts.size(), 4u);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(pts[i].gap.s, pts[i - 1].gap.s);
  EXPECT_LT(pts.back().gap.s, 1e-3);
  EXPECT_NEAR(pts.front().gap.s, 0.80686, 1e-4);
}

TEST(DominanceSweep, ConstantScalesGiveConstantGap) {
  const std::vector<double> scales{5, 5, 5};
  const auto pts = dominance_sweep(oracles::unit_setup(), scales);
  EXPECT_EQ(pts[0].gap.s, pts[1].gap.s);
  EXPECT_EQ(pts[1].gap.s, pts[2].gap.s);
  const std::vector<double> bad{5, 1};
  EXPECT_THROW(dominance_sweep(oracles::unit_setup(), bad), ContractError);
}

TEST(DominanceSweep, CsvHeader) {
  const std::vector<double> scales{1};
  const auto csv = sweep_csv(dominance_sweep(oracles::unit_setup(), scales));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "scale,S,var_ratio_term,log_term,mean_term");
}

TEST(AggregateExperts, GroupReproducesWeightedSum) {
  const std::vector<std::vector<double>> w{{1, 2}, {3, -1}, {0, 4}};
  const std::vector<double> a{0.2, 0.3, 0.1};
  const ExpertGroup g = aggregate_experts(w, a);
  EXPECT_NEAR(g.alpha, 0.6, 1e-15);
  EXPECT_NEAR(g.alpha * g.w[0], 0.2 * 1 + 0.3 * 3, 1e-15);
  EXPECT_NEAR(g.alpha * g.w[1], 0.2 * 2 - 0.3 + 0.4, 1e-15);
}

TEST(Gaussianity, StandardNormalSamples) {
  const std::size_t n = 100'000, d = 3;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0, 1);
  std::vector<double> x(n * d);
  for (double& v : x) v = normal(rng);
  for (const auto& s : gaussianity_report(x, n, d)) {
    EXPECT_LT(std::abs(s.skewness), 0.05);
    EXPECT_LT(std::abs(s.excess_kurtosis), 0.1);
    EXPECT_FALSE(s.degenerate);
  }
}

TEST(Gaussianity, ConstantColumnFlagged) {
  std::vector<double> x(40 * 2);
  for (std::size_t i = 0; i < 40; ++i) {
    x[i * 2] = 3.0;
    x[i * 2 + 1] = static_cast<double>(i);
  }
  const auto r = gaussianity_report(x, 40, 2);
  EXPECT_TRUE(r[0].degenerate);
  EXPECT_FALSE(r[1].degenerate);
  EXPECT_THROW(gaussianity_report(std::span(x).first(20), 10, 2), ContractError);
}

TEST(Gaussianity, BimodalMixtureHasStronglyNegativeKurtosis) {
  // Equal mixture of N(-10,1) and N(10,1): excess kurtosis -> about -1.96.
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0, 1);
  const std::size_t n = 20'000;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = normal(rng) + (i % 2 ? 10.0 : -10.0);
  const auto r = gaussianity_report(x, n, 1);
  EXPECT_LT(r[0].excess_kurtosis, -1.5);
}

}  // namespace
}  // namespace moelab::theory
