// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "qdk/metrics.hpp"

namespace qdk {
namespace {

Tensor random_depth(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> ud(0.5, 10.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = ud(rng);
  return t;
}

TEST(DepthMetrics, PerfectPrediction) {
  std::mt19937_64 rng(41);
  const Tensor g = random_depth(rng, {4, 5});
  const DepthMetrics m = evaluate({g, g, std::nullopt});
  EXPECT_EQ(m.absrel, 0.0);
  EXPECT_EQ(m.delta1, 1.0);
  EXPECT_EQ(m.delta2, 1.0);
  EXPECT_EQ(m.delta3, 1.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.silog, 0.0);
  EXPECT_EQ(m.sqrel, 0.0);
}

TEST(DepthMetrics, DoubledPrediction) {
  std::mt19937_64 rng(42);
  const Tensor g = random_depth(rng, {3, 3});
  const DepthMetrics m = evaluate({2.0 * g, g, std::nullopt});
  EXPECT_NEAR(m.absrel, 1.0, 1e-15);
  EXPECT_EQ(m.delta1, 0.0);
  EXPECT_EQ(m.delta3, 0.0);  // 2 > 1.25^3 = 1.953125
  EXPECT_NEAR(m.silog, 0.0, 1e-12);
  EXPECT_NEAR(m.rmse_log, std::log(2.0), 1e-12);
  EXPECT_NEAR(m.log10, std::log10(2.0), 1e-12);
}

TEST(DepthMetrics, SinglePixel) {
  const DepthMetrics m = evaluate({Tensor({1, 1}, {1.2}), Tensor({1, 1}, {1.0}), std::nullopt});
  EXPECT_NEAR(m.absrel, 0.2, 1e-15);
  EXPECT_EQ(m.delta1, 1.0);
  EXPECT_NEAR(m.rmse, 0.2, 1e-15);
  EXPECT_NEAR(m.sqrel, 0.04, 1e-15);
}

TEST(DepthMetrics, MaskSelectsPixels) {
  const Tensor p({1, 3}, {1.2, -5.0, 4.0});
  const Tensor g({1, 3}, {1.0, 1.0, 2.0});
  const Tensor mask({1, 3}, {1.0, 0.0, 1.0});
  const DepthMetrics m = evaluate({p, g, mask});
  EXPECT_NEAR(m.absrel, (0.2 + 1.0) / 2, 1e-15);
  EXPECT_THROW(evaluate({p, g, std::nullopt}), DomainError);
  EXPECT_THROW(evaluate({p, g, Tensor({1, 3})}), DomainError);
  EXPECT_THROW(evaluate({p, Tensor({3, 1}, 1.0), std::nullopt}), ShapeError);
}

TEST(DepthMetrics, Properties) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor g = random_depth(rng, {6, 7});
    const Tensor p = random_depth(rng, {6, 7});
    const DepthMetrics m = evaluate({p, g, std::nullopt});
    EXPECT_LE(m.delta1, m.delta2);
    EXPECT_LE(m.delta2, m.delta3);
    EXPECT_GE(m.delta1, 0.0);
    EXPECT_LE(m.delta3, 1.0);
    EXPECT_NEAR(evaluate({3.5 * p, g, std::nullopt}).silog, m.silog, 1e-12);

    std::vector<std::size_t> perm(g.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pp(p.shape()), gp(g.shape());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      pp[i] = p[perm[i]];
      gp[i] = g[perm[i]];
    }
    const DepthMetrics mp = evaluate({pp, gp, std::nullopt});
    EXPECT_NEAR(mp.absrel, m.absrel, 1e-12);
    EXPECT_NEAR(mp.rmse, m.rmse, 1e-12);
    EXPECT_NEAR(mp.silog, m.silog, 1e-12);
    EXPECT_EQ(mp.delta1, m.delta1);
  }
}

}  // namespace
}  // namespace qdk
