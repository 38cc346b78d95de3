// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "qdk/lognp.hpp"

namespace qdk {
namespace {

PolishFactors factors(std::vector<double> alpha, std::size_t axis = 0) {
  PolishFactors f;
  f.alpha = std::move(alpha);
  f.channel_axis = axis;
  return f;
}

TEST(Polish, ScalarExamples) {
  for (double a : {1e-3, 0.5, 7.0}) {
    EXPECT_EQ(polish_value(0.0, a), 0.0);
    EXPECT_NEAR(polish_value(a, a), 1.0, 1e-15);
    EXPECT_NEAR(unpolish_value(1.0, a), a, 1e-15 * a);
    EXPECT_EQ(unpolish_value(0.0, a), 0.0);
  }
  EXPECT_NEAR(polish_value(-3.0, 1.0), -2.0, 1e-15);
}

TEST(Polish, OddStrictlyMonotoneAndSignPreserving) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> xd(-100.0, 100.0);
  std::uniform_real_distribution<double> ad(1e-3, 10.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = ad(rng);
    double x = xd(rng), y = xd(rng);
    if (x > y) std::swap(x, y);
    EXPECT_EQ(polish_value(-x, a), -polish_value(x, a));
    if (x < y) {
      EXPECT_LT(polish_value(x, a), polish_value(y, a));
    }
    EXPECT_EQ(std::signbit(polish_value(x, a)), std::signbit(x));
  }
}

TEST(Polish, RoundTripWithinRelativeTolerance) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> xd(-100.0, 100.0);
  std::uniform_real_distribution<double> ad(1e-3, 10.0);
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = xd(rng), a = ad(rng);
    worst = std::max(worst, std::abs(unpolish_value(polish_value(x, a), a) - x) / (1.0 + std::abs(x)));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Polish, TensorTransformUsesChannelAlpha) {
  const Tensor x({2, 3}, {1, 2, 4, -1, -2, -4});
  const PolishFactors f = factors({1.0, 2.0, 4.0}, 1);
  const Tensor y = polish(x, f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], polish_value(x[i], f.alpha[i]), 0.0);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
  EXPECT_NEAR(y[5], -1.0, 1e-15);
  const Tensor back = unpolish(y, f);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
}

TEST(Polish, RejectsBadFactors) {
  EXPECT_THROW(polish(Tensor({2, 2}), factors({1.0, 0.0})), DomainError);
  EXPECT_THROW(unpolish(Tensor({2, 2}), factors({1.0, -1.0})), DomainError);
  EXPECT_THROW(polish(Tensor({2, 2}), factors({1.0})), ShapeError);
}

TEST(CalibratePolish, Examples) {
  const Tensor constant({4, 2}, {3, 0, 3, 0, 3, 0, 3, 0});
  const std::vector<Tensor> one{constant};
  const PolishFactors f = calibrate_polish(one, 95, 1);
  EXPECT_DOUBLE_EQ(f.alpha[0], 3.0);
  EXPECT_DOUBLE_EQ(f.alpha[1], kMinPolishAlpha);

  const std::vector<Tensor> two{Tensor({3}, 2.0), Tensor({3}, -4.0)};
  EXPECT_DOUBLE_EQ(calibrate_polish(two, 95, 0).alpha[0], 3.0);
  EXPECT_EQ(calibrate_polish(two, 95, 0).sample_count, 2u);

  const std::vector<Tensor> none;
  EXPECT_THROW(calibrate_polish(none, 95, 0), DomainError);
  EXPECT_THROW(calibrate_polish(one, 100, 1), DomainError);
}

TEST(CalibratePolish, InvariantToBatchOrder) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> nd;
  std::vector<Tensor> batches;
  for (int b = 0; b < 7; ++b) {
    Tensor t({16, 5});
    for (double& v : t.values()) v = nd(rng) * (1 + b);
    batches.push_back(t);
  }
  const PolishFactors ref = calibrate_polish(batches, 95, 1);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(batches.begin(), batches.end(), rng);
    EXPECT_EQ(calibrate_polish(batches, 95, 1), ref);
  }
}

TEST(PolishedQuantize, ZeroChannelStaysZero) {
  std::mt19937_64 rng(24);
  std::normal_distribution<double> nd;
  Tensor x({32, 3});
  for (std::size_t r = 0; r < 32; ++r) {
    x.at(r, 0) = nd(rng);
    x.at(r, 2) = 5 * nd(rng);
  }
  const std::vector<Tensor> cal{x};
  const PolishFactors f = calibrate_polish(cal, 95, 1);
  const auto [q, p] = polished_quantize(x, f, 4);
  const Tensor back = polished_dequantize(q, f);
  for (std::size_t r = 0; r < 32; ++r) EXPECT_EQ(back.at(r, 1), 0.0);
}

// Direct per-channel minmax path versus polish -> quantize -> unpolish.
struct PathErrors {
  double direct, polished;
};

PathErrors compare_paths(const Tensor& x, int bits) {
  const std::vector<Tensor> cal{x};
  const PolishFactors f = calibrate_polish(cal, kDefaultPolishEpsilon, 1);
  const Tensor direct = fake_quantize(x, fit_minmax(x, bits, Granularity::per_channel, 1));
  const auto [q, p] = polished_quantize(x, f, bits);
  return {mean_squared_error(x, direct), mean_squared_error(x, polished_dequantize(q, f))};
}

Tensor heavy_tailed_channel(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Tensor x({n, 1});
  for (std::size_t i = 0; i < n; ++i) x[i] = nd(rng);
  for (std::size_t i = 0; i < n / 100; ++i) x[i * 100 + 37] = (i % 2) ? 50.0 : -50.0;
  return x;
}

TEST(PolishedQuantize, HeavyTailedChannelBenefits) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const PathErrors e = compare_paths(heavy_tailed_channel(seed, 10000), 4);
    EXPECT_LT(e.polished, 0.5 * e.direct) << "seed " << seed;
  }
}

TEST(PolishedQuantize, GaussianChannelNotCatastrophic) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Tensor x({10000, 1});
    for (double& v : x.values()) v = nd(rng);
    const PathErrors e = compare_paths(x, 4);
    EXPECT_LT(e.polished, 3.0 * e.direct) << "seed " << seed;
  }
}

TEST(PolishedQuantize, BeatsCoveringGridWithoutPolish) {
  // The polished path uses a covering grid; the benefit must come from the
  // transform, not from the grid choice.
  const Tensor x = heavy_tailed_channel(9, 10000);
  const std::vector<Tensor> cal{x};
  const PolishFactors f = calibrate_polish(cal, kDefaultPolishEpsilon, 1);
  const Tensor covering =
      fake_quantize(x, fit_minmax_covering(x, 4, Granularity::per_channel, 1));
  const auto [q, p] = polished_quantize(x, f, 4);
  EXPECT_LT(mean_squared_error(x, polished_dequantize(q, f)), 0.5 * mean_squared_error(x, covering));
}

}  // namespace
}  // namespace qdk
