// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <array>

#include <random>

#include "qdk/quant.hpp"

namespace qdk {
namespace {

void expect_codes_in_range(const QuantizedTensor& q) {
  for (double c : q.codes.values()) {
    ASSERT_EQ(c, std::round(c));
    ASSERT_GE(c, 0.0);
    ASSERT_LE(c, static_cast<double>(q.params.max_code()));
  }
}

TEST(FitMinmax, ZeroToFifteen) {
  Tensor x({16});
  for (int i = 0; i < 16; ++i) x[i] = i;
  const QuantParams p = fit_minmax(x, 4);
  EXPECT_DOUBLE_EQ(p.scale[0], 1.0);
  EXPECT_EQ(p.zero_point[0], 0);
}

TEST(FitMinmax, SymmetricRangeRoundsHalfAway) {
  const QuantParams p = fit_minmax(Tensor({2}, {-1.0, 1.0}), 4);
  EXPECT_DOUBLE_EQ(p.scale[0], 2.0 / 15.0);
  EXPECT_EQ(p.zero_point[0], 8);
}

TEST(FitMinmax, ConstantTensors) {
  for (double c : {0.0, 3.7, -2.5, 1e-13}) {
    const Tensor x({5}, c);
    const QuantParams p = fit_minmax(x, 4);
    if (std::abs(c) < 1e-11) {
      EXPECT_EQ(p.scale[0], kMinScale);
    }
    const Tensor back = fake_quantize(x, p);
    for (double v : back.values()) EXPECT_NEAR(v, c, 1e-9);
  }
}

TEST(FitMinmax, RejectsLowBitWidth) {
  EXPECT_THROW(fit_minmax(Tensor({3}, 1.0), 1), DomainError);
  EXPECT_THROW(fit_percentile(Tensor({3}, 1.0), 1, 99), DomainError);
}

TEST(FitMinmax, PerChannelEqualsPerTensorOnSlices) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  Tensor x({6, 4});
  for (double& v : x.values()) v = nd(rng);
  for (std::size_t c = 0; c < 4; ++c) x[c] *= 1.0 + c;  // vary per-channel range
  const QuantParams pc = fit_minmax(x, 4, Granularity::per_channel, 1);
  ASSERT_EQ(pc.groups(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    const std::vector<double> vals = ChannelView(x, 1, c).values();
    const QuantParams pt = fit_minmax(Tensor({vals.size()}, vals), 4);
    EXPECT_EQ(pc.scale[c], pt.scale[0]);
    EXPECT_EQ(pc.zero_point[c], pt.zero_point[0]);
  }
}

TEST(FitPercentile, FullPercentileIsMinmax) {
  const Tensor x({4}, {-3.0, 0.5, 1.0, 7.0});
  EXPECT_EQ(fit_percentile(x, 4, 100.0), fit_minmax(x, 4));
  const Tensor c({4}, 2.0);
  EXPECT_EQ(fit_percentile(c, 4, 99.0), fit_minmax(c, 4));
  EXPECT_THROW(fit_percentile(x, 4, 50.0), DomainError);
}

TEST(FitPercentile, ClipsOutliers) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  Tensor x({10000});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = ud(rng);
  for (std::size_t i = 0; i < 100; ++i) x[i * 100] = (i % 2 ? 100.0 : -100.0);
  const QuantParams p = fit_percentile(x, 4, 99.0);
  EXPECT_GE(p.scale[0], 2.0 / 15.0 * 0.9);
  EXPECT_LE(p.scale[0], 2.0 / 15.0 * 1.3);
}

TEST(QuantizeUniform, ScalarExamples) {
  const QuantParams p = QuantParams::per_tensor(0.5, 3, 4);
  const QuantizedTensor q = quantize_uniform(Tensor({3}, {1.0, 10.0, -2.0}), p);
  EXPECT_EQ(q.codes.values(), (std::vector<double>{5, 15, 0}));
  EXPECT_EQ(dequantize_uniform({Tensor({2}, {5.0, 3.0}), p}).values(),
            (std::vector<double>{1.0, 0.0}));
  EXPECT_THROW(quantize_uniform(Tensor({1}), QuantParams::per_tensor(0.0, 0, 4)), DomainError);
  EXPECT_THROW(quantize_uniform(Tensor({1}), QuantParams::per_tensor(-1.0, 0, 4)), DomainError);
}

TEST(QuantizeUniform, RoundTripBoundAndMonotone) {
  std::mt19937_64 rng(13);
  for (int bits : {2, 4, 8}) {
    std::uniform_real_distribution<double> sd(1e-3, 2.0);
    const double s = sd(rng);
    const auto zp = static_cast<std::int64_t>(rng() % (std::uint64_t{1} << bits));
    const QuantParams p = QuantParams::per_tensor(s, zp, bits);
    const double lo = s * (0.0 - zp), hi = s * static_cast<double>(p.max_code() - zp);
    std::uniform_real_distribution<double> xd(lo, hi);
    Tensor x({10000});
    for (double& v : x.values()) v = xd(rng);
    std::sort(x.values().begin(), x.values().end());
    const QuantizedTensor q = quantize_uniform(x, p);
    expect_codes_in_range(q);
    const Tensor back = dequantize_uniform(q);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_LE(std::abs(x[i] - back[i]), s / 2);
      if (i) {
        EXPECT_LE(q.codes[i - 1], q.codes[i]);
      }
    }
  }
}

TEST(FitMse, SingleUnitRatioIsMinmax) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 2.0);
  Tensor x({6, 40});
  for (double& v : x.values()) v = nd(rng);
  const std::array<double, 1> one{1.0};
  EXPECT_EQ(fit_mse(x, 4, one, Granularity::per_channel, 0), fit_minmax(x, 4, Granularity::per_channel, 0));
  const std::array<double, 2> bad{1.0, 1.5};
  EXPECT_THROW(fit_mse(x, 4, bad), DomainError);
  EXPECT_THROW(fit_mse(x, 4, std::span<const double>{}), DomainError);
}

TEST(FitMse, PicksTheBestRatioPerChannel) {
  std::mt19937_64 rng(22);
  std::student_t_distribution<double> td(2.0);
  Tensor x({4, 500});
  for (double& v : x.values()) v = td(rng);
  const QuantParams p = fit_mse(x, 4, kRangeSearchRatios, Granularity::per_channel, 0);
  for (std::size_t c = 0; c < 4; ++c) {
    Tensor row({1, 500});
    for (std::size_t j = 0; j < 500; ++j) row[j] = x.at(c, j);
    const double lo = *std::min_element(row.values().begin(), row.values().end());
    const double hi = *std::max_element(row.values().begin(), row.values().end());
    // Oracle: refit each candidate range from scratch and take the smallest round-trip MSE.
    double best = INFINITY;
    for (double r : kRangeSearchRatios) {
      Tensor corners({2}, {lo * r, hi * r});
      best = std::min(best, mean_squared_error(fake_quantize(row, fit_minmax(corners, 4)), row));
    }
    const QuantParams pc = QuantParams::per_tensor(p.scale[c], p.zero_point[c], 4);
    EXPECT_NEAR(mean_squared_error(fake_quantize(row, pc), row), best, 1e-12);
    EXPECT_LE(best, mean_squared_error(fake_quantize(row, fit_minmax(row, 4)), row));
  }
}

TEST(QuantizeLog2, Examples) {
  QuantParams p = QuantParams::per_tensor(1.0, 0, 4, Scheme::log2);
  const QuantizedTensor q = quantize_log2(Tensor({5}, {0.25, 1.0, 0.3, 0.0, -1.0}), p);
  EXPECT_EQ(q.codes.values(), (std::vector<double>{2, 0, 2, 15, 15}));
  EXPECT_EQ(dequantize_log2({Tensor({2}, {2.0, 0.0}), p}).values(),
            (std::vector<double>{0.25, 1.0}));
  EXPECT_THROW(quantize_log2(Tensor({1}, 0.5), QuantParams::per_tensor(1.0, 0, 4)), DomainError);
}

TEST(QuantizeLog2, RepresentablePointsRoundTripExactly) {
  for (double s : {1.0, 0.375, 3.0}) {
    const QuantParams p = QuantParams::per_tensor(s, 0, 4, Scheme::log2);
    Tensor x({16});
    for (int j = 0; j < 16; ++j) x[j] = std::ldexp(s, -j);
    const QuantizedTensor q = quantize(x, p);
    expect_codes_in_range(q);
    EXPECT_EQ(dequantize(q), x);
  }
}

}  // namespace
}  // namespace qdk
