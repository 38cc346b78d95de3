// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qdk/sfu.hpp"

namespace qdk {
namespace {

// Distance in float ULPs at the reference value, with the reference in double
// (whose 53-bit mantissa is far finer than the float result being checked).
double ulp_error(float got, double ref) {
  const float r = static_cast<float>(ref);
  const float up = std::nextafter(std::abs(r), INFINITY);
  const double ulp = static_cast<double>(up) - static_cast<double>(std::abs(r));
  return std::abs(static_cast<double>(got) - ref) / ulp;
}

TEST(Sfu, ExactPoints) {
  EXPECT_EQ(sfu::log2(1.0f), 0.0f);
  for (int k = -126; k <= 127; ++k) EXPECT_EQ(sfu::exp2(static_cast<float>(k)), std::ldexp(1.0f, k));
  for (int k = -20; k <= 20; ++k) EXPECT_EQ(sfu::log2(std::ldexp(1.0f, k)), static_cast<float>(k));
}

TEST(Sfu, DomainErrors) {
  EXPECT_THROW(sfu::log2(0.0f), DomainError);
  EXPECT_THROW(sfu::log2(-1.0f), DomainError);
  EXPECT_THROW(sfu::log2(NAN), DomainError);
  EXPECT_THROW(sfu::exp2(200.0f), DomainError);
  EXPECT_THROW(sfu::exp2(NAN), DomainError);
}

TEST(Sfu, Log2WithinFiveUlp) {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> ud(-10.0, 10.0);
  double worst = 0.0;
  for (int i = 0; i < 200000; ++i) {
    const auto x = static_cast<float>(std::exp2(ud(rng)));
    const double ref = std::log2(static_cast<double>(x));
    if (ref == 0.0) continue;
    worst = std::max(worst, ulp_error(sfu::log2(x), ref));
  }
  EXPECT_LE(worst, 5.0);
}

TEST(Sfu, Exp2WithinFiveUlp) {
  std::mt19937_64 rng(52);
  std::uniform_real_distribution<double> ud(-10.0, 10.0);
  double worst = 0.0;
  for (int i = 0; i < 200000; ++i) {
    const auto x = static_cast<float>(ud(rng));
    worst = std::max(worst, ulp_error(sfu::exp2(x), std::exp2(static_cast<double>(x))));
  }
  EXPECT_LE(worst, 5.0);
}

}  // namespace
}  // namespace qdk
