// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "qdk/tensor.hpp"

namespace qdk {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = nd(rng);
  return t;
}

TEST(Tensor, RejectsZeroExtentAndBadData) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4, 2}), ShapeError);
}

TEST(Tensor, ChannelViewWalksTheRequestedAxis) {
  Tensor t({2, 3, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  const ChannelView v(t, 1, 2);
  EXPECT_EQ(v.values(), (std::vector<double>{4, 5, 10, 11}));
  for (std::size_t j = 0; j < v.size(); ++j) EXPECT_EQ(channel_of(t.shape(), 1, v.offset(j)), 2u);
  EXPECT_THROW(ChannelView(t, 3, 0), ShapeError);
  EXPECT_THROW(ChannelView(t, 1, 3), ShapeError);
}

TEST(Percentile, Examples) {
  std::vector<double> c(4, 3.25);
  EXPECT_EQ(percentile(c, 95), 3.25);
  std::vector<double> r(100);
  for (int i = 0; i < 100; ++i) r[i] = i + 1;
  EXPECT_NEAR(percentile(r, 50), 50.5, 1e-12);
  EXPECT_NEAR(percentile(r, 95), 95.05, 1e-12);
}

TEST(Percentile, Errors) {
  std::vector<double> empty;
  EXPECT_THROW(percentile(empty, 50), DomainError);
  std::vector<double> one{1.0};
  EXPECT_THROW(percentile(one, 0), DomainError);
  EXPECT_THROW(percentile(one, 100), DomainError);
}

TEST(Percentile, MonotoneAndPermutationInvariant) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  std::vector<double> v(57);
  for (double& x : v) x = nd(rng);
  const double lo = *std::min_element(v.begin(), v.end());
  const double hi = *std::max_element(v.begin(), v.end());
  double prev = -1e300;
  for (double e = 0.5; e < 100.0; e += 0.5) {
    const double p = percentile(v, e);
    EXPECT_GE(p, prev);
    EXPECT_GE(p, lo);
    EXPECT_LE(p, hi);
    prev = p;
  }
  std::vector<double> w = v;
  std::shuffle(w.begin(), w.end(), rng);
  EXPECT_EQ(percentile(v, 37.5), percentile(w, 37.5));
}

TEST(Matmul, IdentityAndScalar) {
  std::mt19937_64 rng(1);
  const Tensor b = random_tensor({3, 5}, rng);
  EXPECT_EQ(matmul(Tensor::identity(3), b), b);
  EXPECT_EQ(matmul(b, Tensor::identity(5)), b);
  EXPECT_EQ(matmul(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0}))[0], 6.0);
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({4, 4}, rng);
  const Tensor b = random_tensor({4, 4}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 4; ++p) acc += a.at(i, p) * b.at(p, j);
      EXPECT_EQ(c.at(i, j), acc);
    }
}

TEST(Conv2d, OneByOneIsChannelMatmul) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 4, 4}, rng);
  const Tensor k = random_tensor({2, 3, 1, 1}, rng);
  const Tensor y = conv2d(x, k, 1, 0);
  const Tensor ref = matmul(k.reshaped({2, 3}), x.reshaped({3, 16}));
  EXPECT_EQ(y.reshaped({2, 16}), ref);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 1, 5, 5}, rng);
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0;
  EXPECT_EQ(conv2d(x, k, 1, 1), x);
}

TEST(Conv2d, EqualsIm2colLoweringExactly) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({1, 2, 5, 5}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    const std::size_t stride = 1 + trial % 2, pad = trial % 3;
    const Tensor y = conv2d(x, k, stride, pad);
    const Tensor cols = im2col(x, 3, 3, stride, pad);
    const Tensor ref = matmul(k.reshaped({3, 18}), cols);
    EXPECT_EQ(y.reshaped(ref.shape()), ref);
  }
}

TEST(Conv2d, Col2imIsAdjointOfIm2col) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 6, 6}, rng);
  const Tensor cols = im2col(x, 3, 3, 2, 1);
  const Tensor g = random_tensor(cols.shape(), rng);
  const Tensor back = col2im(g, x.shape(), 3, 3, 2, 1);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i) lhs += cols[i] * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * back[i];
  EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(lhs)));
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), 1, 0), ShapeError);
}

TEST(Cholesky, SolvesAndRejectsIndefinite) {
  const Tensor s({2, 2}, {4, 2, 2, 3});
  const Tensor b({2, 1}, {2, 1});
  const Tensor x = cholesky_solve(s, b);
  const Tensor r = matmul(s, x);
  EXPECT_NEAR(r[0], 2.0, 1e-14);
  EXPECT_NEAR(r[1], 1.0, 1e-14);
  EXPECT_THROW(cholesky_solve(Tensor({2, 2}, {1, 2, 2, 1}), b), SolverError);
}

}  // namespace
}  // namespace qdk
