// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "qdk/compensation.hpp"
#include "qdk/quant.hpp"

namespace qdk {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = nd(rng);
  return t;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

// Row-by-row least squares: (W + dW) X̂ ≈ W X, solved by Householder QR.
Eigen::MatrixXd least_squares_delta(const Tensor& w, const Tensor& x, const Tensor& xq) {
  const Eigen::MatrixXd W = to_eigen(w), X = to_eigen(x), Xq = to_eigen(xq);
  const Eigen::MatrixXd target = (W * X).transpose();
  const Eigen::MatrixXd sol = Xq.transpose().colPivHouseholderQr().solve(target);
  return sol.transpose() - W;
}

TEST(Compensate, ZeroResidualGivesZeroDelta) {
  std::mt19937_64 rng(31);
  const Tensor w = random_tensor({3, 4}, rng);
  const Tensor x = random_tensor({4, 10}, rng);
  const Tensor d = compensate({w, x, x});
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
}

TEST(Compensate, ScalarExampleFollowsTheObjective) {
  const Tensor d = compensate({Tensor({1, 1}, {2.0}), Tensor({1, 2}, {1.0, 1.0}),
                               Tensor({1, 2}, {0.5, 0.5}), 0.0});
  EXPECT_NEAR(d[0], 2.0, 1e-14);
}

TEST(Compensate, MatchesLeastSquaresOracle) {
  std::mt19937_64 rng(32);
  const Tensor w = random_tensor({4, 8}, rng);
  const Tensor x = random_tensor({8, 32}, rng);
  const Tensor xq = fake_quantize(x, fit_minmax(x, 8, Granularity::per_channel, 0));
  const Tensor d = compensate({w, x, xq, 0.0});
  const Eigen::MatrixXd ref = least_squares_delta(w, x, xq);
  EXPECT_LE((to_eigen(d) - ref).norm(), 1e-6 * ref.norm());
}

TEST(Compensate, ResidualIsOrthogonalAtZeroDamping) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = random_tensor({5, 6}, rng);
    const Tensor x = random_tensor({6, 40}, rng);
    const Tensor xq = fake_quantize(x, fit_minmax(x, 4, Granularity::per_channel, 0));
    const Tensor d = compensate({w, x, xq, 0.0});
    const Tensor wx = matmul(w, x);
    const Tensor resid = wx - matmul(w + d, xq);
    EXPECT_LE(frobenius_norm(matmul(resid, transpose(xq))), 1e-8 * frobenius_norm(wx));
  }
}

TEST(Compensate, ObjectiveNeverIncreases) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = random_tensor({4, 6}, rng);
    const Tensor x = random_tensor({6, 30}, rng);
    const Tensor xq = fake_quantize(x, fit_minmax(x, 4, Granularity::per_channel, 0));
    const Tensor wx = matmul(w, x);
    const double before = frobenius_norm(wx - matmul(w, xq));
    const double exact = frobenius_norm(wx - matmul(w + compensate({w, x, xq, 0.0}), xq));
    const double damped = frobenius_norm(wx - matmul(w + compensate({w, x, xq}), xq));
    EXPECT_LE(exact, before);
    EXPECT_LE(damped, before * (1.0 + 1e-6));
  }
}

TEST(Compensate, ScalingEquivariance) {
  std::mt19937_64 rng(35);
  const Tensor w = random_tensor({3, 5}, rng);
  const Tensor x = random_tensor({5, 20}, rng);
  const Tensor xq = fake_quantize(x, fit_minmax(x, 4));
  const Tensor d = compensate({w, x, xq});
  for (double c : {-2.0, 0.5, 3.0}) {
    const Tensor dc = compensate({c * w, x, xq});
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(dc[i], c * d[i], 1e-10 * (1 + std::abs(d[i])));
  }
}

TEST(Compensate, SingularGramNeedsDamping) {
  Tensor x({2, 3}, {1, 2, 3, 2, 4, 6});  // rank one
  const Tensor w({1, 2}, {1.0, 1.0});
  EXPECT_THROW(compensate({w, x, x, 0.0}), SolverError);
  try {
    compensate({w, x, x, 0.0});
  } catch (const SolverError& e) {
    EXPECT_NE(std::string(e.what()).find("damp_ratio"), std::string::npos);
  }
  EXPECT_NO_THROW(compensate({w, x, x, 0.01}));
  EXPECT_NO_THROW(compensate({w, Tensor({2, 3}), Tensor({2, 3}), 0.01}));
}

TEST(Compensate, ShapeErrors) {
  EXPECT_THROW(compensate({Tensor({2, 3}), Tensor({2, 4}), Tensor({2, 4})}), ShapeError);
  EXPECT_THROW(compensate({Tensor({2, 2}), Tensor({2, 4}), Tensor({2, 5})}), ShapeError);
}

TEST(CompensateConv, OneByOneReducesToDense) {
  std::mt19937_64 rng(36);
  const Tensor k = random_tensor({3, 4, 1, 1}, rng);
  const Tensor x = random_tensor({4, 25}, rng);
  const Tensor xq = fake_quantize(x, fit_minmax(x, 4));
  const Tensor dk = compensate_conv(k, x, xq);
  const Tensor dd = compensate({k.reshaped({3, 4}), x, xq});
  EXPECT_EQ(dk.reshaped({3, 4}), dd);
  const Tensor zero = compensate_conv(k, x, x);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(CompensateConv, ThreeByThreeEqualsLoweredDenseProblem) {
  std::mt19937_64 rng(37);
  const Tensor k = random_tensor({2, 1, 3, 3}, rng);
  const Tensor img = random_tensor({1, 5, 5}, rng);
  const Tensor imgq = fake_quantize(img, fit_minmax(img, 4));
  const Tensor cols = im2col(img, 3, 3, 1, 1);
  const Tensor colsq = im2col(imgq, 3, 3, 1, 1);
  const Tensor dk = compensate_conv(k, cols, colsq, 0.0);
  const Eigen::MatrixXd ref = least_squares_delta(k.reshaped({2, 9}), cols, colsq);
  EXPECT_LE((to_eigen(dk.reshaped({2, 9})) - ref).norm(), 1e-6 * ref.norm());
  // The compensated kernel, applied as a convolution, reduces the output error.
  const Tensor target = conv2d(img, k, 1, 1);
  EXPECT_LT(frobenius_norm(target - conv2d(imgq, k + dk, 1, 1)),
            frobenius_norm(target - conv2d(imgq, k, 1, 1)));
}

}  // namespace
}  // namespace qdk
