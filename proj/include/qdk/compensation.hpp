// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "qdk/tensor.hpp"

namespace qdk {

inline constexpr double kDefaultDampRatio = 0.01;

/// Layer-wise compensation of activation quantization error.
/// weight: out×in; original / quantized: in×n with samples as columns.
struct CompensationProblem {
  Tensor weight;
  Tensor original;
  Tensor quantized;
  double damp_ratio = kDefaultDampRatio;
};

/// Weight update dW minimizing ||W X - (W + dW) X̂||_F^2:
///   dW = W (X - X̂) X̂ᵀ (X̂ X̂ᵀ + λI)^-1,   λ = damp_ratio · mean(diag(X̂ X̂ᵀ)).
/// The sign follows from the objective's normal equations.
inline Tensor compensate(const CompensationProblem& p) {
  const Tensor& w = p.weight;
  const Tensor& x = p.original;
  const Tensor& xq = p.quantized;
  if (w.rank() != 2 || x.rank() != 2 || xq.rank() != 2) throw ShapeError("compensate expects matrices");
  if (x.shape() != xq.shape()) throw ShapeError("original and quantized activations differ in shape");
  if (w.cols() != x.rows()) {
    throw ShapeError("weight " + shape_string(w.shape()) + " incompatible with activations " +
                     shape_string(x.shape()));
  }
  if (p.damp_ratio < 0.0) throw DomainError("damp_ratio must be non-negative");

  const std::size_t in = x.rows(), n = x.cols();
  Tensor gram({in, in});
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = i; j < in; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) acc += xq.at(i, c) * xq.at(j, c);
      gram.at(i, j) = acc;
      gram.at(j, i) = acc;
    }
  if (p.damp_ratio > 0.0) {
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < in; ++i) mean_diag += gram.at(i, i);
    mean_diag /= static_cast<double>(in);
    // An all-zero Gram still needs a positive shift to be solvable.
    const double lambda = p.damp_ratio * (mean_diag > 0.0 ? mean_diag : 1.0);
    for (std::size_t i = 0; i < in; ++i) gram.at(i, i) += lambda;
  }

  // cross = (X - X̂) X̂ᵀ, in×in
  Tensor cross({in, in});
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < in; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) acc += (x.at(i, c) - xq.at(i, c)) * xq.at(j, c);
      cross.at(i, j) = acc;
    }

  // dW = W·cross·gram⁻¹  ⇔  gram·dWᵀ = crossᵀ·Wᵀ   (gram symmetric)
  const Tensor rhs = matmul(transpose(cross), transpose(w));
  Tensor solved;
  try {
    solved = cholesky_solve(gram, rhs);
  } catch (const SolverError& e) {
    throw SolverError(std::string("activation Gram matrix is singular (") + e.what() +
                      "); raise damp_ratio above 0");
  }
  return transpose(solved);
}

/// Compensation for a conv layer: `original` / `quantized` are im2col patch
/// matrices ((C·kh·kw) × positions); the kernel is OIHW.
inline Tensor compensate_conv(const Tensor& kernel, const Tensor& original, const Tensor& quantized,
                              double damp_ratio = kDefaultDampRatio) {
  if (kernel.rank() != 4) throw ShapeError("compensate_conv expects an OIHW kernel");
  const std::size_t out = kernel.dim(0);
  const std::size_t patch = kernel.size() / out;
  if (original.rank() != 2 || original.rows() != patch) {
    throw ShapeError("im2col rows do not match the kernel patch size");
  }
  const Tensor delta =
      compensate({kernel.reshaped({out, patch}), original, quantized, damp_ratio});
  return delta.reshaped(kernel.shape());
}

}  // namespace qdk
