// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "qdk/tensor.hpp"

namespace qdk {

/// Predicted and reference depth maps (H×W, metres) plus an optional validity mask.
struct DepthPair {
  Tensor prediction;
  Tensor ground_truth;
  std::optional<Tensor> valid_mask;  // non-zero = valid; absent = all valid
};

struct DepthMetrics {
  double absrel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double log10 = 0.0;
  double silog = 0.0;  // variance form, no x100 scaling
  double sqrel = 0.0;
};

inline DepthMetrics evaluate(const DepthPair& pair) {
  const Tensor& p = pair.prediction;
  const Tensor& g = pair.ground_truth;
  if (p.shape() != g.shape()) throw ShapeError("prediction and ground truth differ in shape");
  if (pair.valid_mask && pair.valid_mask->shape() != p.shape()) {
    throw ShapeError("mask shape differs from depth shape");
  }

  double n = 0.0, absrel = 0.0, sq = 0.0, sqrel = 0.0, sqlog = 0.0, l10 = 0.0;
  double t1 = 0.0, t2 = 0.0, t3 = 0.0;
  std::vector<double> log_diffs;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (pair.valid_mask && (*pair.valid_mask)[i] == 0.0) continue;
    const double pv = p[i], gv = g[i];
    if (!(pv > 0.0) || !(gv > 0.0)) throw DomainError("depth values must be strictly positive");
    n += 1.0;
    const double diff = pv - gv;
    absrel += std::abs(diff) / gv;
    sq += diff * diff;
    sqrel += diff * diff / gv;
    const double d = std::log(pv) - std::log(gv);
    sqlog += d * d;
    log_diffs.push_back(d);
    l10 += std::abs(std::log10(pv) - std::log10(gv));
    const double ratio = std::max(pv / gv, gv / pv);
    if (ratio < 1.25) t1 += 1.0;
    if (ratio < 1.25 * 1.25) t2 += 1.0;
    if (ratio < 1.25 * 1.25 * 1.25) t3 += 1.0;
  }
  if (n == 0.0) throw DomainError("depth evaluation needs at least one valid pixel");

  DepthMetrics m;
  m.absrel = absrel / n;
  m.delta1 = t1 / n;
  m.delta2 = t2 / n;
  m.delta3 = t3 / n;
  m.rmse = std::sqrt(sq / n);
  m.rmse_log = std::sqrt(sqlog / n);
  m.log10 = l10 / n;
  double mean_d = 0.0;
  for (double d : log_diffs) mean_d += d;
  mean_d /= n;
  double var = 0.0;
  for (double d : log_diffs) var += (d - mean_d) * (d - mean_d);
  m.silog = std::sqrt(var / n);
  m.sqrel = sqrel / n;
  return m;
}

}  // namespace qdk
