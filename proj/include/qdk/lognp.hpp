// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "qdk/quant.hpp"
#include "qdk/tensor.hpp"

namespace qdk {

inline constexpr double kMinPolishAlpha = 1e-4;
inline constexpr double kDefaultPolishEpsilon = 95.0;

/// Per-channel polishing factors for the signed-log activation transform.
struct PolishFactors {
  std::vector<double> alpha;
  double epsilon = kDefaultPolishEpsilon;
  std::size_t channel_axis = 0;
  std::size_t sample_count = 1;

  friend bool operator==(const PolishFactors&, const PolishFactors&) = default;
};

/// alpha_i = mean over batches of the epsilon-th percentile of |x_i|, floored
/// at kMinPolishAlpha per batch. Per-channel sums run over sorted per-batch
/// values so the result does not depend on batch order.
inline PolishFactors calibrate_polish(std::span<const Tensor> batches, double epsilon,
                                      std::size_t channel_axis) {
  if (batches.empty()) throw DomainError("calibrate_polish needs at least one batch");
  if (!(epsilon > 0.0 && epsilon < 100.0)) throw DomainError("polish epsilon must lie in (0, 100)");
  const Tensor& first = batches.front();
  if (channel_axis >= first.rank()) throw ShapeError("polish channel axis out of range");
  const std::size_t channels = first.dim(channel_axis);

  std::vector<std::vector<double>> per_batch(channels);
  for (const Tensor& b : batches) {
    if (b.rank() <= channel_axis || b.dim(channel_axis) != channels) {
      throw ShapeError("calibration batches disagree on channel extent");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      std::vector<double> mags = ChannelView(b, channel_axis, c).values();
      for (double& v : mags) {
        if (!std::isfinite(v)) throw DomainError("non-finite calibration activation");
        v = std::abs(v);
      }
      per_batch[c].push_back(std::max(percentile(mags, epsilon), kMinPolishAlpha));
    }
  }

  PolishFactors f;
  f.epsilon = epsilon;
  f.channel_axis = channel_axis;
  f.sample_count = batches.size();
  f.alpha.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    std::sort(per_batch[c].begin(), per_batch[c].end());
    double sum = 0.0;
    for (double a : per_batch[c]) sum += a;
    f.alpha[c] = sum / static_cast<double>(per_batch[c].size());
  }
  return f;
}

namespace detail {

inline void check_polish(const Tensor& x, const PolishFactors& f) {
  if (f.channel_axis >= x.rank()) throw ShapeError("polish channel axis out of range");
  if (f.alpha.size() != x.dim(f.channel_axis)) throw ShapeError("polish factor count mismatch");
  for (double a : f.alpha) {
    if (!(a > 0.0)) throw DomainError("polishing factor must be positive");
  }
}

}  // namespace detail

/// sign(x) * [log2(|x| + a) - log2(a)], evaluated as log2(1 + |x|/a).
inline double polish_value(double x, double alpha) {
  if (x == 0.0) return 0.0;
  const double mag = std::log1p(std::abs(x) / alpha) / std::numbers::ln2;
  return x < 0.0 ? -mag : mag;
}

/// Inverse of polish_value: sign(y) * [2^(|y| + log2(a)) - a], evaluated as a*(2^|y| - 1).
inline double unpolish_value(double y, double alpha) {
  if (y == 0.0) return 0.0;
  const double mag = alpha * std::expm1(std::abs(y) * std::numbers::ln2);
  return y < 0.0 ? -mag : mag;
}

inline Tensor polish(const Tensor& x, const PolishFactors& f) {
  detail::check_polish(x, f);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = polish_value(x[i], f.alpha[channel_of(x.shape(), f.channel_axis, i)]);
  }
  return y;
}

inline Tensor unpolish(const Tensor& y, const PolishFactors& f) {
  detail::check_polish(y, f);
  Tensor x(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    x[i] = unpolish_value(y[i], f.alpha[channel_of(y.shape(), f.channel_axis, i)]);
  }
  return x;
}

/// Polish, fit per-channel asymmetric uniform parameters on the polished
/// values, then quantize. The grid covers the polished extremes exactly:
/// unpolishing amplifies any clipping error exponentially.
inline std::pair<QuantizedTensor, QuantParams> polished_quantize(const Tensor& x,
                                                                 const PolishFactors& f, int bits) {
  const Tensor y = polish(x, f);
  QuantParams p = fit_minmax_covering(y, bits, Granularity::per_channel, f.channel_axis);
  QuantizedTensor q = quantize_uniform(y, p);
  return {std::move(q), std::move(p)};
}

/// Dequantize then unpolish.
inline Tensor polished_dequantize(const QuantizedTensor& q, const PolishFactors& f) {
  return unpolish(dequantize_uniform(q), f);
}

}  // namespace qdk
