// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qdk/tensor.hpp"

namespace qdk {

enum class Granularity { per_tensor, per_channel };
enum class Scheme { uniform, log2 };

/// Scale / zero-point mapping for one tensor. Per-channel parameters carry one
/// (scale, zero_point) pair per channel along `axis`.
struct QuantParams {
  std::vector<double> scale;
  std::vector<std::int64_t> zero_point;
  int bits = 8;
  Granularity granularity = Granularity::per_tensor;
  std::size_t axis = 0;
  Scheme scheme = Scheme::uniform;

  std::int64_t max_code() const { return (std::int64_t{1} << bits) - 1; }
  std::size_t groups() const { return scale.size(); }

  static QuantParams per_tensor(double scale, std::int64_t zero_point, int bits,
                                Scheme scheme = Scheme::uniform) {
    return QuantParams{{scale}, {zero_point}, bits, Granularity::per_tensor, 0, scheme};
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct QuantizedTensor {
  Tensor codes;
  QuantParams params;
};

/// Scale floor used when a group's range collapses to a single point.
inline constexpr double kMinScale = 1e-12;

/// Shrink ratios tried by the range searches, from the full range down to 30%.
inline constexpr std::array<double, 15> kRangeSearchRatios{1.0,  0.95, 0.9,  0.85, 0.8,  0.75, 0.7, 0.65,
                                                           0.6,  0.55, 0.5,  0.45, 0.4,  0.35, 0.3};

/// Round half away from zero.
inline double round_half_away(double v) { return std::round(v); }

namespace detail {

inline void check_bits(int bits) {
  if (bits < 2) throw DomainError("bit width must be >= 2, got " + std::to_string(bits));
  if (bits > 32) throw DomainError("bit width above 32 is not supported");
}

inline std::size_t group_index(const QuantParams& p, const Shape& shape, std::size_t flat) {
  return p.granularity == Granularity::per_tensor ? 0 : channel_of(shape, p.axis, flat);
}

inline void check_params(const QuantParams& p, const Tensor& x) {
  check_bits(p.bits);
  if (p.scale.empty() || p.scale.size() != p.zero_point.size()) {
    throw DomainError("quant params need one zero point per scale");
  }
  if (p.granularity == Granularity::per_channel) {
    if (p.axis >= x.rank()) throw ShapeError("per-channel axis out of range");
    if (p.scale.size() != x.dim(p.axis)) {
      throw ShapeError("per-channel params have " + std::to_string(p.scale.size()) +
                       " groups for extent " + std::to_string(x.dim(p.axis)));
    }
  }
  for (double s : p.scale) {
    if (!(s > 0.0)) throw DomainError("quantization scale must be positive");
  }
}

// Collects per-group value lists in flat order.
inline std::vector<std::vector<double>> group_values(const Tensor& x, Granularity g,
                                                     std::size_t axis) {
  if (g == Granularity::per_tensor) return {x.values()};
  if (axis >= x.rank()) throw ShapeError("per-channel axis out of range");
  std::vector<std::vector<double>> out(x.dim(axis));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = ChannelView(x, axis, c).values();
  return out;
}

// Maps a (lo, hi) range to (scale, zero point). The range is widened to contain
// zero so that the clipped zero point keeps every in-range value representable.
// With `cover` set, the scale is then enlarged just enough that both range
// endpoints sit exactly on the grid after zero-point rounding.
inline std::pair<double, std::int64_t> range_to_params(double lo, double hi, int bits, bool cover) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const auto levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  double s = (hi - lo) / levels;
  if (!(s > kMinScale)) return {kMinScale, 0};
  const auto zp = static_cast<std::int64_t>(std::clamp(round_half_away(-lo / s), 0.0, levels));
  if (cover) {
    double need = 0.0;
    if (zp > 0) need = std::max(need, -lo / static_cast<double>(zp));
    if (zp < static_cast<std::int64_t>(levels)) {
      need = std::max(need, hi / (levels - static_cast<double>(zp)));
    }
    s = std::max(s, need);
  }
  return {s, zp};
}

inline QuantParams fit_ranges(const std::vector<std::pair<double, double>>& ranges, int bits,
                              Granularity g, std::size_t axis, bool cover) {
  QuantParams p;
  p.bits = bits;
  p.granularity = g;
  p.axis = g == Granularity::per_channel ? axis : 0;
  p.scheme = Scheme::uniform;
  for (const auto& [lo, hi] : ranges) {
    const auto [s, zp] = range_to_params(lo, hi, bits, cover);
    p.scale.push_back(s);
    p.zero_point.push_back(zp);
  }
  return p;
}

inline void check_finite(const Tensor& x) {
  if (!x.all_finite()) throw DomainError("cannot fit quantization range on non-finite values");
}

}  // namespace detail

/// Asymmetric min/max range fit.
inline QuantParams fit_minmax(const Tensor& x, int bits, Granularity g = Granularity::per_tensor,
                              std::size_t axis = 0) {
  detail::check_bits(bits);
  detail::check_finite(x);
  std::vector<std::pair<double, double>> ranges;
  for (const auto& vals : detail::group_values(x, g, axis)) {
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    ranges.emplace_back(*lo, *hi);
  }
  return detail::fit_ranges(ranges, bits, g, axis, /*cover=*/false);
}

/// Min/max fit whose grid reaches both observed extremes, so no calibration
/// value is clipped. Used where clipping error is amplified downstream (the
/// polished activation path).
inline QuantParams fit_minmax_covering(const Tensor& x, int bits,
                                       Granularity g = Granularity::per_tensor,
                                       std::size_t axis = 0) {
  detail::check_bits(bits);
  detail::check_finite(x);
  std::vector<std::pair<double, double>> ranges;
  for (const auto& vals : detail::group_values(x, g, axis)) {
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    ranges.emplace_back(*lo, *hi);
  }
  return detail::fit_ranges(ranges, bits, g, axis, /*cover=*/true);
}

/// Range endpoints at the (100 - clip_pct) and clip_pct percentiles.
inline QuantParams fit_percentile(const Tensor& x, int bits, double clip_pct,
                                  Granularity g = Granularity::per_tensor, std::size_t axis = 0) {
  detail::check_bits(bits);
  if (!(clip_pct > 50.0 && clip_pct <= 100.0)) {
    throw DomainError("clip percentile must lie in (50, 100]");
  }
  if (clip_pct == 100.0) return fit_minmax(x, bits, g, axis);
  detail::check_finite(x);
  std::vector<std::pair<double, double>> ranges;
  for (const auto& vals : detail::group_values(x, g, axis)) {
    ranges.emplace_back(percentile(vals, 100.0 - clip_pct), percentile(vals, clip_pct));
  }
  return detail::fit_ranges(ranges, bits, g, axis, /*cover=*/false);
}

/// Range search: per group, shrinks the min/max range by each ratio in
/// `ratios` and keeps the one with the lowest round-trip MSE on `x`.
inline QuantParams fit_mse(const Tensor& x, int bits, std::span<const double> ratios,
                           Granularity g = Granularity::per_tensor, std::size_t axis = 0) {
  detail::check_bits(bits);
  detail::check_finite(x);
  if (ratios.empty()) throw DomainError("fit_mse needs at least one ratio");
  const auto qmax = static_cast<double>((std::int64_t{1} << bits) - 1);
  QuantParams p = fit_minmax(x, bits, g, axis);
  const auto groups = detail::group_values(x, g, axis);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const auto [lo, hi] = std::minmax_element(groups[c].begin(), groups[c].end());
    double best = std::numeric_limits<double>::infinity();
    for (double ratio : ratios) {
      if (!(ratio > 0.0 && ratio <= 1.0)) throw DomainError("range ratios must lie in (0, 1]");
      const auto [sc, zp] = detail::range_to_params(*lo * ratio, *hi * ratio, bits, false);
      double err = 0.0;
      for (double v : groups[c]) {
        const double q = std::clamp(round_half_away(v / sc) + static_cast<double>(zp), 0.0, qmax);
        const double d = v - sc * (q - static_cast<double>(zp));
        err += d * d;
      }
      if (err < best) {
        best = err;
        p.scale[c] = sc;
        p.zero_point[c] = zp;
      }
    }
  }
  return p;
}

inline QuantizedTensor quantize_uniform(const Tensor& x, const QuantParams& p) {
  if (p.scheme != Scheme::uniform) throw DomainError("quantize_uniform needs a uniform scheme");
  detail::check_params(p, x);
  const auto qmax = static_cast<double>(p.max_code());
  Tensor codes(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = detail::group_index(p, x.shape(), i);
    const double q = round_half_away(x[i] / p.scale[g]) + static_cast<double>(p.zero_point[g]);
    codes[i] = std::clamp(q, 0.0, qmax);
  }
  return {std::move(codes), p};
}

inline Tensor dequantize_uniform(const QuantizedTensor& q) {
  const QuantParams& p = q.params;
  detail::check_params(p, q.codes);
  Tensor x(q.codes.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = detail::group_index(p, x.shape(), i);
    x[i] = p.scale[g] * (q.codes[i] - static_cast<double>(p.zero_point[g]));
  }
  return x;
}

/// Power-of-two code: round(-log2(x/s)). Non-positive inputs take the largest
/// code, i.e. the smallest representable magnitude.
inline QuantizedTensor quantize_log2(const Tensor& x, const QuantParams& p) {
  if (p.scheme != Scheme::log2) throw DomainError("quantize_log2 needs a log2 scheme");
  detail::check_params(p, x);
  const auto qmax = static_cast<double>(p.max_code());
  Tensor codes(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = detail::group_index(p, x.shape(), i);
    if (!(x[i] > 0.0)) {
      codes[i] = qmax;
      continue;
    }
    codes[i] = std::clamp(round_half_away(-std::log2(x[i] / p.scale[g])), 0.0, qmax);
  }
  return {std::move(codes), p};
}

inline Tensor dequantize_log2(const QuantizedTensor& q) {
  const QuantParams& p = q.params;
  detail::check_params(p, q.codes);
  Tensor x(q.codes.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = detail::group_index(p, x.shape(), i);
    x[i] = std::ldexp(p.scale[g], -static_cast<int>(q.codes[i]));
  }
  return x;
}

inline QuantizedTensor quantize(const Tensor& x, const QuantParams& p) {
  return p.scheme == Scheme::log2 ? quantize_log2(x, p) : quantize_uniform(x, p);
}

inline Tensor dequantize(const QuantizedTensor& q) {
  return q.params.scheme == Scheme::log2 ? dequantize_log2(q) : dequantize_uniform(q);
}

/// quantize followed by dequantize.
inline Tensor fake_quantize(const Tensor& x, const QuantParams& p) { return dequantize(quantize(x, p)); }

}  // namespace qdk
