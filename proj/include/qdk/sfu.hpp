// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>

#include "qdk/error.hpp"

namespace qdk::sfu {

// Software model of the vector unit's special-function path. Everything is
// evaluated in single precision, the way the FPU array computes it.

/// log2 via m·2^e range reduction with m in [sqrt(1/2), sqrt(2)), then
/// log2(m) = t·P(t²) with t = (m - 1)/(m + 1). P is a degree-3 near-minimax
/// fit (relative error below 7e-10 on the reduced interval).
inline float log2(float x) {
  if (!(x > 0.0f) || !std::isfinite(x)) {
    throw DomainError("sfu log2 needs a positive finite argument, got " + std::to_string(x));
  }
  int e = 0;
  float m = std::frexp(x, &e);  // m in [0.5, 1)
  if (m < 0.70710678f) {
    m *= 2.0f;
    e -= 1;
  }
  const float t = (m - 1.0f) / (m + 1.0f);
  const float u = t * t;
  const float p = 2.88539008f + u * (0.961798845f + u * (0.576714609f + u * 0.431731182f));
  return static_cast<float>(e) + t * p;
}

inline constexpr float kExp2Min = -126.0f;
inline constexpr float kExp2Max = 127.0f;

/// exp2 via x = n + f, n = round(x), f in [-1/2, 1/2]; 2^f = 1 + f·Q(f) with
/// Q a degree-5 near-minimax fit (relative error below 2e-9). Integer inputs
/// are exact because f = 0.
inline float exp2(float x) {
  if (!(x >= kExp2Min && x <= kExp2Max)) {
    throw DomainError("sfu exp2 argument outside [-126, 127]: " + std::to_string(x));
  }
  const float n = std::nearbyint(x);
  const float f = x - n;
  const float q =
      0.693147203f +
      f * (0.240226479f +
           f * (0.0555033247f + f * (0.00961843739f + f * (0.00133988745f + f * 0.000153533504f))));
  const float p = 1.0f + f * q;
  return std::ldexp(p, static_cast<int>(n));
}

/// Cycles the unit spends on one special-function evaluation.
inline constexpr int kCyclesPerOp = 4;

}  // namespace qdk::sfu
