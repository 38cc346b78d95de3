// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "qdk/error.hpp"

namespace qdk {

/// Bit widths; 32 means "left in floating point".
struct Precision {
  int weight_bits = 4;
  int act_bits = 8;

  bool weights_quantized() const { return weight_bits < 32; }
  bool acts_quantized() const { return act_bits < 32; }
  std::string name() const {
    if (!weights_quantized() && !acts_quantized()) return "fp32";
    std::string n = "w" + std::to_string(weight_bits);
    if (acts_quantized()) n += "a" + std::to_string(act_bits);
    return n;
  }
  friend bool operator==(const Precision&, const Precision&) = default;
};

inline Precision parse_precision(const std::string& s) {
  if (s == "fp32") return {32, 32};
  if (s == "w4") return {4, 32};
  if (s == "w4a8") return {4, 8};
  if (s == "w4a4") return {4, 4};
  throw FormatError("unknown precision '" + s + "' (expected fp32, w4, w4a8 or w4a4)");
}

}  // namespace qdk
