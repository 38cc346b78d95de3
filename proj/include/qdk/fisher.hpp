// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qdk/network.hpp"
#include "qdk/quant.hpp"
#include "qdk/tensor.hpp"

namespace qdk {

/// Kronecker factors of one layer's Fisher block, F ≈ G ⊗ A.
struct KfacFactors {
  Tensor g;  // out × out
  Tensor a;  // in × in
  std::size_t sample_count = 0;
};

/// G = (1/√S) Σ g gᵀ and A = (1/√S) Σ x̂ x̂ᵀ over the S columns of `grads`
/// (out×S) and `acts` (in×S). Columns are folded in chunks of `chunk`.
inline KfacFactors accumulate_kfac(const Tensor& grads, const Tensor& acts, std::size_t chunk = 256) {
  if (grads.rank() != 2 || acts.rank() != 2) throw ShapeError("kfac expects column matrices");
  if (grads.cols() != acts.cols()) {
    throw ShapeError("kfac gradient and activation sample counts differ: " + std::to_string(grads.cols()) +
                     " vs " + std::to_string(acts.cols()));
  }
  if (chunk == 0) chunk = 1;
  const std::size_t s = grads.cols();
  auto outer_sum = [&](const Tensor& m) {
    const std::size_t n = m.rows();
    Tensor out({n, n});
    for (std::size_t c0 = 0; c0 < s; c0 += chunk) {
      const std::size_t c1 = std::min(s, c0 + chunk);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = c0; c < c1; ++c) acc += m.at(i, c) * m.at(j, c);
          out.at(i, j) += acc;
        }
    }
    const double norm = 1.0 / std::sqrt(static_cast<double>(s));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) out.at(j, i) = (out.at(i, j) *= norm);
    return out;
  };
  return {outer_sum(grads), outer_sum(acts), s};
}

/// vec(dW)ᵀ (G ⊗ A) vec(dW) with row-major vec, evaluated as tr(G dW A dWᵀ).
inline double quadratic_loss(const Tensor& dw, const KfacFactors& f) {
  if (dw.rank() != 2 || f.g.rows() != dw.rows() || f.a.rows() != dw.cols()) {
    throw ShapeError("weight delta " + shape_string(dw.shape()) + " does not match factors");
  }
  const Tensor m = matmul(matmul(f.g, dw), f.a);
  double acc = 0.0;
  for (std::size_t i = 0; i < dw.size(); ++i) acc += dw[i] * m[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Adaptive rounding

inline constexpr double kZeta = 1.1;
inline constexpr double kGamma = -0.1;

/// Rectified sigmoid clip(sigmoid(v)·(ζ − γ) + γ, 0, 1).
inline double rectified_sigmoid(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  return std::clamp(s * (kZeta - kGamma) + kGamma, 0.0, 1.0);
}

inline double rectified_sigmoid_grad(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  const double raw = s * (kZeta - kGamma) + kGamma;
  if (raw <= 0.0 || raw >= 1.0) return 0.0;
  return (kZeta - kGamma) * s * (1.0 - s);
}

/// v such that rectified_sigmoid(v) == h for h in (0, 1).
inline double rectified_sigmoid_inverse(double h) {
  const double s = (h - kGamma) / (kZeta - kGamma);
  return std::log(s / (1.0 - s));
}

/// ŵ = s·(clip(⌊w/s⌋ + h + zp, 0, 2^k − 1) − zp) for a rounding offset h in [0, 1].
inline double adaround_value(double w, double s, std::int64_t zp, int bits, double h) {
  const auto qmax = static_cast<double>((std::int64_t{1} << bits) - 1);
  const double code = std::clamp(std::floor(w / s) + h + static_cast<double>(zp), 0.0, qmax);
  return s * (code - static_cast<double>(zp));
}

/// Elementwise adaround_value with h = rectified_sigmoid(v). Parameters are
/// per-tensor or per output row (axis 0).
inline Tensor adaround_quantize(const Tensor& w, const QuantParams& p, const Tensor& v) {
  if (v.shape() != w.shape()) throw ShapeError("rounding variable shape differs from weight");
  detail::check_params(p, w);
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = detail::group_index(p, w.shape(), i);
    out[i] = adaround_value(w[i], p.scale[g], p.zero_point[g], p.bits, rectified_sigmoid(v[i]));
  }
  return out;
}

/// h(v) = Σ (1 − |2σ(v) − 1|^β).
inline double regularizer(const Tensor& v, double beta) {
  if (!(beta > 0.0)) throw DomainError("regularizer beta must be positive");
  double acc = 0.0;
  for (double x : v.values()) acc += 1.0 - std::pow(std::abs(2.0 * rectified_sigmoid(x) - 1.0), beta);
  return acc;
}

struct ReconstructionConfig {
  int iterations = 2000;
  double learning_rate = 1e-2;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double lambda_reg = 0.01;
  std::size_t batch_size = 256;  // KFAC accumulation chunk
  double warmup_fraction = 0.2;
  int log_every = 0;  // 0 disables progress records

  void validate() const {
    if (iterations < 1) throw DomainError("reconstruction needs at least one iteration");
    if (!(beta_start >= beta_end && beta_end > 0.0)) throw DomainError("need beta_start >= beta_end > 0");
    if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
    if (lambda_reg < 0.0) throw DomainError("lambda_reg must be non-negative");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw DomainError("warmup_fraction must lie in [0, 1)");
  }
};

struct RoundingState {
  Tensor v;
  double beta = 20.0;
  double lambda_reg = 0.0;
  int step = 0;
};

struct ReconstructionLog {
  int step;
  double loss;
  double penalty;
  double beta;
};

/// Pieces of the differentiable surrogate
///   J(v) = quadratic_loss(W − ŵ(v)) / norm + λ·h(v).
struct Surrogate {
  const Tensor& w;
  const QuantParams& p;
  const KfacFactors& f;
  double norm = 1.0;

  double value(const Tensor& v, double beta, double lambda) const {
    const double q = quadratic_loss(w - adaround_quantize(w, p, v), f) / norm;
    return lambda > 0.0 ? q + lambda * regularizer(v, beta) : q;
  }

  /// Gradient with the outer integer clip treated as straight-through.
  Tensor gradient(const Tensor& v, double beta, double lambda) const {
    const Tensor dw = w - adaround_quantize(w, p, v);
    const Tensor m = matmul(matmul(f.g, dw), f.a);
    Tensor grad(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double s = p.scale[detail::group_index(p, w.shape(), i)];
      const double dh = rectified_sigmoid_grad(v[i]);
      double g = -2.0 * m[i] / norm * s * dh;
      if (lambda > 0.0 && dh != 0.0) {
        const double u = 2.0 * rectified_sigmoid(v[i]) - 1.0;
        const double au = std::abs(u);
        if (au > 0.0) g -= lambda * beta * std::pow(au, beta - 1.0) * (u > 0 ? 1.0 : -1.0) * 2.0 * dh;
      }
      grad[i] = g;
    }
    return grad;
  }
};

/// Scale of the quadratic term: expected loss of a unit-step perturbation.
inline double quadratic_norm(const QuantParams& p, const KfacFactors& f) {
  double s2 = 0.0;
  for (double s : p.scale) s2 += s * s;
  s2 /= static_cast<double>(p.scale.size());
  double tg = 0.0, ta = 0.0;
  for (std::size_t i = 0; i < f.g.rows(); ++i) tg += f.g.at(i, i);
  for (std::size_t i = 0; i < f.a.rows(); ++i) ta += f.a.at(i, i);
  const double n = s2 * tg * ta / static_cast<double>(f.g.rows() * f.a.rows());
  return n > 0.0 && std::isfinite(n) ? n : 1.0;
}

/// Per-row range search for the weight grid: each row's min/max is shrunk by
/// the ratio in `ratios` whose round-to-nearest error has the lowest curvature
/// cost G_rr · e A eᵀ (the diagonal-in-rows part of the KFAC loss).
inline QuantParams search_weight_ranges(const Tensor& w, int bits, const KfacFactors& f,
                                        std::span<const double> ratios) {
  if (w.rank() != 2) throw ShapeError("search_weight_ranges expects a 2-D weight matrix");
  if (f.g.rows() != w.rows() || f.a.rows() != w.cols()) throw ShapeError("KFAC factors do not match weight shape");
  if (ratios.empty()) throw DomainError("search_weight_ranges needs at least one ratio");
  QuantParams p = fit_minmax(w, bits, Granularity::per_channel, 0);
  const std::size_t in = w.cols();
  std::vector<double> e(in);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double lo = 0.0, hi = 0.0;
    for (std::size_t c = 0; c < in; ++c) {
      lo = std::min(lo, w.at(r, c));
      hi = std::max(hi, w.at(r, c));
    }
    double best = std::numeric_limits<double>::infinity();
    for (double ratio : ratios) {
      if (!(ratio > 0.0 && ratio <= 1.0)) throw DomainError("range ratios must lie in (0, 1]");
      const auto [sc, zp] = detail::range_to_params(lo * ratio, hi * ratio, bits, false);
      for (std::size_t c = 0; c < in; ++c) {
        const double q = std::clamp(std::round(w.at(r, c) / sc) + static_cast<double>(zp), 0.0,
                                    static_cast<double>(p.max_code()));
        e[c] = w.at(r, c) - (q - static_cast<double>(zp)) * sc;
      }
      double cost = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        double ai = 0.0;
        for (std::size_t j = 0; j < in; ++j) ai += f.a.at(i, j) * e[j];
        cost += e[i] * ai;
      }
      cost *= f.g.at(r, r);
      if (cost < best) {
        best = cost;
        p.scale[r] = sc;
        p.zero_point[r] = zp;
      }
    }
  }
  return p;
}

struct ReconstructionResult {
  Tensor weight;  // dequantized grid values
  RoundingState state;
  double loss = 0.0;      // quadratic_loss(W − ŵ)
  double rtn_loss = 0.0;  // same for round-to-nearest
};

namespace detail {

// Binary rounding offsets h ∈ {0, 1} and the weight they produce.
inline Tensor rounded_weight(const Tensor& w, const QuantParams& p, const std::vector<char>& h) {
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = group_index(p, w.shape(), i);
    out[i] = adaround_value(w[i], p.scale[g], p.zero_point[g], p.bits, h[i] ? 1.0 : 0.0);
  }
  return out;
}

// Elements whose flip subsets are enumerated together once pair flips stall.
inline constexpr std::size_t kFlipWindow = 12;

// Descent on the exact quadratic loss over binary roundings: best single flip,
// then best pair flip, then best windowed subset flip, until none improves.
// Keeps M = G·dW·A current.
inline double local_search(const Tensor& w, const QuantParams& p, const KfacFactors& f,
                           std::vector<char>& h) {
  const std::size_t rows = w.rows(), cols = w.cols(), m = w.size();
  Tensor dw = w - rounded_weight(w, p, h);
  Tensor mm = matmul(matmul(f.g, dw), f.a);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) loss += dw[i] * mm[i];

  // Change of dW_i if element i flips; 0 when clipping makes both choices equal.
  auto delta_of = [&](std::size_t i) {
    const std::size_t g = group_index(p, w.shape(), i);
    const double cur = adaround_value(w[i], p.scale[g], p.zero_point[g], p.bits, h[i] ? 1.0 : 0.0);
    const double alt = adaround_value(w[i], p.scale[g], p.zero_point[g], p.bits, h[i] ? 0.0 : 1.0);
    return cur - alt;
  };
  auto apply = [&](std::size_t i, double d) {
    const std::size_t r = i / cols, c = i % cols;
    for (std::size_t a = 0; a < rows; ++a)
      for (std::size_t b = 0; b < cols; ++b) mm.at(a, b) += d * f.g.at(a, r) * f.a.at(c, b);
    dw[i] += d;
    h[i] = !h[i];
  };

  const double tol = 1e-15 * (1.0 + std::abs(loss));
  std::vector<double> d(m), single(m);
  for (int pass = 0; pass < 10000; ++pass) {
    std::size_t best = m;
    double best_gain = -tol;
    for (std::size_t i = 0; i < m; ++i) {
      d[i] = delta_of(i);
      const std::size_t r = i / cols, c = i % cols;
      single[i] = d[i] == 0.0 ? 0.0 : 2.0 * d[i] * mm[i] + d[i] * d[i] * f.g.at(r, r) * f.a.at(c, c);
      if (single[i] < best_gain) {
        best_gain = single[i];
        best = i;
      }
    }
    if (best < m) {
      apply(best, d[best]);
      loss += best_gain;
      continue;
    }
    std::size_t bi = m, bj = m;
    for (std::size_t i = 0; i < m; ++i) {
      if (d[i] == 0.0) continue;
      const std::size_t ri = i / cols, ci = i % cols;
      for (std::size_t j = i + 1; j < m; ++j) {
        if (d[j] == 0.0) continue;
        const double gain =
            single[i] + single[j] + 2.0 * d[i] * d[j] * f.g.at(ri, j / cols) * f.a.at(ci, j % cols);
        if (gain < best_gain) {
          best_gain = gain;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < m) {
      apply(bi, d[bi]);
      apply(bj, d[bj]);
      loss += best_gain;
      continue;
    }
    // Neither single nor pair flips help: try every flip subset of a sliding
    // window, which escapes minima that need three or more coordinated flips.
    std::vector<std::size_t> best_set;
    std::vector<double> gain;
    for (std::size_t lo = 0; lo < m; lo += kFlipWindow / 2) {
      const std::size_t hi = std::min(m, lo + kFlipWindow);
      const std::size_t k = hi - lo;
      // gain[mask] = gain[mask without its top bit] + that element's own term
      // + its cross terms with the rest of the mask.
      gain.assign(std::size_t{1} << k, 0.0);
      std::uint32_t best_mask = 0;
      for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
        const auto a = static_cast<std::size_t>(std::bit_width(mask) - 1);
        const std::uint32_t rest = mask ^ (1u << a);
        const std::size_t i = lo + a;
        double g = gain[rest] + single[i];
        if (d[i] != 0.0)
          for (std::uint32_t r = rest; r; r &= r - 1) {
            const std::size_t j = lo + static_cast<std::size_t>(std::countr_zero(r));
            g += 2.0 * d[i] * d[j] * f.g.at(i / cols, j / cols) * f.a.at(i % cols, j % cols);
          }
        gain[mask] = g;
        if (g < best_gain && std::popcount(mask) >= 3) {
          best_gain = g;
          best_mask = mask;
        }
      }
      if (best_mask) {
        best_set.clear();
        for (std::size_t a = 0; a < k; ++a)
          if (best_mask >> a & 1) best_set.push_back(lo + a);
      }
      if (hi == m) break;
    }
    if (best_set.empty()) break;
    for (std::size_t i : best_set) apply(i, d[i]);
    loss += best_gain;
  }
  return quadratic_loss(w - rounded_weight(w, p, h), f);
}

}  // namespace detail

/// Learns per-weight floor/ceil decisions minimizing the KFAC-weighted weight
/// perturbation. Adam on the rectified-sigmoid surrogate with an annealed
/// binarization penalty; then hard rounding, a flip-descent polish on the exact
/// loss, and a final comparison against round-to-nearest.
inline ReconstructionResult reconstruct_layer(
    const Tensor& w, const QuantParams& p, const KfacFactors& f, const ReconstructionConfig& cfg,
    const std::function<void(const ReconstructionLog&)>& on_log = {}) {
  cfg.validate();
  if (w.rank() != 2) throw ShapeError("reconstruct_layer expects an out×in weight");
  if (!w.all_finite()) throw DomainError("reconstruct_layer needs finite weights");
  if (p.scheme != Scheme::uniform) throw DomainError("adaptive rounding needs a uniform grid");
  if (p.granularity == Granularity::per_channel && p.axis != 0) {
    throw DomainError("adaptive rounding expects per-output-row parameters");
  }
  detail::check_params(p, w);
  if (f.g.rows() != w.rows() || f.a.rows() != w.cols()) throw ShapeError("factors do not match weight");

  const std::size_t m = w.size();
  RoundingState st;
  st.v = Tensor(w.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double s = p.scale[detail::group_index(p, w.shape(), i)];
    const double frac = std::clamp(w[i] / s - std::floor(w[i] / s), 1e-4, 1.0 - 1e-4);
    st.v[i] = rectified_sigmoid_inverse(frac);
  }

  const Surrogate sur{w, p, f, quadratic_norm(p, f)};
  const int warmup = static_cast<int>(cfg.warmup_fraction * cfg.iterations);
  const int anneal = std::max(1, cfg.iterations - warmup - 1);
  std::vector<double> m1(m, 0.0), m2(m, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 0; t < cfg.iterations; ++t) {
    st.step = t;
    if (t < warmup) {
      st.lambda_reg = 0.0;
      st.beta = cfg.beta_start;
    } else {
      st.lambda_reg = cfg.lambda_reg;
      const double frac = static_cast<double>(t - warmup) / anneal;
      st.beta = cfg.beta_start * std::pow(cfg.beta_end / cfg.beta_start, std::min(1.0, frac));
    }
    const Tensor grad = sur.gradient(st.v, st.beta, st.lambda_reg);
    const bool log_now = cfg.log_every > 0 && (t % cfg.log_every == 0 || t + 1 == cfg.iterations);
    if (log_now || !grad.all_finite()) {
      const double q = sur.value(st.v, st.beta, 0.0);
      const double pen = regularizer(st.v, st.beta);
      if (!std::isfinite(q) || !grad.all_finite()) {
        throw OptimizationError("adaptive rounding diverged at step " + std::to_string(t) +
                                " (learning rate " + std::to_string(cfg.learning_rate) + ")");
      }
      if (on_log) on_log({t, q, pen, st.beta});
    }
    const double c1 = 1.0 - std::pow(b1, t + 1), c2 = 1.0 - std::pow(b2, t + 1);
    for (std::size_t i = 0; i < m; ++i) {
      m1[i] = b1 * m1[i] + (1 - b1) * grad[i];
      m2[i] = b2 * m2[i] + (1 - b2) * grad[i] * grad[i];
      st.v[i] -= cfg.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
    }
  }

  std::vector<char> learned(m), rtn(m);
  for (std::size_t i = 0; i < m; ++i) {
    learned[i] = rectified_sigmoid(st.v[i]) >= 0.5;
    const double s = p.scale[detail::group_index(p, w.shape(), i)];
    rtn[i] = std::round(w[i] / s) > std::floor(w[i] / s);
  }
  const double rtn_loss = quadratic_loss(w - detail::rounded_weight(w, p, rtn), f);
  std::vector<char> from_rtn = rtn;
  double loss = detail::local_search(w, p, f, learned);
  const double alt = detail::local_search(w, p, f, from_rtn);
  std::vector<char>* best = &learned;
  if (alt < loss) {
    loss = alt;
    best = &from_rtn;
  }
  if (rtn_loss <= loss) {
    loss = rtn_loss;
    best = &rtn;
  }
  for (std::size_t i = 0; i < m; ++i) st.v[i] = (*best)[i] ? 10.0 : -10.0;
  st.step = cfg.iterations;
  return {detail::rounded_weight(w, p, *best), std::move(st), loss, rtn_loss};
}

// ---------------------------------------------------------------------------
// Gradient capture

/// Squared-error distillation gradients: for every weight layer, the gradient
/// of ½‖f(x) − target‖² with respect to that layer's output, as an
/// out × positions matrix per input, concatenated over inputs. Entries for
/// non-weight layers are left empty.
inline std::vector<Tensor> capture_gradients(const Network& net, std::span<const Tensor> inputs,
                                             std::span<const Tensor> targets) {
  if (inputs.size() != targets.size()) throw ShapeError("one target per calibration input is required");
  if (inputs.empty()) throw DomainError("capture_gradients needs calibration inputs");
  std::vector<std::vector<Tensor>> parts(net.layers.size());
  ForwardTrace trace;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const Tensor out = forward(net, inputs[s], &trace);
    if (out.shape() != targets[s].shape()) throw ShapeError("target shape differs from network output");
    const std::vector<Tensor> grads = backward(net, trace, out - targets[s]);
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      if (net.layers[l].quantizable()) parts[l].push_back(output_columns(net.layers[l], grads[l]));
  }
  std::vector<Tensor> out(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    if (!parts[l].empty()) out[l] = hconcat(parts[l]);
  return out;
}

}  // namespace qdk
