// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qdk/compensation.hpp"
#include "qdk/fisher.hpp"
#include "qdk/lognp.hpp"
#include "qdk/metrics.hpp"
#include "qdk/network.hpp"
#include "qdk/precision.hpp"
#include "qdk/quant.hpp"

namespace qdk {

enum class Method {
  full,        // polish + compensation + KFAC adaptive rounding
  minmax,      // round-to-nearest weights, min/max activation ranges
  percentile,  // round-to-nearest weights, clipped activation ranges
};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::minmax: return "minmax";
    case Method::percentile: return "percentile";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "full") return Method::full;
  if (s == "minmax") return Method::minmax;
  if (s == "percentile") return Method::percentile;
  throw FormatError("unknown method '" + s + "' (expected full, minmax or percentile)");
}

/// Grid for attention probabilities. `best` picks, per layer, whichever of
/// the two gives the lower calibration error.
enum class ProbGrid { uniform, log2, best };

inline const char* to_string(ProbGrid g) {
  switch (g) {
    case ProbGrid::uniform: return "uniform";
    case ProbGrid::log2: return "log2";
    case ProbGrid::best: return "best";
  }
  return "?";
}

inline ProbGrid parse_prob_grid(const std::string& s) {
  if (s == "uniform") return ProbGrid::uniform;
  if (s == "log2") return ProbGrid::log2;
  if (s == "best") return ProbGrid::best;
  throw FormatError("unknown attention grid '" + s + "' (expected uniform, log2 or best)");
}

// Whole-network runs use a longer rounding schedule than the module default;
// with 2000 steps the W4 result still varied by ~15% between near-identical
// runs, which swamped the small error added by 8-bit activations.
inline ReconstructionConfig default_reconstruction() {
  ReconstructionConfig r;
  r.iterations = 6000;
  return r;
}

struct QuantConfig {
  Precision precision;
  double epsilon = kDefaultPolishEpsilon;
  double damp_ratio = kDefaultDampRatio;
  double percentile_clip = 99.9;
  bool polish = true;           // log polishing of allow-listed layer inputs
  ProbGrid attention_grid = ProbGrid::best;
  bool compensation = true;
  bool range_search = true;  // searched clipping for weights and unpolished activations
  bool adaptive_rounding = true;
  ReconstructionConfig reconstruction = default_reconstruction();
};

struct LayerReport {
  std::string name;
  bool polished = false;
  double compensation_gain = 0.0;  // relative drop of ||WX - W X̂||_F
  double rtn_loss = 0.0;
  double loss = 0.0;
};

struct QuantizedModel {
  Network net;
  Method method = Method::full;
  Precision precision;
  std::vector<LayerReport> layers;
};

namespace detail {

// Channel-major matrix (channels × everything else) pooled over activations.
inline Tensor pool_channels(std::span<const Tensor> acts, std::size_t axis) {
  std::vector<Tensor> parts;
  for (const Tensor& a : acts) {
    const std::size_t c = a.dim(axis);
    Tensor m({c, a.size() / c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      const ChannelView v(a, axis, ch);
      for (std::size_t j = 0; j < v.size(); ++j) m.at(ch, j) = v[j];
    }
    parts.push_back(std::move(m));
  }
  return hconcat(parts);
}

inline QuantParams on_axis(QuantParams p, std::size_t axis) {
  p.axis = axis;
  return p;
}

inline std::vector<Tensor> layer_inputs(const Network& net, std::span<const Tensor> xs, std::size_t layer) {
  std::vector<Tensor> out;
  ForwardTrace trace;
  for (const Tensor& x : xs) {
    forward(net, x, &trace);
    out.push_back(trace.inputs[layer]);
  }
  return out;
}

inline Tensor rtn_weight(const Tensor& w, int bits) {
  const std::size_t out = w.dim(0);
  const Tensor m = w.reshaped({out, w.size() / out});
  return fake_quantize(m, fit_minmax(m, bits, Granularity::per_channel, 0)).reshaped(w.shape());
}

inline QuantParams fit_probabilities(const Layer& l, std::span<const Tensor> inputs, int bits, ProbGrid grid) {
  std::vector<Tensor> probs;
  for (const Tensor& x : inputs)
    for (Tensor& p : attention_probabilities(l, x)) probs.push_back(std::move(p));
  const Tensor pooled = pool_channels(probs, 0);
  const QuantParams uniform = fit_minmax(pooled, bits);
  const QuantParams log2 = QuantParams::per_tensor(1.0, 0, bits, Scheme::log2);  // probabilities never exceed 1
  if (grid == ProbGrid::uniform) return uniform;
  if (grid == ProbGrid::log2) return log2;
  return mean_squared_error(fake_quantize(pooled, log2), pooled) <
                 mean_squared_error(fake_quantize(pooled, uniform), pooled)
             ? log2
             : uniform;
}

}  // namespace detail

/// Layer-by-layer post-training quantization. For Method::full each weight
/// layer, in order: calibrate its input quantizer (with polishing on allowed
/// layers), compensate the weights for the activation error, accumulate KFAC
/// factors on the quantized inputs, then learn the weight rounding. Inputs are
/// always captured from the partially quantized network.
inline QuantizedModel quantize_network(const Network& float_net, std::span<const Tensor> calibration,
                                       const QuantConfig& cfg, Method method,
                                       const std::function<void(const LayerReport&)>& on_layer = {}) {
  if (calibration.empty()) throw DomainError("quantize_network needs calibration inputs");
  QuantizedModel out{float_net, method, cfg.precision, {}};
  const Precision pr = cfg.precision;
  if (!pr.weights_quantized() && !pr.acts_quantized()) return out;
  Network& q = out.net;

  std::vector<Tensor> targets;
  for (const Tensor& x : calibration) targets.push_back(forward(float_net, x));

  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    Layer& layer = q.layers[i];
    const Network& source = method == Method::full ? q : float_net;

    if (layer.kind == LayerKind::attention && pr.acts_quantized()) {
      const std::vector<Tensor> in = detail::layer_inputs(source, calibration, i);
      layer.prob_quant = detail::fit_probabilities(layer, in, pr.act_bits,
                                                   method == Method::full ? cfg.attention_grid : ProbGrid::uniform);
      continue;
    }
    if (!layer.quantizable()) continue;

    LayerReport rep;
    rep.name = layer.name;
    const std::size_t axis = input_channel_axis(layer);
    const std::vector<Tensor> inputs = detail::layer_inputs(source, calibration, i);

    // (a) input quantizer
    if (pr.acts_quantized()) {
      InputQuant iq;
      if (method == Method::full && cfg.polish && layer.polish_allowed) {
        iq.polish = calibrate_polish(inputs, cfg.epsilon, axis);
        std::vector<Tensor> polished;
        for (const Tensor& x : inputs) polished.push_back(polish(x, *iq.polish));
        iq.params = detail::on_axis(
            fit_minmax_covering(detail::pool_channels(polished, axis), pr.act_bits, Granularity::per_channel, 0),
            axis);
        rep.polished = true;
      } else if (method == Method::full && cfg.range_search) {
        iq.params = detail::on_axis(fit_mse(detail::pool_channels(inputs, axis), pr.act_bits, kRangeSearchRatios,
                                            Granularity::per_channel, 0),
                                    axis);
      } else if (method == Method::percentile) {
        iq.params = detail::on_axis(fit_percentile(detail::pool_channels(inputs, axis), pr.act_bits,
                                                   cfg.percentile_clip, Granularity::per_channel, 0),
                                    axis);
      } else {
        iq.params = detail::on_axis(
            fit_minmax(detail::pool_channels(inputs, axis), pr.act_bits, Granularity::per_channel, 0), axis);
      }
      layer.input_quant = std::move(iq);
    }
    if (!pr.weights_quantized()) {
      out.layers.push_back(rep);
      if (on_layer) on_layer(rep);
      continue;
    }

    if (method != Method::full) {
      layer.weight = detail::rtn_weight(layer.weight, pr.weight_bits);
      const std::size_t o = layer.weight.dim(0);
      layer.weight_quant =
          fit_minmax(layer.weight.reshaped({o, layer.weight.size() / o}), pr.weight_bits, Granularity::per_channel, 0);
      out.layers.push_back(rep);
      if (on_layer) on_layer(rep);
      continue;
    }

    // (b) compensation: float-network inputs against quantized-network inputs
    std::vector<Tensor> xcols, xqcols;
    for (std::size_t s = 0; s < calibration.size(); ++s) {
      ForwardTrace ft;
      forward(float_net, calibration[s], &ft);
      xcols.push_back(input_columns(layer, ft.inputs[i]));
      xqcols.push_back(input_columns(layer, quantize_input(layer, inputs[s])));
    }
    const Tensor x = hconcat(xcols), xq = hconcat(xqcols);
    Tensor w = layer.weight_matrix();
    if (cfg.compensation) {
      const Tensor dw = compensate({w, x, xq, cfg.damp_ratio});
      const double before = frobenius_norm(matmul(w, x) - matmul(w, xq));
      w = w + dw;
      const double after = frobenius_norm(matmul(w - dw, x) - matmul(w, xq));
      rep.compensation_gain = before > 0.0 ? 1.0 - after / before : 0.0;
    }
    QuantParams wp = fit_minmax(w, pr.weight_bits, Granularity::per_channel, 0);

    // (c) KFAC factors. Gradients come from a probe in which this layer and
    // every later one is round-to-nearest quantized, so the distillation
    // residual is non-zero even where the upstream network is still exact.
    Tensor result_w;
    if (cfg.adaptive_rounding) {
      Network probe = q;
      probe.layers[i].weight = fake_quantize(w, wp).reshaped(layer.weight.shape());
      for (std::size_t j = i + 1; j < probe.layers.size(); ++j)
        if (probe.layers[j].quantizable())
          probe.layers[j].weight = detail::rtn_weight(probe.layers[j].weight, pr.weight_bits);
      const std::vector<Tensor> grads = capture_gradients(probe, calibration, targets);
      const KfacFactors f = accumulate_kfac(grads[i], xq, cfg.reconstruction.batch_size);
      if (cfg.range_search) wp = search_weight_ranges(w, pr.weight_bits, f, kRangeSearchRatios);
      // (d) rounding
      const ReconstructionResult r = reconstruct_layer(w, wp, f, cfg.reconstruction);
      rep.rtn_loss = r.rtn_loss;
      rep.loss = r.loss;
      result_w = r.weight;
    } else {
      result_w = fake_quantize(w, wp);
    }
    layer.weight = result_w.reshaped(layer.weight.shape());
    layer.weight_quant = wp;
    out.layers.push_back(rep);
    if (on_layer) on_layer(rep);
  }
  return out;
}

/// Depth metrics of a quantized network against the float network's own
/// predictions, pooled over all pixels of the evaluation inputs.
inline DepthMetrics evaluate_fidelity(const Network& reference, const Network& candidate,
                                      std::span<const Tensor> inputs) {
  if (inputs.empty()) throw DomainError("evaluation needs inputs");
  std::vector<double> pred, truth;
  std::size_t w = 0;
  for (const Tensor& x : inputs) {
    const Tensor g = forward(reference, x);
    const Tensor p = forward(candidate, x);
    w = g.dim(g.rank() - 1);
    truth.insert(truth.end(), g.values().begin(), g.values().end());
    pred.insert(pred.end(), p.values().begin(), p.values().end());
  }
  const std::size_t h = truth.size() / w;
  return evaluate({Tensor({h, w}, pred), Tensor({h, w}, truth), std::nullopt});
}

}  // namespace qdk
