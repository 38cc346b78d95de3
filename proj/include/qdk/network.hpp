// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "qdk/lognp.hpp"
#include "qdk/quant.hpp"
#include "qdk/tensor.hpp"

namespace qdk {

// Sequential single-sample network. Token activations are T×D matrices (one
// row per token); image activations are C×H×W.

enum class LayerKind { linear, conv2d, attention, softmax, layernorm, activation, to_tokens, to_image, residual };
enum class ActivationFn { relu, gelu, softplus };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::attention: return "attention";
    case LayerKind::softmax: return "softmax";
    case LayerKind::layernorm: return "layernorm";
    case LayerKind::activation: return "activation";
    case LayerKind::to_tokens: return "to_tokens";
    case LayerKind::to_image: return "to_image";
    case LayerKind::residual: return "residual";
  }
  return "?";
}

/// Frozen quantizer applied to a layer's input.
struct InputQuant {
  QuantParams params;
  std::optional<PolishFactors> polish;  // polish -> quantize -> unpolish when set
};

struct Layer {
  LayerKind kind = LayerKind::linear;
  std::string name;
  Tensor weight;  // linear: out×in; conv2d: OIHW; layernorm: gamma
  Tensor bias;    // linear / conv2d: out; layernorm: beta
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t heads = 1;
  std::size_t height = 0, width = 0;  // to_image target grid
  std::size_t skip = 0;               // residual: adds the input of layer `skip`
  ActivationFn fn = ActivationFn::gelu;
  double eps = 1e-5;

  // Quantization state. Weights are stored already dequantized.
  std::optional<InputQuant> input_quant;
  std::optional<QuantParams> weight_quant;
  std::optional<QuantParams> prob_quant;  // attention probabilities
  bool polish_allowed = false;

  bool quantizable() const { return kind == LayerKind::linear || kind == LayerKind::conv2d; }

  /// Weight viewed as a matrix (out × fan-in).
  Tensor weight_matrix() const {
    const std::size_t out = weight.dim(0);
    return weight.reshaped({out, weight.size() / out});
  }
};

struct Network {
  std::vector<Layer> layers;
  Shape input_shape;
  std::vector<std::size_t> outlier_channels;  // planted decoder-input channels, if any

  std::vector<std::size_t> quantizable_layers() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].quantizable()) idx.push_back(i);
    return idx;
  }
};

/// Channel axis of a layer's input activation for per-channel quantization.
inline std::size_t input_channel_axis(const Layer& l) { return l.kind == LayerKind::conv2d ? 0 : 1; }

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void softmax_rows(Tensor& s) {
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double mx = s.at(r, 0);
    for (std::size_t c = 1; c < s.cols(); ++c) mx = std::max(mx, s.at(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < s.cols(); ++c) sum += (s.at(r, c) = std::exp(s.at(r, c) - mx));
    for (std::size_t c = 0; c < s.cols(); ++c) s.at(r, c) /= sum;
  }
}

// gS = P ⊙ (gP − rowsum(gP ⊙ P))
inline Tensor softmax_rows_backward(const Tensor& p, const Tensor& gp) {
  Tensor gs(p.shape());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) dot += gp.at(r, c) * p.at(r, c);
    for (std::size_t c = 0; c < p.cols(); ++c) gs.at(r, c) = p.at(r, c) * (gp.at(r, c) - dot);
  }
  return gs;
}

inline Tensor columns(const Tensor& x, std::size_t from, std::size_t count) {
  Tensor out({x.rows(), count});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = x.at(r, from + c);
  return out;
}

inline void set_columns(Tensor& x, std::size_t from, const Tensor& part) {
  for (std::size_t r = 0; r < part.rows(); ++r)
    for (std::size_t c = 0; c < part.cols(); ++c) x.at(r, from + c) = part.at(r, c);
}

inline void check_tokens(const Layer& l, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError(l.name + ": expected a T×D token matrix, got " + shape_string(x.shape()));
}

struct AttentionParts {
  std::size_t tokens, dim, head_dim;
};

inline AttentionParts attention_parts(const Layer& l, const Tensor& x) {
  check_tokens(l, x);
  if (x.cols() % 3 != 0) throw ShapeError(l.name + ": attention input width must be 3·D");
  const std::size_t d = x.cols() / 3;
  if (l.heads == 0 || d % l.heads != 0) throw ShapeError(l.name + ": D not divisible by heads");
  return {x.rows(), d, d / l.heads};
}

// Attention probabilities of one head, before and after the optional quantizer.
inline std::pair<Tensor, Tensor> attention_probs(const Layer& l, const Tensor& x, std::size_t h,
                                                 const AttentionParts& a) {
  const Tensor q = columns(x, h * a.head_dim, a.head_dim);
  const Tensor k = columns(x, a.dim + h * a.head_dim, a.head_dim);
  Tensor s = (1.0 / std::sqrt(static_cast<double>(a.head_dim))) * matmul(q, transpose(k));
  softmax_rows(s);
  Tensor used = l.prob_quant ? fake_quantize(s, *l.prob_quant) : s;
  return {std::move(s), std::move(used)};
}

}  // namespace detail

/// Applies a layer's frozen input quantizer (identity when unset).
inline Tensor quantize_input(const Layer& l, const Tensor& x) {
  if (!l.input_quant) return x;
  const InputQuant& iq = *l.input_quant;
  if (iq.polish) return unpolish(fake_quantize(polish(x, *iq.polish), iq.params), *iq.polish);
  return fake_quantize(x, iq.params);
}

/// Attention probabilities for every head, as the layer computes them (pre-quantizer).
inline std::vector<Tensor> attention_probabilities(const Layer& l, const Tensor& x) {
  const auto a = detail::attention_parts(l, x);
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < l.heads; ++h) out.push_back(detail::attention_probs(l, x, h, a).first);
  return out;
}

/// Forward pass of one layer on an already input-quantized activation.
inline Tensor layer_forward(const Layer& l, const Tensor& x) {
  switch (l.kind) {
    case LayerKind::linear: {
      detail::check_tokens(l, x);
      if (x.cols() != l.weight.cols()) {
        throw ShapeError(l.name + ": input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(l.weight.shape()));
      }
      Tensor y = matmul(x, transpose(l.weight));
      if (!l.bias.empty())
        for (std::size_t r = 0; r < y.rows(); ++r)
          for (std::size_t c = 0; c < y.cols(); ++c) y.at(r, c) += l.bias[c];
      return y;
    }
    case LayerKind::conv2d: {
      Tensor y = conv2d(x, l.weight, l.stride, l.padding);
      if (!l.bias.empty()) {
        const std::size_t plane = y.size() / l.bias.size();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += l.bias[i / plane];
      }
      return y;
    }
    case LayerKind::attention: {
      const auto a = detail::attention_parts(l, x);
      Tensor out({a.tokens, a.dim});
      for (std::size_t h = 0; h < l.heads; ++h) {
        const Tensor p = detail::attention_probs(l, x, h, a).second;
        const Tensor v = detail::columns(x, 2 * a.dim + h * a.head_dim, a.head_dim);
        detail::set_columns(out, h * a.head_dim, matmul(p, v));
      }
      return out;
    }
    case LayerKind::softmax: {
      detail::check_tokens(l, x);
      Tensor y = x;
      detail::softmax_rows(y);
      return y;
    }
    case LayerKind::layernorm: {
      detail::check_tokens(l, x);
      Tensor y(x.shape());
      const auto d = static_cast<double>(x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) mu += x.at(r, c);
        mu /= d;
        for (std::size_t c = 0; c < x.cols(); ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
        const double inv = 1.0 / std::sqrt(var / d + l.eps);
        for (std::size_t c = 0; c < x.cols(); ++c)
          y.at(r, c) = l.weight[c] * (x.at(r, c) - mu) * inv + l.bias[c];
      }
      return y;
    }
    case LayerKind::activation: {
      Tensor y(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        switch (l.fn) {
          case ActivationFn::relu: y[i] = std::max(x[i], 0.0); break;
          case ActivationFn::gelu: y[i] = detail::gelu(x[i]); break;
          case ActivationFn::softplus: y[i] = detail::softplus(x[i]); break;
        }
      }
      return y;
    }
    case LayerKind::to_tokens: {
      if (x.rank() != 3) throw ShapeError(l.name + ": to_tokens expects C×H×W");
      const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
      return transpose(x.reshaped({c, hw}));
    }
    case LayerKind::to_image: {
      detail::check_tokens(l, x);
      if (x.rows() != l.height * l.width) throw ShapeError(l.name + ": token count does not match grid");
      return transpose(x).reshaped({x.cols(), l.height, l.width});
    }
    case LayerKind::residual:
      throw UnsupportedLayerError(l.name + ": residual layers need the network context (use forward)");
  }
  throw UnsupportedLayerError("unknown layer kind");
}

/// Gradient w.r.t. the layer input given the gradient w.r.t. its output.
/// Quantizers are straight-through.
inline Tensor layer_backward(const Layer& l, const Tensor& x, const Tensor& gy) {
  switch (l.kind) {
    case LayerKind::linear: return matmul(gy, l.weight);
    case LayerKind::conv2d: {
      const std::size_t out = l.weight.dim(0);
      const Tensor gmat = gy.reshaped({out, gy.size() / out});
      const Tensor gcols = matmul(transpose(l.weight_matrix()), gmat);
      return col2im(gcols, x.shape(), l.weight.dim(2), l.weight.dim(3), l.stride, l.padding);
    }
    case LayerKind::attention: {
      const auto a = detail::attention_parts(l, x);
      const double scale = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
      Tensor gx(x.shape());
      for (std::size_t h = 0; h < l.heads; ++h) {
        const auto [p, used] = detail::attention_probs(l, x, h, a);
        const Tensor q = detail::columns(x, h * a.head_dim, a.head_dim);
        const Tensor k = detail::columns(x, a.dim + h * a.head_dim, a.head_dim);
        const Tensor v = detail::columns(x, 2 * a.dim + h * a.head_dim, a.head_dim);
        const Tensor go = detail::columns(gy, h * a.head_dim, a.head_dim);
        const Tensor gp = matmul(go, transpose(v));
        const Tensor gv = matmul(transpose(used), go);
        const Tensor gs = scale * detail::softmax_rows_backward(p, gp);
        detail::set_columns(gx, h * a.head_dim, matmul(gs, k));
        detail::set_columns(gx, a.dim + h * a.head_dim, matmul(transpose(gs), q));
        detail::set_columns(gx, 2 * a.dim + h * a.head_dim, gv);
      }
      return gx;
    }
    case LayerKind::softmax: return detail::softmax_rows_backward(layer_forward(l, x), gy);
    case LayerKind::layernorm: {
      Tensor gx(x.shape());
      const auto d = static_cast<double>(x.cols());
      std::vector<double> xn(x.cols()), gxn(x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) mu += x.at(r, c);
        mu /= d;
        for (std::size_t c = 0; c < x.cols(); ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
        const double inv = 1.0 / std::sqrt(var / d + l.eps);
        double mg = 0.0, mgx = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          xn[c] = (x.at(r, c) - mu) * inv;
          gxn[c] = gy.at(r, c) * l.weight[c];
          mg += gxn[c];
          mgx += gxn[c] * xn[c];
        }
        mg /= d;
        mgx /= d;
        for (std::size_t c = 0; c < x.cols(); ++c) gx.at(r, c) = inv * (gxn[c] - mg - xn[c] * mgx);
      }
      return gx;
    }
    case LayerKind::activation: {
      Tensor gx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        double d = 0.0;
        switch (l.fn) {
          case ActivationFn::relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case ActivationFn::gelu: d = detail::gelu_grad(x[i]); break;
          case ActivationFn::softplus: d = detail::sigmoid(x[i]); break;
        }
        gx[i] = gy[i] * d;
      }
      return gx;
    }
    case LayerKind::to_tokens: return transpose(gy).reshaped(x.shape());
    case LayerKind::to_image: return transpose(gy.reshaped({gy.dim(0), gy.dim(1) * gy.dim(2)}));
    case LayerKind::residual: return gy;  // the skip branch is handled by backward()
  }
  throw UnsupportedLayerError(l.name + ": no backward rule");
}

/// Per-layer activations of one forward pass.
struct ForwardTrace {
  std::vector<Tensor> inputs;     // what each layer received
  std::vector<Tensor> effective;  // after its input quantizer
  Tensor output;
};

inline void check_residual(const Network& net, std::size_t i) {
  if (net.layers[i].skip >= i) throw ShapeError(net.layers[i].name + ": residual must skip from an earlier layer");
}

inline Tensor forward(const Network& net, const Tensor& x, ForwardTrace* trace = nullptr) {
  ForwardTrace local;
  ForwardTrace& t = trace ? *trace : local;
  t.inputs.clear();
  t.effective.clear();
  Tensor cur = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    Tensor eff = quantize_input(l, cur);
    t.inputs.push_back(cur);
    t.effective.push_back(eff);
    if (l.kind == LayerKind::residual) {
      check_residual(net, i);
      const Tensor& other = t.inputs[l.skip];
      if (other.shape() != eff.shape()) throw ShapeError(l.name + ": residual branch shapes differ");
      cur = eff + other;
    } else {
      cur = layer_forward(l, eff);
    }
  }
  t.output = cur;
  return cur;
}

/// Back-propagates `grad_output` through a recorded pass. Returns the gradient
/// with respect to every layer's output.
inline std::vector<Tensor> backward(const Network& net, const ForwardTrace& trace,
                                    const Tensor& grad_output) {
  if (trace.effective.size() != net.layers.size()) throw ShapeError("trace does not match network");
  std::vector<Tensor> grads(net.layers.size());
  std::vector<Tensor> skip_grads(net.layers.size());  // extra gradient w.r.t. a layer's input
  Tensor g = grad_output;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const Layer& l = net.layers[i];
    grads[i] = g;
    if (l.kind == LayerKind::residual) {
      check_residual(net, i);
      Tensor& acc = skip_grads[l.skip];
      acc = acc.empty() ? g : acc + g;
    }
    g = layer_backward(l, trace.effective[i], g);
    if (!skip_grads[i].empty()) g = g + skip_grads[i];
  }
  return grads;
}

/// Matrix whose columns are the layer's input vectors: D×T for linear layers,
/// the im2col patch matrix for conv layers.
inline Tensor input_columns(const Layer& l, const Tensor& x) {
  if (l.kind == LayerKind::linear) return transpose(x);
  if (l.kind == LayerKind::conv2d) return im2col(x, l.weight.dim(2), l.weight.dim(3), l.stride, l.padding);
  throw UnsupportedLayerError(l.name + ": not a weight layer");
}

/// Output-gradient matrix with one column per output position (out × positions).
inline Tensor output_columns(const Layer& l, const Tensor& gy) {
  if (l.kind == LayerKind::linear) return transpose(gy);
  if (l.kind == LayerKind::conv2d) return gy.reshaped({gy.dim(0), gy.size() / gy.dim(0)});
  throw UnsupportedLayerError(l.name + ": not a weight layer");
}

}  // namespace qdk
