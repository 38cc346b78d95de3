// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "qdk/network.hpp"

namespace qdk {

/// Shape of the toy depth network: a patch-embedding conv, `depth` attention
/// blocks over 8×8 tokens, then a small conv decoder producing an 8×8 depth map.
struct ToyConfig {
  std::uint64_t seed = 1;
  std::size_t width = 16;  // token dimension D
  std::size_t depth = 2;   // attention blocks
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t decoder_width = 16;
  std::size_t outlier_channels = 4;
  double outlier_magnitude = 100.0;  // spike height on a typical highlight token
  std::size_t image_size = 32;
  std::size_t patch = 4;
};

inline constexpr double kOutlierKurtosisThreshold = 18.0;

inline constexpr double kHighlightValue = 4.0;
inline constexpr double kHighlightsPerImage = 2.0;  // Poisson mean

/// Smooth random image: a few oriented sinusoids per channel plus mild noise,
/// and a few saturated "highlight" blocks aligned to the `patch` grid.
inline Tensor synthetic_image(std::mt19937_64& rng, std::size_t channels, std::size_t size,
                              std::size_t patch = 4) {
  std::uniform_real_distribution<double> freq(0.05, 0.5), phase(0.0, 2.0 * std::numbers::pi),
      amp(0.3, 1.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  Tensor img({channels, size, size});
  for (std::size_t c = 0; c < channels; ++c) {
    for (int wave = 0; wave < 4; ++wave) {
      const double fy = freq(rng), fx = freq(rng), ph = phase(rng), a = amp(rng);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          img[(c * size + y) * size + x] +=
              a * std::sin(fy * static_cast<double>(y) + fx * static_cast<double>(x) + ph);
    }
    for (std::size_t i = 0; i < size * size; ++i) img[c * size * size + i] += noise(rng);
  }
  if (patch == 0 || size % patch != 0) return img;
  const std::size_t grid = size / patch;
  std::poisson_distribution<int> count(kHighlightsPerImage);
  std::uniform_int_distribution<std::size_t> cell(0, grid * grid - 1);
  for (int h = count(rng); h > 0; --h) {
    const std::size_t g = cell(rng), y0 = g / grid * patch, x0 = g % grid * patch;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = y0; y < y0 + patch; ++y)
        for (std::size_t x = x0; x < x0 + patch; ++x) img[(c * size + y) * size + x] = kHighlightValue;
  }
  return img;
}

/// Seeded batch of synthetic images. `stream` separates calibration, eval and
/// probe draws that share one seed.
inline std::vector<Tensor> synthetic_images(std::uint64_t seed, std::uint64_t stream, std::size_t count,
                                            std::size_t size = 32, std::size_t patch = 4) {
  std::seed_seq seq{seed, stream, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(synthetic_image(rng, 3, size, patch));
  return out;
}

/// Tokens (row-major over the patch grid) whose patch is a saturated highlight.
inline std::vector<bool> highlight_tokens(const Tensor& img, std::size_t patch) {
  const std::size_t size = img.dim(1), grid = size / patch;
  std::vector<bool> out(grid * grid);
  for (std::size_t t = 0; t < out.size(); ++t) {
    const std::size_t y0 = t / grid * patch, x0 = t % grid * patch;
    bool all = true;
    for (std::size_t c = 0; c < img.dim(0) && all; ++c)
      for (std::size_t y = y0; y < y0 + patch && all; ++y)
        for (std::size_t x = x0; x < x0 + patch && all; ++x)
          all = img[(c * size + y) * size + x] == kHighlightValue;
    out[t] = all;
  }
  return out;
}

namespace stream {
inline constexpr std::uint64_t calibration = 1;
inline constexpr std::uint64_t evaluation = 2;
inline constexpr std::uint64_t probe = 3;
}  // namespace stream

/// Non-excess kurtosis m4 / m2² (3 for a Gaussian).
inline double kurtosis(std::span<const double> v) {
  if (v.empty()) throw DomainError("kurtosis of an empty sequence");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = (x - mean) * (x - mean);
    m2 += d;
    m4 += d * d;
  }
  m2 /= static_cast<double>(v.size());
  m4 /= static_cast<double>(v.size());
  return m2 > 0.0 ? m4 / (m2 * m2) : 0.0;
}

/// Per-channel kurtosis pooled over a set of activations sharing a channel axis.
inline std::vector<double> channel_kurtosis(std::span<const Tensor> acts, std::size_t axis) {
  if (acts.empty()) throw DomainError("channel_kurtosis needs activations");
  const std::size_t channels = acts.front().dim(axis);
  std::vector<double> out(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    std::vector<double> pooled;
    for (const Tensor& t : acts) {
      const std::vector<double> v = ChannelView(t, axis, c).values();
      pooled.insert(pooled.end(), v.begin(), v.end());
    }
    out[c] = kurtosis(pooled);
  }
  return out;
}

/// Index of the first decoder conv (its input carries the planted outliers).
inline std::size_t decoder_entry(const Network& net) {
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].kind == LayerKind::to_image) return i + 1;
  throw UnsupportedLayerError("network has no token-to-image transition");
}

inline std::size_t layer_index(const Network& net, const std::string& name) {
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].name == name) return i;
  throw DomainError("network has no layer named " + name);
}

namespace detail {

inline Tensor init_weight(std::mt19937_64& rng, Shape shape, std::size_t fan_in) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  Tensor w(std::move(shape));
  for (double& v : w.values()) v = nd(rng);
  return w;
}

inline Tensor init_bias(std::mt19937_64& rng, std::size_t n, double scale = 0.1) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor b({n});
  for (double& v : b.values()) v = nd(rng);
  return b;
}

inline Layer linear_layer(std::mt19937_64& rng, std::string name, std::size_t in, std::size_t out) {
  Layer l;
  l.kind = LayerKind::linear;
  l.name = std::move(name);
  l.weight = init_weight(rng, {out, in}, in);
  l.bias = init_bias(rng, out);
  return l;
}

inline Layer conv_layer(std::mt19937_64& rng, std::string name, std::size_t in, std::size_t out,
                        std::size_t k, std::size_t stride, std::size_t pad) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.name = std::move(name);
  l.weight = init_weight(rng, {out, in, k, k}, in * k * k);
  l.bias = init_bias(rng, out);
  l.stride = stride;
  l.padding = pad;
  return l;
}

inline Layer simple_layer(LayerKind kind, std::string name) {
  Layer l;
  l.kind = kind;
  l.name = std::move(name);
  return l;
}

inline Layer norm_layer(std::string name, std::size_t d) {
  Layer l = simple_layer(LayerKind::layernorm, std::move(name));
  l.weight = Tensor({d}, 1.0);
  l.bias = Tensor({d}, 0.0);
  return l;
}

inline Layer residual_layer(std::string name, std::size_t skip) {
  Layer l = simple_layer(LayerKind::residual, std::move(name));
  l.skip = skip;
  return l;
}

inline Layer act_layer(std::string name, ActivationFn fn) {
  Layer l = simple_layer(LayerKind::activation, std::move(name));
  l.fn = fn;
  return l;
}

}  // namespace detail

/// Deterministic toy depth network. With outlier_channels = n > 0, one hidden
/// unit of the last MLP is rewired into a detector of highlight
/// tokens whose output is written into n decoder-input channels. Those
/// channels then carry rare spikes far above their ordinary range, the
/// per-channel outlier pattern of large vision transformers. Like the massive
/// activations of real encoders, the spikes act as a register the decoder
/// ignores: the first decoder conv's weights are zero-mean across the outlier
/// channels, so the float output does not depend on the spike while each
/// channel's ordinary content still does.
inline Network build_toy_mde(const ToyConfig& cfg) {
  if (cfg.width == 0 || cfg.depth == 0 || cfg.heads == 0 || cfg.decoder_width == 0 ||
      cfg.mlp_ratio == 0 || cfg.patch == 0 || cfg.image_size % cfg.patch != 0) {
    throw DomainError("toy network dimensions must be positive and the image divisible by the patch");
  }
  const std::size_t d = cfg.width, hidden = cfg.mlp_ratio * d, grid = cfg.image_size / cfg.patch;
  if (cfg.outlier_channels > d || hidden == 0) {
    throw DomainError("more outlier channels than decoder-input channels");
  }
  std::mt19937_64 rng(cfg.seed);
  using namespace detail;

  Network net;
  net.input_shape = {3, cfg.image_size, cfg.image_size};
  net.layers.push_back(conv_layer(rng, "embed.conv", 3, d, cfg.patch, cfg.patch, 0));
  net.layers.push_back(simple_layer(LayerKind::to_tokens, "embed.tokens"));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    // Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
    const std::string p = "block" + std::to_string(b) + ".";
    const std::size_t attn_in = net.layers.size();
    net.layers.push_back(norm_layer(p + "ln1", d));
    net.layers.push_back(linear_layer(rng, p + "qkv", d, 3 * d));
    Layer attn = simple_layer(LayerKind::attention, p + "attn");
    attn.heads = cfg.heads;
    net.layers.push_back(attn);
    net.layers.push_back(linear_layer(rng, p + "proj", d, d));
    net.layers.push_back(residual_layer(p + "add1", attn_in));
    const std::size_t mlp_in = net.layers.size();
    net.layers.push_back(norm_layer(p + "ln2", d));
    net.layers.push_back(linear_layer(rng, p + "fc1", d, hidden));
    net.layers.push_back(act_layer(p + "gelu", ActivationFn::gelu));
    net.layers.push_back(linear_layer(rng, p + "fc2", hidden, d));
    net.layers.push_back(residual_layer(p + "add2", mlp_in));
  }
  Layer img = simple_layer(LayerKind::to_image, "decoder.image");
  img.height = img.width = grid;
  net.layers.push_back(img);
  net.layers.push_back(conv_layer(rng, "decoder.conv1", d, cfg.decoder_width, 3, 1, 1));
  net.layers.push_back(act_layer("decoder.gelu1", ActivationFn::gelu));
  net.layers.push_back(conv_layer(rng, "decoder.conv2", cfg.decoder_width, cfg.decoder_width, 3, 1, 1));
  net.layers.push_back(act_layer("decoder.gelu2", ActivationFn::gelu));
  net.layers.push_back(conv_layer(rng, "decoder.head", cfg.decoder_width, 1, 1, 1, 0));
  net.layers.back().bias[0] = 1.0;  // keeps predicted depth away from zero
  net.layers.push_back(act_layer("decoder.depth", ActivationFn::softplus));
  for (Layer& l : net.layers)
    if (l.kind == LayerKind::conv2d && l.name.rfind("decoder.", 0) == 0) l.polish_allowed = true;

  if (cfg.outlier_channels == 0) return net;

  // Target channels are a seeded random subset.
  std::vector<std::size_t> chans(d);
  std::iota(chans.begin(), chans.end(), 0);
  std::shuffle(chans.begin(), chans.end(), rng);
  chans.resize(cfg.outlier_channels);
  std::sort(chans.begin(), chans.end());

  // Detector direction: difference of the mean fc1 input over highlight and
  // ordinary tokens of a probe batch. The ramp sits inside the gap between
  // the two projected populations, so the spike is near zero on ordinary tokens.
  const std::string last = "block" + std::to_string(cfg.depth - 1) + ".";
  const std::size_t fc1 = layer_index(net, last + "fc1"), fc2 = layer_index(net, last + "fc2");
  Layer& l1 = net.layers[fc1];
  Layer& l2 = net.layers[fc2];
  const std::vector<Tensor> probe = synthetic_images(cfg.seed, stream::probe, 128, cfg.image_size, cfg.patch);
  std::vector<std::vector<double>> feats;
  std::vector<bool> is_hl;
  ForwardTrace trace;
  for (const Tensor& x : probe) {
    forward(net, x, &trace);
    const std::vector<bool> hl = highlight_tokens(x, cfg.patch);
    const Tensor& in = trace.inputs[fc1];
    for (std::size_t t = 0; t < in.rows(); ++t) {
      feats.emplace_back(in.values().begin() + static_cast<std::ptrdiff_t>(t * d),
                         in.values().begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
      is_hl.push_back(hl[t]);
    }
  }
  std::vector<double> mh(d, 0.0), mo(d, 0.0);
  double nh = 0.0, no = 0.0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    auto& m = is_hl[i] ? mh : mo;
    (is_hl[i] ? nh : no) += 1.0;
    for (std::size_t c = 0; c < d; ++c) m[c] += feats[i][c];
  }
  if (nh == 0.0 || no == 0.0) throw DomainError("probe batch lacks highlight or ordinary tokens");
  for (std::size_t c = 0; c < d; ++c) {
    mh[c] /= nh;
    mo[c] /= no;
  }
  // Fisher discriminant: pooled within-class scatter (lightly ridged) solved
  // against the mean difference.
  Tensor scatter({d, d}), diff({d, 1});
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto& m = is_hl[i] ? mh : mo;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) scatter.at(a, b) += (feats[i][a] - m[a]) * (feats[i][b] - m[b]);
  }
  double trace_s = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace_s += scatter.at(a, a);
  for (std::size_t a = 0; a < d; ++a) {
    scatter.at(a, a) += 1e-6 * trace_s / static_cast<double>(d);
    diff.at(a, 0) = mh[a] - mo[a];
  }
  const Tensor sol = cholesky_solve(scatter, diff);
  std::vector<double> dir(d);
  for (std::size_t c = 0; c < d; ++c) dir[c] = sol.at(c, 0);
  std::vector<double> proj_hl, proj_other;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    double p = 0.0;
    for (std::size_t c = 0; c < d; ++c) p += dir[c] * feats[i][c];
    (is_hl[i] ? proj_hl : proj_other).push_back(p);
  }
  const double lo = percentile(proj_other, 99.9), hi = percentile(proj_hl, 0.1);
  if (!(hi > lo)) throw DomainError("highlight tokens are not separable for this seed");
  // A single hidden unit ramps up across the gap; its gain puts the median
  // highlight token at the configured magnitude.
  const double m = cfg.outlier_magnitude, start = lo + 0.25 * (hi - lo);
  const double gain = m / (percentile(proj_hl, 50.0) - start);
  const std::size_t u = 0;
  for (std::size_t c = 0; c < d; ++c) l1.weight.at(u, c) = gain * dir[c];
  l1.bias[u] = -gain * start;
  for (std::size_t r = 0; r < d; ++r) l2.weight.at(r, u) = std::binary_search(chans.begin(), chans.end(), r) ? 1.0 : 0.0;

  Layer& conv1 = net.layers[layer_index(net, "decoder.conv1")];
  const std::size_t taps = conv1.weight.dim(2) * conv1.weight.dim(3);
  for (std::size_t o = 0; o < conv1.weight.dim(0); ++o)
    for (std::size_t t = 0; t < taps; ++t) {
      double mean = 0.0;
      for (std::size_t c : chans) mean += conv1.weight[(o * d + c) * taps + t];
      mean /= static_cast<double>(chans.size());
      for (std::size_t c : chans) conv1.weight[(o * d + c) * taps + t] -= mean;
    }
  net.outlier_channels = chans;
  return net;
}

}  // namespace qdk
