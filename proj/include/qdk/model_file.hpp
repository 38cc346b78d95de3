// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qdk/io.hpp"
#include "qdk/lognp.hpp"
#include "qdk/network.hpp"
#include "qdk/quant.hpp"

namespace qdk {

// Layout (all integers little-endian):
//   "QRTD" u16 version  u64 tensor_count
//   per tensor: u32 name_len, name bytes, u8 dtype (1 = f64), u32 rank,
//               rank × u64 extents, size × f64 data
//   "SIDE" u64 record_count
//   per record: u32 name_len, name, u8 presence mask (1 input, 2 weight,
//               4 probabilities, 8 polish), then the present items in that
//               order. QuantParams: u8 bits, u8 granularity, u8 scheme,
//               u64 axis, u64 n, n × f64 scale, n × i64 zero point.
//               PolishFactors: f64 epsilon, u64 axis, u64 samples, u64 n,
//               n × f64 alpha.
inline constexpr char kModelMagic[4] = {'Q', 'R', 'T', 'D'};
inline constexpr char kSidecarMagic[4] = {'S', 'I', 'D', 'E'};
inline constexpr std::uint16_t kModelVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct LayerQuantRecord {
  std::string layer;
  std::optional<QuantParams> input;
  std::optional<QuantParams> weight;
  std::optional<QuantParams> probabilities;
  std::optional<PolishFactors> polish;

  friend bool operator==(const LayerQuantRecord&, const LayerQuantRecord&) = default;
};

struct ModelFile {
  std::vector<Tensor> tensors;  // named
  std::vector<LayerQuantRecord> sidecar;
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void i64(std::int64_t v) { uint(static_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::int64_t i64() { return static_cast<std::int64_t>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  // Guards element counts read from the file before allocating for them.
  std::size_t count(std::size_t element_bytes) {
    const auto n = uint<std::uint64_t>();
    if (element_bytes > 0 && n > (in_.size() - pos_) / element_bytes) throw FormatError("model file truncated");
    return static_cast<std::size_t>(n);
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("model file truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void write_params(ByteWriter& w, const QuantParams& p) {
  w.uint(static_cast<std::uint8_t>(p.bits));
  w.uint(static_cast<std::uint8_t>(p.granularity));
  w.uint(static_cast<std::uint8_t>(p.scheme));
  w.uint(static_cast<std::uint64_t>(p.axis));
  w.uint(static_cast<std::uint64_t>(p.scale.size()));
  for (double s : p.scale) w.f64(s);
  for (std::int64_t z : p.zero_point) w.i64(z);
}

inline QuantParams read_params(ByteReader& r) {
  QuantParams p;
  p.bits = r.uint<std::uint8_t>();
  const auto g = r.uint<std::uint8_t>(), s = r.uint<std::uint8_t>();
  if (g > 1 || s > 1) throw FormatError("model file has an unknown granularity or scheme tag");
  p.granularity = static_cast<Granularity>(g);
  p.scheme = static_cast<Scheme>(s);
  p.axis = static_cast<std::size_t>(r.uint<std::uint64_t>());
  const std::size_t n = r.count(16);
  p.scale.resize(n);
  p.zero_point.resize(n);
  for (double& v : p.scale) v = r.f64();
  for (std::int64_t& z : p.zero_point) z = r.i64();
  return p;
}

inline void write_polish(ByteWriter& w, const PolishFactors& f) {
  w.f64(f.epsilon);
  w.uint(static_cast<std::uint64_t>(f.channel_axis));
  w.uint(static_cast<std::uint64_t>(f.sample_count));
  w.uint(static_cast<std::uint64_t>(f.alpha.size()));
  for (double a : f.alpha) w.f64(a);
}

inline PolishFactors read_polish(ByteReader& r) {
  PolishFactors f;
  f.epsilon = r.f64();
  f.channel_axis = static_cast<std::size_t>(r.uint<std::uint64_t>());
  f.sample_count = static_cast<std::size_t>(r.uint<std::uint64_t>());
  f.alpha.resize(r.count(8));
  for (double& a : f.alpha) a = r.f64();
  return f;
}

}  // namespace detail

inline std::string serialize_model(const ModelFile& m) {
  detail::ByteWriter w;
  w.raw(kModelMagic, 4);
  w.uint(kModelVersion);
  w.uint(static_cast<std::uint64_t>(m.tensors.size()));
  for (const Tensor& t : m.tensors) {
    w.str(t.name());
    w.uint(kDtypeF64);
    w.uint(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.uint(static_cast<std::uint64_t>(e));
    for (double v : t.values()) w.f64(v);
  }
  w.raw(kSidecarMagic, 4);
  w.uint(static_cast<std::uint64_t>(m.sidecar.size()));
  for (const LayerQuantRecord& rec : m.sidecar) {
    w.str(rec.layer);
    const std::uint8_t mask = (rec.input ? 1 : 0) | (rec.weight ? 2 : 0) | (rec.probabilities ? 4 : 0) |
                              (rec.polish ? 8 : 0);
    w.uint(mask);
    if (rec.input) detail::write_params(w, *rec.input);
    if (rec.weight) detail::write_params(w, *rec.weight);
    if (rec.probabilities) detail::write_params(w, *rec.probabilities);
    if (rec.polish) detail::write_polish(w, *rec.polish);
  }
  return w.take();
}

inline ModelFile deserialize_model(std::string_view bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kModelMagic, 4) != 0) throw FormatError("not a model file (bad magic)");
  const auto version = r.uint<std::uint16_t>();
  if (version != kModelVersion) throw FormatError("unsupported model file version " + std::to_string(version));
  ModelFile m;
  const std::size_t n = r.count(1);
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = r.str();
    if (r.uint<std::uint8_t>() != kDtypeF64) throw FormatError("tensor '" + name + "' has an unknown dtype");
    const auto rank = r.uint<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = r.f64();
    m.tensors.emplace_back(std::move(shape), std::move(data), std::move(name));
  }
  r.raw(magic, 4);
  if (std::memcmp(magic, kSidecarMagic, 4) != 0) throw FormatError("model file sidecar missing");
  const std::size_t records = r.count(1);
  for (std::size_t i = 0; i < records; ++i) {
    LayerQuantRecord rec;
    rec.layer = r.str();
    const auto mask = r.uint<std::uint8_t>();
    if (mask & ~0x0F) throw FormatError("model file sidecar has unknown fields");
    if (mask & 1) rec.input = detail::read_params(r);
    if (mask & 2) rec.weight = detail::read_params(r);
    if (mask & 4) rec.probabilities = detail::read_params(r);
    if (mask & 8) rec.polish = detail::read_polish(r);
    m.sidecar.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("trailing bytes after model file");
  return m;
}

inline void save_model(const std::filesystem::path& path, const ModelFile& m) {
  write_file_atomic(path, serialize_model(m));
}

inline ModelFile load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

/// Every weight and bias as "<layer>.weight" / "<layer>.bias", plus one
/// sidecar record per layer that carries quantization state.
inline ModelFile to_model_file(const Network& net) {
  ModelFile m;
  for (const Layer& l : net.layers) {
    if (!l.weight.empty()) m.tensors.emplace_back(l.weight.shape(), l.weight.values(), l.name + ".weight");
    if (!l.bias.empty()) m.tensors.emplace_back(l.bias.shape(), l.bias.values(), l.name + ".bias");
    if (l.input_quant || l.weight_quant || l.prob_quant) {
      LayerQuantRecord rec{l.name, std::nullopt, l.weight_quant, l.prob_quant, std::nullopt};
      if (l.input_quant) {
        rec.input = l.input_quant->params;
        rec.polish = l.input_quant->polish;
      }
      m.sidecar.push_back(std::move(rec));
    }
  }
  return m;
}

/// Loads tensors and quantization state into a network of the same
/// architecture. Every layer tensor must be present with a matching shape.
inline void apply_model_file(Network& net, const ModelFile& m) {
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const Tensor& t : m.tensors)
      if (t.name() == name) return &t;
    return nullptr;
  };
  for (Layer& l : net.layers) {
    for (auto [dst, suffix] : {std::pair{&l.weight, ".weight"}, std::pair{&l.bias, ".bias"}}) {
      if (dst->empty()) continue;
      const Tensor* t = find(l.name + suffix);
      if (!t) throw FormatError("model file lacks tensor " + l.name + suffix);
      if (t->shape() != dst->shape()) {
        throw ShapeError("tensor " + l.name + suffix + " has shape " + shape_string(t->shape()) + ", expected " +
                         shape_string(dst->shape()));
      }
      *dst = Tensor(t->shape(), t->values());
    }
    l.input_quant.reset();
    l.weight_quant.reset();
    l.prob_quant.reset();
  }
  for (const LayerQuantRecord& rec : m.sidecar) {
    Layer* target = nullptr;
    for (Layer& l : net.layers)
      if (l.name == rec.layer) target = &l;
    if (!target) throw FormatError("sidecar names unknown layer " + rec.layer);
    if (rec.polish && !rec.input) throw FormatError("polish factors without input quantizer on " + rec.layer);
    if (rec.input) target->input_quant = InputQuant{*rec.input, rec.polish};
    target->weight_quant = rec.weight;
    target->prob_quant = rec.probabilities;
  }
}

}  // namespace qdk
