// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "qdk/error.hpp"
#include "qdk/network.hpp"
#include "qdk/precision.hpp"
#include "qdk/sfu.hpp"

namespace qdk::sim {

// Cycle-approximate model of a multi-core inference accelerator. Each engine
// drains its own in-order FIFO; engines run concurrently and meet only through
// instruction dependencies. LOAD and STORE share one DDR channel.

enum class Engine { load, store, mmu, vcu, sync };
inline constexpr std::size_t kEngineCount = 5;

enum class Category { matmul, conv, softmax, layernorm, vector, data_movement };
inline constexpr std::size_t kCategoryCount = 6;

inline const char* to_string(Engine e) {
  switch (e) {
    case Engine::load: return "LOAD";
    case Engine::store: return "STORE";
    case Engine::mmu: return "MMU";
    case Engine::vcu: return "VCU";
    case Engine::sync: return "SYNC";
  }
  return "?";
}

inline const char* to_string(Category c) {
  switch (c) {
    case Category::matmul: return "matmul";
    case Category::conv: return "conv";
    case Category::softmax: return "softmax";
    case Category::layernorm: return "layernorm";
    case Category::vector: return "vector";
    case Category::data_movement: return "data-movement";
  }
  return "?";
}

inline bool uses_ddr(Engine e) { return e == Engine::load || e == Engine::store; }

/// Precisions the datapath implements.
enum class HwPrecision { fp32, w4a8, w4a4 };

inline HwPrecision hw_precision(const Precision& p) {
  if (!p.weights_quantized() && !p.acts_quantized()) return HwPrecision::fp32;
  if (p.weight_bits == 4 && p.act_bits == 8) return HwPrecision::w4a8;
  if (p.weight_bits == 4 && p.act_bits == 4) return HwPrecision::w4a4;
  throw DomainError("the accelerator has no datapath for " + p.name() + " (fp32, w4a8 or w4a4)");
}

inline Precision precision_of(HwPrecision p) {
  switch (p) {
    case HwPrecision::fp32: return {32, 32};
    case HwPrecision::w4a8: return {4, 8};
    case HwPrecision::w4a4: return {4, 4};
  }
  return {};
}

template <typename T>
struct PerPrecision {
  T fp32, w4a8, w4a4;
  const T& operator[](HwPrecision p) const { return p == HwPrecision::fp32 ? fp32 : p == HwPrecision::w4a8 ? w4a8 : w4a4; }
};

struct HwConfig {
  double frequency_hz = 1e9;
  double ddr_bandwidth_bytes_per_s = 19.2e9;
  int num_cores = 8;
  PerPrecision<std::int64_t> mmu_macs_per_cycle_per_core{256, 1024, 2048};
  // Lanes, SRAM and barrier cost are not published for the reference design;
  // these values put the ViT workload's quantized speedups in the measured band.
  std::int64_t vcu_lanes_per_core = 12;
  std::int64_t sram_bytes_per_core = 2048 * 1024;
  PerPrecision<double> energy_per_mac_pj{3.7, 0.45, 0.3};
  double energy_per_ddr_byte_pj = 20.0;
  std::int64_t sfu_cycles_per_op = sfu::kCyclesPerOp;
  std::int64_t layer_sync_cycles = 40000;  // dispatch + barrier per layer

  void validate() const {
    if (!(frequency_hz > 0.0 && ddr_bandwidth_bytes_per_s > 0.0)) throw DomainError("frequency and bandwidth must be positive");
    if (num_cores < 1 || vcu_lanes_per_core < 1 || sram_bytes_per_core < 1 || sfu_cycles_per_op < 1) {
      throw DomainError("core count, lanes, SRAM and SFU latency must be positive");
    }
    const auto& m = mmu_macs_per_cycle_per_core;
    if (m.fp32 < 1 || m.w4a8 < m.fp32 || m.w4a4 < m.w4a8) {
      throw DomainError("MMU throughput must be positive and non-decreasing from fp32 to w4a8 to w4a4");
    }
    const auto& e = energy_per_mac_pj;
    if (!(e.fp32 > 0.0 && e.w4a8 > 0.0 && e.w4a4 > 0.0 && energy_per_ddr_byte_pj > 0.0)) {
      throw DomainError("energy coefficients must be positive");
    }
    if (layer_sync_cycles < 0) throw DomainError("layer_sync_cycles must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Programs

struct Instruction {
  std::size_t id = 0;
  Engine engine = Engine::sync;
  std::int64_t bytes = 0;       // LOAD / STORE
  std::int64_t macs = 0;        // MMU
  std::int64_t vector_ops = 0;  // VCU lane operations
  std::int64_t sfu_ops = 0;     // VCU special-function evaluations
  std::int64_t cycles = 0;      // SYNC
  std::vector<std::size_t> depends_on;
  std::optional<std::size_t> fused_successor;  // VCU consuming this MMU's tile on-chip
  std::string tensor;                          // LOAD / STORE operand
  std::string layer;
  Category category = Category::data_movement;
};

enum class Residency { ddr, sram };

struct TensorResidency {
  Residency where = Residency::ddr;
  std::int64_t traffic_bytes = 0;  // DDR bytes this tensor requires (0 when it stays on-chip)
};

struct Program {
  HwPrecision precision = HwPrecision::fp32;
  std::vector<Instruction> instructions;
  std::map<std::string, TensorResidency> residency;
};

/// Structural checks: ids are positions, dependencies exist and are acyclic,
/// fused successors are dependent VCU instructions.
inline void validate_program(const Program& p) {
  const std::size_t n = p.instructions.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Instruction& in = p.instructions[i];
    if (in.id != i) throw ScheduleError("instruction at position " + std::to_string(i) + " has id " + std::to_string(in.id));
    for (std::size_t d : in.depends_on)
      if (d >= n || d == i) throw ScheduleError("instruction " + std::to_string(i) + " depends on invalid id " + std::to_string(d));
    if (in.fused_successor) {
      const std::size_t s = *in.fused_successor;
      if (s >= n || p.instructions[s].engine != Engine::vcu) {
        throw ScheduleError("instruction " + std::to_string(i) + " has a fused successor that is not a VCU instruction");
      }
      const auto& deps = p.instructions[s].depends_on;
      if (std::find(deps.begin(), deps.end(), i) == deps.end()) {
        throw ScheduleError("fused successor " + std::to_string(s) + " does not depend on " + std::to_string(i));
      }
    }
  }
  // Kahn's algorithm for cycles.
  std::vector<std::size_t> indeg(n, 0);
  std::vector<std::vector<std::size_t>> users(n);
  for (const Instruction& in : p.instructions)
    for (std::size_t d : in.depends_on) {
      ++indeg[in.id];
      users[d].push_back(in.id);
    }
  std::vector<std::size_t> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indeg[i] == 0) ready.push_back(i);
  std::size_t seen = 0;
  while (!ready.empty()) {
    const std::size_t i = ready.back();
    ready.pop_back();
    ++seen;
    for (std::size_t u : users[i])
      if (--indeg[u] == 0) ready.push_back(u);
  }
  if (seen != n) {
    std::string ids;
    for (std::size_t i = 0; i < n && ids.size() < 80; ++i)
      if (indeg[i] > 0) ids += (ids.empty() ? "" : ",") + std::to_string(i);
    throw ScheduleError("dependency cycle among instructions " + ids);
  }
}

/// ceil(bytes · frequency / bandwidth), exact for whole-number rates.
inline std::int64_t ddr_cycles(std::int64_t bytes, const HwConfig& c) {
  if (bytes <= 0) return 0;
  const double f = c.frequency_hz, bw = c.ddr_bandwidth_bytes_per_s;
  if (f == std::floor(f) && bw == std::floor(bw) && f < 9e18 && bw < 9e18) {
    using u128 = unsigned __int128;
    const u128 num = static_cast<u128>(bytes) * static_cast<u128>(static_cast<std::uint64_t>(f));
    const u128 den = static_cast<std::uint64_t>(bw);
    return static_cast<std::int64_t>((num + den - 1) / den);
  }
  return static_cast<std::int64_t>(std::ceil(static_cast<long double>(bytes) * f / bw));
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return a <= 0 ? 0 : (a + b - 1) / b; }

inline std::int64_t instruction_cycles(const Instruction& in, const HwConfig& c, HwPrecision p) {
  switch (in.engine) {
    case Engine::load:
    case Engine::store: return ddr_cycles(in.bytes, c);
    case Engine::mmu: return ceil_div(in.macs, c.mmu_macs_per_cycle_per_core[p] * c.num_cores);
    case Engine::vcu: return ceil_div(in.vector_ops + c.sfu_cycles_per_op * in.sfu_ops, c.vcu_lanes_per_core * c.num_cores);
    case Engine::sync: return in.cycles;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Scheduling

struct TraceEntry {
  std::size_t id = 0;
  Engine engine = Engine::sync;
  std::int64_t start = 0, end = 0;
};

struct ScheduleTrace {
  std::vector<TraceEntry> entries;  // indexed by instruction id
  std::int64_t makespan_cycles = 0;
  std::array<std::int64_t, kEngineCount> busy_cycles{};
  std::int64_t ddr_bytes_moved = 0;
  std::int64_t macs = 0;
  double energy_pj = 0.0;

  std::int64_t busy(Engine e) const { return busy_cycles[static_cast<std::size_t>(e)]; }
};

/// Deterministic list scheduling. Among the FIFO heads whose dependencies
/// have completed, the one able to start earliest issues next (ties go to the
/// lower id); LOAD and STORE additionally wait for the DDR channel.
inline ScheduleTrace simulate(const Program& p, const HwConfig& c) {
  c.validate();
  validate_program(p);
  const std::size_t n = p.instructions.size();
  std::array<std::vector<std::size_t>, kEngineCount> fifo;
  for (const Instruction& in : p.instructions) fifo[static_cast<std::size_t>(in.engine)].push_back(in.id);

  ScheduleTrace t;
  t.entries.resize(n);
  std::vector<char> done(n, 0);
  std::array<std::size_t, kEngineCount> head{};
  std::array<std::int64_t, kEngineCount> engine_free{};
  std::int64_t ddr_free = 0;

  for (std::size_t issued = 0; issued < n; ++issued) {
    std::size_t best = n;
    std::int64_t best_start = std::numeric_limits<std::int64_t>::max();
    for (std::size_t e = 0; e < kEngineCount; ++e) {
      if (head[e] == fifo[e].size()) continue;
      const Instruction& in = p.instructions[fifo[e][head[e]]];
      std::int64_t start = engine_free[e];
      bool ready = true;
      for (std::size_t d : in.depends_on) {
        if (!done[d]) {
          ready = false;
          break;
        }
        start = std::max(start, t.entries[d].end);
      }
      if (!ready) continue;
      if (uses_ddr(in.engine)) start = std::max(start, ddr_free);
      if (start < best_start || (start == best_start && in.id < best)) {
        best = in.id;
        best_start = start;
      }
    }
    if (best == n) {
      std::string heads;
      for (std::size_t e = 0; e < kEngineCount; ++e)
        if (head[e] < fifo[e].size()) heads += (heads.empty() ? "" : ",") + std::to_string(fifo[e][head[e]]);
      throw ScheduleError("deadlock: FIFO heads " + heads + " wait on instructions queued behind them");
    }
    const Instruction& in = p.instructions[best];
    const auto e = static_cast<std::size_t>(in.engine);
    const std::int64_t dur = instruction_cycles(in, c, p.precision);
    t.entries[best] = {best, in.engine, best_start, best_start + dur};
    done[best] = 1;
    ++head[e];
    engine_free[e] = best_start + dur;
    if (uses_ddr(in.engine)) {
      ddr_free = best_start + dur;
      t.ddr_bytes_moved += in.bytes;
    }
    t.busy_cycles[e] += dur;
    t.macs += in.macs;
    t.makespan_cycles = std::max(t.makespan_cycles, best_start + dur);
  }
  t.energy_pj = static_cast<double>(t.macs) * c.energy_per_mac_pj[p.precision] +
                static_cast<double>(t.ddr_bytes_moved) * c.energy_per_ddr_byte_pj;
  return t;
}

// ---------------------------------------------------------------------------
// Reports

struct LatencyReport {
  double total_ms = 0.0;
  double fps = 0.0;
  std::array<double, kCategoryCount> breakdown{};  // fractions of busy cycles, SYNC excluded
  double power_efficiency_gmac_per_w = 0.0;
  std::int64_t makespan_cycles = 0;
  std::int64_t ddr_bytes = 0;
  double energy_pj = 0.0;

  double fraction(Category c) const { return breakdown[static_cast<std::size_t>(c)]; }
};

inline LatencyReport profile(const ScheduleTrace& t, const Program& p, const HwConfig& c) {
  if (t.entries.size() != p.instructions.size()) throw ScheduleError("trace does not belong to this program");
  LatencyReport r;
  r.makespan_cycles = t.makespan_cycles;
  r.ddr_bytes = t.ddr_bytes_moved;
  r.energy_pj = t.energy_pj;
  const double seconds = static_cast<double>(t.makespan_cycles) / c.frequency_hz;
  r.total_ms = seconds * 1e3;
  r.fps = t.makespan_cycles > 0 ? c.frequency_hz / static_cast<double>(t.makespan_cycles) : 0.0;
  std::array<std::int64_t, kCategoryCount> cyc{};
  std::int64_t total = 0;
  for (const Instruction& in : p.instructions) {
    if (in.engine == Engine::sync) continue;
    const TraceEntry& e = t.entries[in.id];
    cyc[static_cast<std::size_t>(in.category)] += e.end - e.start;
    total += e.end - e.start;
  }
  for (std::size_t k = 0; k < kCategoryCount; ++k)
    r.breakdown[k] = total > 0 ? static_cast<double>(cyc[k]) / static_cast<double>(total) : 0.0;
  const double joules = t.energy_pj * 1e-12;
  if (joules > 0.0 && seconds > 0.0) r.power_efficiency_gmac_per_w = (static_cast<double>(t.macs) / 1e9) / (joules / seconds);
  return r;
}

/// One CSV row per instruction.
inline std::string trace_csv(const Program& p, const ScheduleTrace& t) {
  std::ostringstream os;
  os << "id,engine,start,end,bytes,macs,layer,category\n";
  for (const Instruction& in : p.instructions) {
    const TraceEntry& e = t.entries[in.id];
    os << in.id << ',' << to_string(in.engine) << ',' << e.start << ',' << e.end << ',' << in.bytes << ',' << in.macs
       << ',' << in.layer << ',' << to_string(in.category) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Workloads: size-only descriptions of a network, independent of weights.

/// (m×k)·(k×n) per batch entry, with optional elementwise epilogue.
struct MatmulOp {
  std::string name;
  Category category = Category::matmul;
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool rhs_is_weight = true;     // else the right operand is an activation
  std::int64_t epilogue_ops = 0;  // per output element (activation function)
  std::int64_t epilogue_sfu = 0;
  bool polished_input = false;  // inverse polish on every loaded input element
  std::int64_t window = 1;      // conv taps reusing each loaded input element (kh·kw)
};

struct VectorOp {
  std::string name;
  Category category = Category::vector;
  std::int64_t elements = 0;
  std::int64_t inputs = 1;
  std::int64_t ops_per_element = 1;
  std::int64_t sfu_per_element = 0;
};

/// Multi-head attention core: softmax(Q Kᵀ / √d) V.
struct AttentionOp {
  std::string name;
  std::int64_t heads = 1, tokens = 0, head_dim = 0;
};

using WorkOp = std::variant<MatmulOp, VectorOp, AttentionOp>;

struct Workload {
  std::string name;
  std::vector<WorkOp> ops;
};

// Vector-unit cost per element.
inline constexpr std::int64_t kRequantOps = 2;  // rescale + round/clamp
inline constexpr std::int64_t kGeluOps = 6, kGeluSfu = 1;
inline constexpr std::int64_t kSoftplusOps = 3, kSoftplusSfu = 2;
inline constexpr std::int64_t kSoftmaxOps = 5, kSoftmaxSfu = 1;
inline constexpr std::int64_t kLayerNormOps = 8;
inline constexpr std::int64_t kPolishOps = 2, kPolishSfu = 1;
inline constexpr std::int64_t kPipelineDepth = 64, kMinTileRows = 64;

namespace detail {

inline std::int64_t bits_to_bytes(std::int64_t elements, std::int64_t bits) { return (elements * bits + 7) / 8; }

class Lowering {
 public:
  Lowering(HwPrecision p, bool fusion, const HwConfig& c) : fusion_(fusion), cfg_(c) {
    prog_.precision = p;
    const Precision pr = precision_of(p);
    wbits_ = pr.weight_bits;
    abits_ = pr.act_bits;
    quant_ = p != HwPrecision::fp32;
  }

  void add(const WorkOp& op) {
    op_ids_.clear();
    std::visit([&](const auto& o) { lower(o); }, op);
    // Layer barrier: waits for every store of this layer.
    Instruction s;
    s.engine = Engine::sync;
    s.cycles = cfg_.layer_sync_cycles;
    for (std::size_t id : op_ids_)
      if (prog_.instructions[id].engine == Engine::store) s.depends_on.push_back(id);
    s.layer = layer_;
    s.category = Category::data_movement;
    barrier_ = emit(std::move(s), false);
  }

  Program take() { return std::move(prog_); }

 private:
  std::size_t emit(Instruction in, bool track = true) {
    in.id = prog_.instructions.size();
    if (in.layer.empty()) in.layer = layer_;
    if (in.engine == Engine::load && barrier_) in.depends_on.push_back(*barrier_);
    if (uses_ddr(in.engine)) {
      auto& r = prog_.residency[in.tensor];
      r.where = Residency::ddr;
      r.traffic_bytes += in.bytes;
    }
    prog_.instructions.push_back(std::move(in));
    if (track) op_ids_.push_back(prog_.instructions.back().id);
    return prog_.instructions.back().id;
  }

  std::size_t mem(Engine e, std::string tensor, std::int64_t bytes, Category cat, std::vector<std::size_t> deps) {
    Instruction in;
    in.engine = e;
    in.tensor = std::move(tensor);
    in.bytes = bytes;
    in.category = cat;
    in.depends_on = std::move(deps);
    return emit(std::move(in));
  }

  std::size_t vcu(std::int64_t ops, std::int64_t sfu, Category cat, std::vector<std::size_t> deps) {
    Instruction in;
    in.engine = Engine::vcu;
    in.vector_ops = ops;
    in.sfu_ops = sfu;
    in.category = cat;
    in.depends_on = std::move(deps);
    return emit(std::move(in));
  }

  std::size_t mmu(std::int64_t macs, Category cat, std::vector<std::size_t> deps) {
    Instruction in;
    in.engine = Engine::mmu;
    in.macs = macs;
    in.category = cat;
    in.depends_on = std::move(deps);
    return emit(std::move(in));
  }

  void on_chip(const std::string& tensor) { prog_.residency.emplace(tensor, TensorResidency{Residency::sram, 0}); }

  // Cores split each tile's work but every core holds the tile's operands,
  // so tiling does not depend on the core count.
  std::int64_t sram_bits() const { return cfg_.sram_bytes_per_core * 8; }

  // Zero-cost barrier ordering later loads of this layer after its stores so far.
  void drain() {
    Instruction s;
    s.engine = Engine::sync;
    for (std::size_t id : op_ids_)
      if (prog_.instructions[id].engine == Engine::store) s.depends_on.push_back(id);
    s.category = Category::data_movement;
    barrier_ = emit(std::move(s));
  }

  [[noreturn]] void capacity(const std::string& what) const {
    throw CapacityError(layer_ + ": " + what + " exceeds the " + std::to_string(cfg_.sram_bytes_per_core) +
                        "-byte SRAM working set");
  }

  // Elementwise pass over `elements`: LOAD inputs, VCU, STORE output, with
  // double-buffered tiles.
  void vector_pass(const std::string& tensor, Category cat, std::int64_t elements, std::int64_t inputs,
                   std::int64_t in_bits, std::int64_t ops, std::int64_t sfu) {
    const std::int64_t row_bits = 2 * (inputs * in_bits + abits_);
    const std::int64_t tile = std::min(elements, sram_bits() / row_bits);
    if (tile < 1) capacity("a vector tile");
    const std::int64_t tiles = ceil_div(elements, tile);
    std::vector<std::vector<std::size_t>> loads(tiles);
    std::vector<std::size_t> work(tiles), stores(tiles);
    auto emit_loads = [&](std::int64_t t) {
      const std::int64_t e = std::min(tile, elements - t * tile);
      std::vector<std::size_t> deps;
      if (t >= 2) deps.push_back(work[t - 2]);
      for (std::int64_t i = 0; i < inputs; ++i)
        loads[t].push_back(mem(Engine::load, tensor + ".in" + std::to_string(i), bits_to_bytes(e, in_bits), cat, deps));
    };
    emit_loads(0);
    for (std::int64_t t = 0; t < tiles; ++t) {
      if (t + 1 < tiles) emit_loads(t + 1);
      const std::int64_t e = std::min(tile, elements - t * tile);
      std::vector<std::size_t> deps = loads[t];
      if (t >= 2) deps.push_back(stores[t - 2]);
      work[t] = vcu(e * ops, e * sfu, cat, deps);
      stores[t] = mem(Engine::store, tensor + ".out", bits_to_bytes(e, abits_), cat, {work[t]});
    }
  }

  void lower(const VectorOp& op) {
    layer_ = op.name;
    if (op.elements < 1 || op.inputs < 1) throw DomainError(op.name + ": vector op needs elements and inputs");
    const std::int64_t ops = op.ops_per_element + (quant_ ? kRequantOps : 0);
    vector_pass(op.name, op.category, op.elements, op.inputs, abits_, ops, op.sfu_per_element);
  }

  void lower(const MatmulOp& op) {
    layer_ = op.name;
    if (op.batch < 1 || op.m < 1 || op.k < 1 || op.n < 1 || op.window < 1 || op.k % op.window != 0) {
      throw DomainError(op.name + ": matmul extents must be positive and k a multiple of the window");
    }
    const std::int64_t rbits = op.rhs_is_weight ? wbits_ : abits_;
    const std::int64_t epi_ops = op.epilogue_ops + (quant_ ? kRequantOps : 0), epi_sfu = op.epilogue_sfu;
    const bool has_epi = epi_ops + epi_sfu > 0;
    const bool fuse = fusion_ && has_epi;
    const std::int64_t out_bits = has_epi && !fuse ? 32 : abits_;  // unfused epilogues see raw accumulators
    const std::int64_t x_row_bits = op.k / op.window * abits_;     // distinct input bits per output row
    const std::int64_t w_col_bits = op.k * rbits;
    const std::int64_t half = sram_bits() / 2;

    // Two loop orders: keep a weight block resident and stream input rows, or
    // keep input rows resident and stream weight blocks. The streamed operand
    // and the output are double-buffered in the other half of SRAM.
    std::int64_t wn = std::min(op.n, half / w_col_bits), wm = 0;
    if (wn >= 1) wm = std::min(op.m, half / (2 * (x_row_bits + wn * out_bits)));
    std::int64_t xm = std::min(op.m, half / x_row_bits), xn = 0;
    if (xm >= 1) xn = std::min(op.n, half / (2 * (w_col_bits + xm * out_bits)));
    const bool weight_ok = wn >= 1 && wm >= 1, input_ok = xm >= 1 && xn >= 1;
    if (!weight_ok && !input_ok) capacity("a single output tile");
    const double x_total = static_cast<double>(op.m * x_row_bits), w_total = static_cast<double>(op.n * w_col_bits);
    const double weight_traffic = w_total + x_total * static_cast<double>(ceil_div(op.n, std::max<std::int64_t>(wn, 1)));
    const double input_traffic = x_total + w_total * static_cast<double>(ceil_div(op.m, std::max<std::int64_t>(xm, 1)));
    // Polished inputs are streamed so their inverse transform pipelines with
    // the MMU instead of delaying the first tile.
    const bool weight_stationary =
        weight_ok && (!input_ok || op.polished_input || weight_traffic <= input_traffic);
    const std::int64_t m_tile = weight_stationary ? wm : xm, n_tile = weight_stationary ? wn : xn;

    const Category cat = op.category;
    const std::string rhs = op.name + (op.rhs_is_weight ? ".weight" : ".rhs");
    if (fuse) on_chip(op.name + ".acc");
    auto load_x = [&](std::int64_t rows, std::vector<std::size_t> deps) {
      const std::size_t l = mem(Engine::load, op.name + ".in", bits_to_bytes(rows * x_row_bits, 1), cat, std::move(deps));
      if (!op.polished_input) return l;
      const std::int64_t e = rows * op.k / op.window;
      return vcu(e * kPolishOps, e * kPolishSfu, Category::vector, {l});
    };
    auto load_w = [&](std::int64_t cols, std::vector<std::size_t> deps) {
      return mem(Engine::load, rhs, bits_to_bytes(cols * w_col_bits, 1), cat, std::move(deps));
    };

    const std::int64_t outer_extent = weight_stationary ? op.n : op.m, outer_tile = weight_stationary ? n_tile : m_tile;
    const std::int64_t inner_extent = weight_stationary ? op.m : op.n;
    // Up to kPipelineDepth streamed tiles per pass (of at least kMinTileRows),
    // so loads, MMU and VCU overlap.
    const std::int64_t inner_tile = std::min(weight_stationary ? m_tile : n_tile,
                                             std::max(kMinTileRows, ceil_div(inner_extent, kPipelineDepth)));
    std::optional<std::size_t> last_mmu;
    for (std::int64_t b = 0; b < op.batch; ++b) {
      for (std::int64_t o0 = 0; o0 < outer_extent; o0 += outer_tile) {
        const std::int64_t ow = std::min(outer_tile, outer_extent - o0);
        std::vector<std::size_t> sdeps;
        if (last_mmu) sdeps.push_back(*last_mmu);  // the resident buffer is free again
        const std::size_t resident = weight_stationary ? load_w(ow, sdeps) : load_x(ow, sdeps);
        const std::int64_t tiles = ceil_div(inner_extent, inner_tile);
        std::vector<std::size_t> ld(tiles), mm(tiles), st(tiles);
        auto stream = [&](std::int64_t t) {
          const std::int64_t iw = std::min(inner_tile, inner_extent - t * inner_tile);
          std::vector<std::size_t> deps;
          if (t >= 2) deps.push_back(mm[t - 2]);
          ld[t] = weight_stationary ? load_x(iw, deps) : load_w(iw, deps);
        };
        stream(0);
        for (std::int64_t t = 0; t < tiles; ++t) {
          if (t + 1 < tiles) stream(t + 1);  // prefetch runs one tile ahead
          const std::int64_t iw = std::min(inner_tile, inner_extent - t * inner_tile);
          std::vector<std::size_t> deps{ld[t], resident};
          if (t >= 2) deps.push_back(st[t - 2]);
          mm[t] = mmu(ow * iw * op.k, cat, deps);
          last_mmu = mm[t];
          std::size_t producer = mm[t];
          if (fuse) {
            const std::int64_t e = ow * iw;
            producer = vcu(e * epi_ops, e * epi_sfu, Category::vector, {mm[t]});
            prog_.instructions[mm[t]].fused_successor = producer;
          }
          st[t] = mem(Engine::store, op.name + (has_epi && !fuse ? ".acc" : ".out"), bits_to_bytes(ow * iw, out_bits), cat,
                      {producer});
        }
      }
    }
    if (has_epi && !fuse) {
      // The epilogue becomes its own DDR round trip.
      drain();
      vector_pass(op.name + ".epilogue", Category::vector, op.batch * op.m * op.n, 1, 32, epi_ops, epi_sfu);
    }
  }

  void lower(const AttentionOp& op) {
    if (op.heads < 1 || op.tokens < 1 || op.head_dim < 1) throw DomainError(op.name + ": attention extents must be positive");
    if (!fusion_) {
      // Scores and probabilities make a DDR round trip.
      lower(MatmulOp{op.name + ".scores", Category::matmul, op.heads, op.tokens, op.head_dim, op.tokens, false, 0, 0, false});
      drain();
      lower(VectorOp{op.name + ".softmax", Category::softmax, op.heads * op.tokens * op.tokens, 1, kSoftmaxOps, kSoftmaxSfu});
      drain();
      lower(MatmulOp{op.name + ".context", Category::matmul, op.heads, op.tokens, op.tokens, op.head_dim, false, 0, 0, false});
      layer_ = op.name;
      return;
    }
    layer_ = op.name;
    const std::int64_t t_ = op.tokens, d = op.head_dim;
    // Key/value blocks share half the SRAM; when a head's keys do not fit they
    // are streamed per query tile with a running (online) softmax.
    const std::int64_t kv_tile = std::min(t_, (sram_bits() / 2) / (2 * d * abits_));
    if (kv_tile < 1) capacity("a key/value row");
    const std::int64_t kv_blocks = ceil_div(t_, kv_tile);
    // Per query row: Q row, score row, output accumulator; double-buffered.
    const std::int64_t row_bits = d * abits_ + kv_tile * 32 + d * 32;
    const std::int64_t q_tile = std::min(t_, (sram_bits() / 2) / (2 * row_bits));
    if (q_tile < 1) capacity("a query row");
    on_chip(op.name + ".scores");
    const std::int64_t sm_ops = kSoftmaxOps + (quant_ ? kRequantOps : 0) + (kv_blocks > 1 ? 2 : 0);
    std::optional<std::size_t> last_mmu;
    auto load_kv = [&](std::int64_t rows) {
      std::vector<std::size_t> deps;
      if (last_mmu) deps.push_back(*last_mmu);
      const std::size_t k = mem(Engine::load, op.name + ".k", bits_to_bytes(rows * d, abits_), Category::matmul, deps);
      const std::size_t v = mem(Engine::load, op.name + ".v", bits_to_bytes(rows * d, abits_), Category::matmul, deps);
      return std::pair{k, v};
    };
    for (std::int64_t h = 0; h < op.heads; ++h) {
      std::pair<std::size_t, std::size_t> kv{};
      if (kv_blocks == 1) kv = load_kv(t_);
      const std::int64_t tiles = ceil_div(t_, q_tile);
      std::vector<std::size_t> ql(tiles), pv(tiles), st(tiles);
      auto emit_q = [&](std::int64_t t) {
        const std::int64_t rows = std::min(q_tile, t_ - t * q_tile);
        std::vector<std::size_t> deps;
        if (t >= 2) deps.push_back(pv[t - 2]);
        ql[t] = mem(Engine::load, op.name + ".q", bits_to_bytes(rows * d, abits_), Category::matmul, deps);
      };
      emit_q(0);
      for (std::int64_t t = 0; t < tiles; ++t) {
        if (t + 1 < tiles) emit_q(t + 1);
        const std::int64_t rows = std::min(q_tile, t_ - t * q_tile);
        for (std::int64_t kb = 0; kb < kv_blocks; ++kb) {
          const std::int64_t keys = std::min(kv_tile, t_ - kb * kv_tile);
          if (kv_blocks > 1) kv = load_kv(keys);
          std::vector<std::size_t> deps{ql[t], kv.first};
          if (kb == 0 && t >= 2) deps.push_back(st[t - 2]);
          if (kb > 0) deps.push_back(pv[t]);
          const std::size_t s = mmu(rows * d * keys, Category::matmul, deps);
          const std::size_t sm = vcu(rows * keys * sm_ops, rows * keys * kSoftmaxSfu, Category::softmax, {s});
          prog_.instructions[s].fused_successor = sm;
          pv[t] = mmu(rows * keys * d, Category::matmul, {sm, kv.second});
          last_mmu = pv[t];
        }
        st[t] = mem(Engine::store, op.name + ".out", bits_to_bytes(rows * d, abits_), Category::matmul, {pv[t]});
      }
    }
  }

  bool fusion_;
  HwConfig cfg_;
  Program prog_;
  std::int64_t wbits_ = 32, abits_ = 32;
  bool quant_ = false;
  std::optional<std::size_t> barrier_;
  std::vector<std::size_t> op_ids_;
  std::string layer_;
};

}  // namespace detail

/// Lowers a workload to a tiled instruction stream. Every layer ends in a
/// SYNC barrier; with fusion, MMU tiles hand their output to the VCU on-chip.
inline Program lower_workload(const Workload& w, HwPrecision p, bool fusion, const HwConfig& c) {
  c.validate();
  detail::Lowering l(p, fusion, c);
  for (const WorkOp& op : w.ops) l.add(op);
  return l.take();
}

/// Workload of a network's layers at its declared input shape. An activation
/// directly after a weight layer becomes that layer's epilogue. With `polish`,
/// inputs of polish-enabled layers pay the inverse transform and their
/// producer pays the forward transform.
inline Workload workload_from_network(const Network& net, bool polish) {
  if (net.input_shape.empty()) throw ShapeError("network has no input shape");
  Workload w;
  w.name = "network";
  ForwardTrace trace;
  forward(net, Tensor(net.input_shape), &trace);
  auto count = [](const Tensor& t) { return static_cast<std::int64_t>(t.size()); };
  auto act_cost = [](ActivationFn fn) -> std::pair<std::int64_t, std::int64_t> {
    switch (fn) {
      case ActivationFn::relu: return {1, 0};
      case ActivationFn::gelu: return {kGeluOps, kGeluSfu};
      case ActivationFn::softplus: return {kSoftplusOps, kSoftplusSfu};
    }
    return {1, 0};
  };
  auto mark_polish_output = [&]() {
    if (w.ops.empty()) return;
    std::visit(
        [](auto& o) {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, MatmulOp>) {
            o.epilogue_ops += kPolishOps;
            o.epilogue_sfu += kPolishSfu;
          } else if constexpr (std::is_same_v<T, VectorOp>) {
            o.ops_per_element += kPolishOps;
            o.sfu_per_element += kPolishSfu;
          }
        },
        w.ops.back());
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    const Tensor& in = trace.inputs[i];
    switch (l.kind) {
      case LayerKind::linear:
      case LayerKind::conv2d: {
        MatmulOp op;
        op.name = l.name;
        const Tensor& out = i + 1 < net.layers.size() ? trace.inputs[i + 1] : trace.output;
        if (l.kind == LayerKind::linear) {
          op.category = Category::matmul;
          op.m = static_cast<std::int64_t>(in.rows());
          op.k = static_cast<std::int64_t>(l.weight.cols());
        } else {
          op.category = Category::conv;
          op.m = static_cast<std::int64_t>(out.dim(1) * out.dim(2));
          op.k = static_cast<std::int64_t>(l.weight.size() / l.weight.dim(0));
          if (l.stride == 1) op.window = static_cast<std::int64_t>(l.weight.dim(2) * l.weight.dim(3));
        }
        op.n = static_cast<std::int64_t>(l.weight.dim(0));
        if (polish && l.polish_allowed) {
          op.polished_input = true;
          mark_polish_output();
        }
        if (i + 1 < net.layers.size() && net.layers[i + 1].kind == LayerKind::activation) {
          const auto [ops, sfu] = act_cost(net.layers[i + 1].fn);
          op.epilogue_ops = ops;
          op.epilogue_sfu = sfu;
          ++i;
        }
        w.ops.push_back(op);
        break;
      }
      case LayerKind::attention: {
        const auto d = static_cast<std::int64_t>(in.cols() / 3);
        const auto h = static_cast<std::int64_t>(l.heads);
        w.ops.push_back(AttentionOp{l.name, h, static_cast<std::int64_t>(in.rows()), d / h});
        break;
      }
      case LayerKind::layernorm:
        w.ops.push_back(VectorOp{l.name, Category::layernorm, count(in), 1, kLayerNormOps, 0});
        break;
      case LayerKind::softmax:
        w.ops.push_back(VectorOp{l.name, Category::softmax, count(in), 1, kSoftmaxOps, kSoftmaxSfu});
        break;
      case LayerKind::residual:
        w.ops.push_back(VectorOp{l.name, Category::vector, count(in), 2, 1, 0});
        break;
      case LayerKind::activation: {
        const auto [ops, sfu] = act_cost(l.fn);
        w.ops.push_back(VectorOp{l.name, Category::vector, count(in), 1, ops, sfu});
        break;
      }
      case LayerKind::to_tokens:
      case LayerKind::to_image: break;  // layout only
    }
  }
  return w;
}

/// Size parameters of the ViT-style depth model used for latency studies:
/// a patch-16 transformer encoder with a convolutional decoder.
struct VitShape {
  std::int64_t patch = 16, dim = 384, depth = 12, heads = 6, mlp_ratio = 4;
  std::vector<std::int64_t> decoder_channels{256, 128, 64};
};

inline Workload vit_workload(std::int64_t resolution, bool polish, const VitShape& s = {}) {
  if (resolution < s.patch || resolution % s.patch != 0) {
    throw DomainError("resolution must be a positive multiple of the patch size " + std::to_string(s.patch));
  }
  Workload w;
  w.name = "vit" + std::to_string(resolution);
  const std::int64_t g = resolution / s.patch, t = g * g, d = s.dim;
  w.ops.push_back(MatmulOp{"embed", Category::conv, 1, t, 3 * s.patch * s.patch, d, true, 0, 0, false});
  for (std::int64_t b = 0; b < s.depth; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    w.ops.push_back(VectorOp{p + "ln1", Category::layernorm, t * d, 1, kLayerNormOps, 0});
    w.ops.push_back(MatmulOp{p + "qkv", Category::matmul, 1, t, d, 3 * d, true, 0, 0, false});
    w.ops.push_back(AttentionOp{p + "attn", s.heads, t, d / s.heads});
    w.ops.push_back(MatmulOp{p + "proj", Category::matmul, 1, t, d, d, true, 0, 0, false});
    w.ops.push_back(VectorOp{p + "add1", Category::vector, t * d, 2, 1, 0});
    w.ops.push_back(VectorOp{p + "ln2", Category::layernorm, t * d, 1, kLayerNormOps, 0});
    w.ops.push_back(MatmulOp{p + "fc1", Category::matmul, 1, t, d, s.mlp_ratio * d, true, kGeluOps, kGeluSfu, false});
    w.ops.push_back(MatmulOp{p + "fc2", Category::matmul, 1, t, s.mlp_ratio * d, d, true, 0, 0, false});
    w.ops.push_back(VectorOp{p + "add2", Category::vector, t * d, 2, 1, 0});
  }
  w.ops.push_back(VectorOp{"norm", Category::layernorm, t * d, 1, kLayerNormOps, 0});
  // Decoder: 3×3 convs, each stage at twice the previous resolution
  // (upsampling is folded into the next conv's input addressing).
  std::int64_t in_ch = d, side = g;
  for (std::size_t i = 0; i < s.decoder_channels.size(); ++i) {
    const std::int64_t out_ch = s.decoder_channels[i];
    if (polish) {
      std::visit(
          [](auto& o) {
            using T = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<T, MatmulOp>) {
              o.epilogue_ops += kPolishOps;
              o.epilogue_sfu += kPolishSfu;
            } else if constexpr (std::is_same_v<T, VectorOp>) {
              o.ops_per_element += kPolishOps;
              o.sfu_per_element += kPolishSfu;
            }
          },
          w.ops.back());
    }
    w.ops.push_back(MatmulOp{"decoder.conv" + std::to_string(i + 1), Category::conv, 1, side * side, 9 * in_ch, out_ch,
                             true, kGeluOps, kGeluSfu, polish, 9});
    in_ch = out_ch;
    side *= 2;
  }
  w.ops.push_back(MatmulOp{"decoder.head", Category::conv, 1, (side / 2) * (side / 2), 9 * in_ch, 1, true, kSoftplusOps,
                           kSoftplusSfu, false, 9});
  return w;
}

struct Comparison {
  HwPrecision precision = HwPrecision::fp32;
  std::int64_t resolution = 0;
  LatencyReport report;
  double speedup = 1.0;  // fp32 makespan / this makespan, same resolution
};

inline const char* to_string(HwPrecision p) {
  switch (p) {
    case HwPrecision::fp32: return "fp32";
    case HwPrecision::w4a8: return "w4a8";
    case HwPrecision::w4a4: return "w4a4";
  }
  return "?";
}

/// One report per (precision, resolution); speedups are against fp32 at the
/// same resolution, which is simulated even when not requested.
inline std::vector<Comparison> compare_configs(const std::function<Workload(std::int64_t)>& make, const HwConfig& c,
                                               const std::vector<HwPrecision>& precisions,
                                               const std::vector<std::int64_t>& resolutions, bool fusion = true) {
  std::vector<Comparison> out;
  for (std::int64_t r : resolutions) {
    const Workload w = make(r);
    auto run = [&](HwPrecision p) {
      const Program prog = lower_workload(w, p, fusion, c);
      return profile(simulate(prog, c), prog, c);
    };
    const LatencyReport base = run(HwPrecision::fp32);
    for (HwPrecision p : precisions) {
      Comparison row{p, r, p == HwPrecision::fp32 ? base : run(p), 1.0};
      row.speedup = static_cast<double>(base.makespan_cycles) / static_cast<double>(row.report.makespan_cycles);
      out.push_back(row);
    }
  }
  return out;
}

}  // namespace qdk::sim
