// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdk/accel_sim.hpp"
#include "qdk/error.hpp"
#include "qdk/io.hpp"
#include "qdk/pipeline.hpp"
#include "qdk/toy_mde.hpp"

namespace qdk {

/// Everything one CLI run needs. Every key is optional in the JSON file;
/// unknown keys are rejected so that typos do not silently fall back to
/// defaults.
///
///   seed                  u64, drives model, data and calibration sampling
///   precision             "fp32" | "w4" | "w4a8" | "w4a4"
///   methods               subset of ["full", "minmax", "percentile"]
///   calibration_samples   images used to calibrate (32)
///   eval_samples          held-out images for metrics (16)
///   quant                 epsilon, damp_ratio, percentile_clip, polish, attention_grid,
///                         compensation, range_search, adaptive_rounding, reconstruction{...}
///   toy                   width, depth, heads, mlp_ratio, decoder_width, outlier_channels,
///                         outlier_magnitude, image_size, patch
///   hw                    frequency_hz (Hz), ddr_bandwidth_bytes_per_s (bytes/s), num_cores,
///                         mmu_macs_per_cycle_per_core{fp32,w4a8,w4a4}, vcu_lanes_per_core,
///                         sram_bytes_per_core (bytes), energy_per_mac_pj{...} (pJ),
///                         energy_per_ddr_byte_pj (pJ), sfu_cycles_per_op, layer_sync_cycles
///   simulate              workload ("vit" | "toy"), resolutions [px], fusion, polish
struct RunConfig {
  std::uint64_t seed = 1;
  Precision precision{4, 4};
  std::vector<Method> methods{Method::full, Method::minmax};
  std::size_t calibration_samples = 32;
  std::size_t eval_samples = 16;
  QuantConfig quant;
  ToyConfig toy;
  sim::HwConfig hw;
  std::string workload = "vit";
  std::vector<std::int64_t> resolutions{256, 512, 1024};
  bool fusion = true;
  bool sim_polish = true;

  void validate() const {
    if (calibration_samples == 0 || eval_samples == 0) throw DomainError("sample counts must be positive");
    if (methods.empty()) throw DomainError("at least one method is required");
    if (workload != "vit" && workload != "toy") throw DomainError("simulate.workload must be \"vit\" or \"toy\"");
    if (resolutions.empty()) throw DomainError("simulate.resolutions must not be empty");
    quant.reconstruction.validate();
    hw.validate();
  }
};

namespace detail {

using nlohmann::json;

inline void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw FormatError(where + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& item : j.items())
    if (!allowed.count(item.key())) throw FormatError("unknown key '" + item.key() + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(where + "." + key + " has the wrong type");
  }
}

template <typename T>
void read_per_precision(const json& j, const char* key, sim::PerPrecision<T>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& o = j.at(key);
  allow_keys(o, where + "." + key, {"fp32", "w4a8", "w4a4"});
  read(o, "fp32", out.fp32, where + "." + key);
  read(o, "w4a8", out.w4a8, where + "." + key);
  read(o, "w4a4", out.w4a4, where + "." + key);
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  detail::allow_keys(j, "config",
                     {"seed", "precision", "methods", "calibration_samples", "eval_samples", "quant", "toy", "hw",
                      "simulate"});
  RunConfig c;
  detail::read(j, "seed", c.seed, "config");
  if (j.contains("precision")) {
    std::string p;
    detail::read(j, "precision", p, "config");
    c.precision = parse_precision(p);
  }
  if (j.contains("methods")) {
    std::vector<std::string> names;
    detail::read(j, "methods", names, "config");
    c.methods.clear();
    for (const std::string& n : names) c.methods.push_back(parse_method(n));
  }
  detail::read(j, "calibration_samples", c.calibration_samples, "config");
  detail::read(j, "eval_samples", c.eval_samples, "config");

  if (j.contains("quant")) {
    const json& q = j.at("quant");
    detail::allow_keys(q, "quant",
                       {"epsilon", "damp_ratio", "percentile_clip", "polish", "attention_grid", "compensation",
                        "range_search", "adaptive_rounding", "reconstruction"});
    QuantConfig& o = c.quant;
    detail::read(q, "epsilon", o.epsilon, "quant");
    detail::read(q, "damp_ratio", o.damp_ratio, "quant");
    detail::read(q, "percentile_clip", o.percentile_clip, "quant");
    detail::read(q, "polish", o.polish, "quant");
    if (q.contains("attention_grid")) {
      std::string g;
      detail::read(q, "attention_grid", g, "quant");
      o.attention_grid = parse_prob_grid(g);
    }
    detail::read(q, "compensation", o.compensation, "quant");
    detail::read(q, "range_search", o.range_search, "quant");
    detail::read(q, "adaptive_rounding", o.adaptive_rounding, "quant");
    if (q.contains("reconstruction")) {
      const json& r = q.at("reconstruction");
      const std::string w = "quant.reconstruction";
      detail::allow_keys(r, w,
                         {"iterations", "learning_rate", "beta_start", "beta_end", "lambda_reg", "batch_size",
                          "warmup_fraction"});
      ReconstructionConfig& rc = o.reconstruction;
      detail::read(r, "iterations", rc.iterations, w);
      detail::read(r, "learning_rate", rc.learning_rate, w);
      detail::read(r, "beta_start", rc.beta_start, w);
      detail::read(r, "beta_end", rc.beta_end, w);
      detail::read(r, "lambda_reg", rc.lambda_reg, w);
      detail::read(r, "batch_size", rc.batch_size, w);
      detail::read(r, "warmup_fraction", rc.warmup_fraction, w);
    }
  }

  if (j.contains("toy")) {
    const json& t = j.at("toy");
    detail::allow_keys(t, "toy",
                       {"width", "depth", "heads", "mlp_ratio", "decoder_width", "outlier_channels",
                        "outlier_magnitude", "image_size", "patch"});
    ToyConfig& o = c.toy;
    detail::read(t, "width", o.width, "toy");
    detail::read(t, "depth", o.depth, "toy");
    detail::read(t, "heads", o.heads, "toy");
    detail::read(t, "mlp_ratio", o.mlp_ratio, "toy");
    detail::read(t, "decoder_width", o.decoder_width, "toy");
    detail::read(t, "outlier_channels", o.outlier_channels, "toy");
    detail::read(t, "outlier_magnitude", o.outlier_magnitude, "toy");
    detail::read(t, "image_size", o.image_size, "toy");
    detail::read(t, "patch", o.patch, "toy");
  }

  if (j.contains("hw")) {
    const json& h = j.at("hw");
    detail::allow_keys(h, "hw",
                       {"frequency_hz", "ddr_bandwidth_bytes_per_s", "num_cores", "mmu_macs_per_cycle_per_core",
                        "vcu_lanes_per_core", "sram_bytes_per_core", "energy_per_mac_pj", "energy_per_ddr_byte_pj",
                        "sfu_cycles_per_op", "layer_sync_cycles"});
    sim::HwConfig& o = c.hw;
    detail::read(h, "frequency_hz", o.frequency_hz, "hw");
    detail::read(h, "ddr_bandwidth_bytes_per_s", o.ddr_bandwidth_bytes_per_s, "hw");
    detail::read(h, "num_cores", o.num_cores, "hw");
    detail::read_per_precision(h, "mmu_macs_per_cycle_per_core", o.mmu_macs_per_cycle_per_core, "hw");
    detail::read(h, "vcu_lanes_per_core", o.vcu_lanes_per_core, "hw");
    detail::read(h, "sram_bytes_per_core", o.sram_bytes_per_core, "hw");
    detail::read_per_precision(h, "energy_per_mac_pj", o.energy_per_mac_pj, "hw");
    detail::read(h, "energy_per_ddr_byte_pj", o.energy_per_ddr_byte_pj, "hw");
    detail::read(h, "sfu_cycles_per_op", o.sfu_cycles_per_op, "hw");
    detail::read(h, "layer_sync_cycles", o.layer_sync_cycles, "hw");
  }

  if (j.contains("simulate")) {
    const json& s = j.at("simulate");
    detail::allow_keys(s, "simulate", {"workload", "resolutions", "fusion", "polish"});
    detail::read(s, "workload", c.workload, "simulate");
    detail::read(s, "resolutions", c.resolutions, "simulate");
    detail::read(s, "fusion", c.fusion, "simulate");
    detail::read(s, "polish", c.sim_polish, "simulate");
  }
  c.toy.seed = c.seed;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

}  // namespace qdk
