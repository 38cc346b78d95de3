// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

// qdk: calibrate, quantize and evaluate the toy depth model, and simulate the
// accelerator. Every output is written atomically into --out.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qdk/accel_sim.hpp"
#include "qdk/config.hpp"
#include "qdk/io.hpp"
#include "qdk/model_file.hpp"
#include "qdk/pipeline.hpp"
#include "qdk/toy_mde.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string fusion;
  std::string out = "qdk-out";
};

// Stage label attached to any error that escapes a command.
std::string g_stage = "startup";

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

using Row = std::vector<std::string>;

std::string csv(const Row& header, const std::vector<Row>& rows) {
  std::string s;
  auto line = [&](const Row& r) {
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
    s += '\n';
  };
  line(header);
  for (const Row& r : rows) line(r);
  return s;
}

std::vector<Row> read_csv(const fs::path& p) {
  std::vector<Row> rows;
  std::istringstream in(qdk::read_file(p));
  for (std::string line; std::getline(in, line);) {
    Row r;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) r.push_back(cell);
    rows.push_back(r);
  }
  if (rows.size() < 2) throw qdk::FormatError(p.string() + " has no data rows");
  return rows;
}

qdk::RunConfig load(const Options& o) {
  g_stage = "reading config " + o.config;
  qdk::RunConfig c = qdk::load_run_config(o.config);
  if (o.seed) c.seed = c.toy.seed = *o.seed;
  if (!o.precision.empty()) c.precision = qdk::parse_precision(o.precision);
  if (o.fusion == "on") c.fusion = true;
  if (o.fusion == "off") c.fusion = false;
  return c;
}

std::string tag(const qdk::RunConfig& c, qdk::Method m) { return c.precision.name() + "_" + qdk::to_string(m); }

fs::path model_path(const Options& o, const qdk::RunConfig& c, qdk::Method m) {
  return fs::path(o.out) / ("model_" + tag(c, m) + ".qrtd");
}

qdk::Network float_model(const qdk::RunConfig& c) {
  g_stage = "building toy model";
  return qdk::build_toy_mde(c.toy);
}

std::vector<qdk::Tensor> images(const qdk::RunConfig& c, std::uint64_t stream, std::size_t n) {
  return qdk::synthetic_images(c.seed, stream, n, c.toy.image_size, c.toy.patch);
}

int cmd_calibrate(const Options& o) {
  const qdk::RunConfig c = load(o);
  if (!c.precision.acts_quantized()) throw qdk::DomainError("calibration needs quantized activations (w4a8 or w4a4)");
  const qdk::Network net = float_model(c);
  const auto calib = images(c, qdk::stream::calibration, c.calibration_samples);
  g_stage = "calibrating activations";
  qdk::QuantConfig qc = c.quant;
  qc.precision = {32, c.precision.act_bits};
  const qdk::QuantizedModel q = qdk::quantize_network(net, calib, qc, c.methods.front());
  std::vector<Row> rows;
  for (const qdk::Layer& l : q.net.layers) {
    if (!l.input_quant) continue;
    const auto& p = l.input_quant->params;
    const auto [smin, smax] = std::minmax_element(p.scale.begin(), p.scale.end());
    Row r{l.name, l.input_quant->polish ? "1" : "0", std::to_string(p.bits), std::to_string(p.scale.size()), num(*smin),
          num(*smax)};
    if (l.input_quant->polish) {
      const auto& a = l.input_quant->polish->alpha;
      const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
      r.push_back(num(*amin));
      r.push_back(num(*amax));
    } else {
      r.push_back("");
      r.push_back("");
    }
    rows.push_back(r);
  }
  g_stage = "writing calibration";
  const std::string stem = "calibration_a" + std::to_string(c.precision.act_bits);
  qdk::save_model(fs::path(o.out) / (stem + ".qrtd"), qdk::to_model_file(q.net));
  qdk::write_file_atomic(fs::path(o.out) / (stem + ".csv"),
                         csv({"layer", "polished", "bits", "channels", "scale_min", "scale_max", "alpha_min", "alpha_max"},
                             rows));
  std::cerr << "calibrated " << rows.size() << " layer inputs\n";
  return 0;
}

int cmd_quantize(const Options& o) {
  const qdk::RunConfig c = load(o);
  const qdk::Network net = float_model(c);
  const auto calib = images(c, qdk::stream::calibration, c.calibration_samples);
  for (qdk::Method m : c.methods) {
    g_stage = "quantizing " + tag(c, m);
    qdk::QuantConfig qc = c.quant;
    qc.precision = c.precision;
    const qdk::QuantizedModel q = qdk::quantize_network(net, calib, qc, m, [&](const qdk::LayerReport& r) {
      std::cerr << tag(c, m) << ": " << r.name << (r.polished ? " (polished)" : "") << "\n";
    });
    std::vector<Row> rows;
    for (const qdk::LayerReport& r : q.layers)
      rows.push_back({r.name, r.polished ? "1" : "0", num(r.compensation_gain), num(r.rtn_loss), num(r.loss)});
    g_stage = "writing " + tag(c, m);
    qdk::save_model(model_path(o, c, m), qdk::to_model_file(q.net));
    qdk::write_file_atomic(fs::path(o.out) / ("quantize_" + tag(c, m) + ".csv"),
                           csv({"layer", "polished", "compensation_gain", "rtn_loss", "loss"}, rows));
  }
  return 0;
}

const Row kMetricHeader{"precision", "method", "absrel", "delta1", "delta2", "delta3", "rmse",
                       "rmse_log",  "log10",  "silog",  "sqrel"};

int cmd_eval(const Options& o) {
  const qdk::RunConfig c = load(o);
  const qdk::Network net = float_model(c);
  const auto eval = images(c, qdk::stream::evaluation, c.eval_samples);
  for (qdk::Method m : c.methods) {
    g_stage = "loading " + model_path(o, c, m).string() + " (run quantize first)";
    qdk::Network q = net;
    qdk::apply_model_file(q, qdk::load_model(model_path(o, c, m)));
    g_stage = "evaluating " + tag(c, m);
    const qdk::DepthMetrics d = qdk::evaluate_fidelity(net, q, eval);
    const Row r{c.precision.name(), qdk::to_string(m), num(d.absrel), num(d.delta1), num(d.delta2), num(d.delta3),
                num(d.rmse),        num(d.rmse_log),   num(d.log10),  num(d.silog),  num(d.sqrel)};
    qdk::write_file_atomic(fs::path(o.out) / ("eval_" + tag(c, m) + ".csv"), csv(kMetricHeader, {r}));
    std::cerr << tag(c, m) << ": absrel " << num(d.absrel) << "\n";
  }
  return 0;
}

int cmd_simulate(const Options& o) {
  const qdk::RunConfig c = load(o);
  g_stage = "simulating " + c.precision.name();
  const qdk::sim::HwPrecision p = qdk::sim::hw_precision(c.precision);
  std::vector<std::int64_t> res = c.resolutions;
  std::function<qdk::sim::Workload(std::int64_t)> make;
  if (c.workload == "vit") {
    make = [&](std::int64_t r) { return qdk::sim::vit_workload(r, c.sim_polish); };
  } else {
    const qdk::Network net = float_model(c);
    res = {static_cast<std::int64_t>(c.toy.image_size)};
    make = [net, &c](std::int64_t) { return qdk::sim::workload_from_network(net, c.sim_polish); };
  }
  std::vector<Row> rows;
  for (std::int64_t r : res) {
    const qdk::sim::Workload w = make(r);
    const qdk::sim::Program prog = qdk::sim::lower_workload(w, p, c.fusion, c.hw);
    const qdk::sim::ScheduleTrace t = qdk::sim::simulate(prog, c.hw);
    const qdk::sim::LatencyReport rep = qdk::sim::profile(t, prog, c.hw);
    double speedup = 1.0;
    if (p != qdk::sim::HwPrecision::fp32) {
      const qdk::sim::Program base = qdk::sim::lower_workload(w, qdk::sim::HwPrecision::fp32, c.fusion, c.hw);
      speedup = static_cast<double>(qdk::sim::simulate(base, c.hw).makespan_cycles) /
                static_cast<double>(t.makespan_cycles);
    }
    Row row{c.precision.name(), std::to_string(r), num(rep.total_ms), num(rep.fps), num(speedup)};
    for (double f : rep.breakdown) row.push_back(num(f));
    row.push_back(num(rep.power_efficiency_gmac_per_w));
    row.push_back(std::to_string(rep.ddr_bytes));
    row.push_back(num(rep.energy_pj));
    rows.push_back(row);
    qdk::write_file_atomic(fs::path(o.out) / ("trace_" + c.precision.name() + "_" + std::to_string(r) + ".csv"),
                           qdk::sim::trace_csv(prog, t));
    std::cerr << c.precision.name() << " @" << r << ": " << num(rep.total_ms) << " ms, " << num(speedup)
              << "x over fp32\n";
  }
  qdk::write_file_atomic(fs::path(o.out) / ("latency_" + c.precision.name() + ".csv"),
                         csv({"precision", "resolution", "total_ms", "fps", "speedup", "matmul", "conv", "softmax",
                              "layernorm", "vector", "data_movement", "power_eff_gmac_per_w", "ddr_bytes", "energy_pj"},
                             rows));
  return 0;
}

// One row per (precision, method) with evaluation results, joined with the
// first simulated resolution of that precision when available.
int cmd_report(const Options& o) {
  g_stage = "collecting results in " + o.out;
  if (!o.config.empty()) load(o);  // validates the config even though only files are joined
  std::vector<fs::path> evals;
  if (fs::is_directory(o.out))
    for (const auto& e : fs::directory_iterator(o.out)) {
      const std::string n = e.path().filename().string();
      if (n.rfind("eval_", 0) == 0 && e.path().extension() == ".csv") evals.push_back(e.path());
    }
  if (evals.empty()) throw qdk::FormatError("no eval_*.csv in " + o.out + " (run eval first)");
  std::sort(evals.begin(), evals.end());
  std::vector<Row> rows;
  for (const fs::path& p : evals) {
    g_stage = "reading " + p.string();
    const Row m = read_csv(p)[1];
    if (m.size() != kMetricHeader.size()) throw qdk::FormatError(p.string() + " has unexpected columns");
    Row r{m[0], m[1], m[2], m[3], m[6], m[9]};
    const fs::path lat = fs::path(o.out) / ("latency_" + m[0] + ".csv");
    if (fs::exists(lat)) {
      g_stage = "reading " + lat.string();
      const Row l = read_csv(lat)[1];
      if (l.size() < 12) throw qdk::FormatError(lat.string() + " has unexpected columns");
      for (int i : {1, 2, 3, 4, 11}) r.push_back(l[static_cast<std::size_t>(i)]);
    } else {
      r.insert(r.end(), 5, "");
    }
    rows.push_back(r);
  }
  g_stage = "writing report";
  qdk::write_file_atomic(fs::path(o.out) / "report.csv",
                         csv({"precision", "method", "absrel", "delta1", "rmse", "silog", "resolution", "latency_ms",
                              "fps", "speedup", "power_eff_gmac_per_w"},
                             rows));
  std::cerr << "report: " << rows.size() << " rows\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization and accelerator simulation toolkit"};
  app.require_subcommand(1);
  Options opt;
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Command commands[] = {
      {"calibrate", "fit activation quantizers and polish factors", cmd_calibrate},
      {"quantize", "quantize the toy model with every configured method", cmd_quantize},
      {"eval", "depth metrics of quantized models against the float model", cmd_eval},
      {"simulate", "accelerator latency, energy and instruction trace", cmd_simulate},
      {"report", "join evaluation and latency results into report.csv", cmd_report},
  };
  std::map<CLI::App*, const Command*> by_app;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    auto* cfg = sub->add_option("--config", opt.config, "JSON run configuration");
    if (std::string(c.name) != "report") cfg->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "override the configured seed");
    sub->add_option("--precision", opt.precision, "fp32 | w4 | w4a8 | w4a4")
        ->check(CLI::IsMember({"fp32", "w4", "w4a8", "w4a4"}));
    sub->add_option("--fusion", opt.fusion, "kernel fusion in the simulator")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--out", opt.out, "output directory")->capture_default_str();
    by_app[sub] = &c;
  }
  CLI11_PARSE(app, argc, argv);

  const Command* cmd = by_app.at(app.get_subcommands().front());
  try {
    return cmd->run(opt);
  } catch (const qdk::Error& e) {
    std::cerr << "qdk " << cmd->name << ": " << g_stage << ": " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "qdk " << cmd->name << ": " << g_stage << ": unexpected failure: " << e.what() << "\n";
  }
  return 1;
}
