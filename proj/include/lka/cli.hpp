// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// The `lka` command line: train, eval, erf, params, sweep and gen-data.
// run() takes the arguments without the program name and reports through
// the given streams, so it can be driven in-process.

#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "lka/analysis.hpp"
#include "lka/checkpoint.hpp"
#include "lka/config.hpp"
#include "lka/data.hpp"
#include "lka/model.hpp"
#include "lka/train.hpp"

namespace lka::cli {

inline constexpr const char* kOutDirEnv = "LKA_OUT_DIR";

// Thrown for bad usage that CLI11 cannot see (conflicting flags, bad lists).
struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;

  std::filesystem::path out() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
    return ".";
  }
};

// Defaults, then the config file, then --set overrides.
inline RunConfig resolve_config(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) {
    const auto bytes = io::read_file(c.config_path);
    apply_key_values(rc, parse_key_values(std::string(bytes.begin(), bytes.end())));
  }
  KeyValues overrides;
  for (const auto& s : c.sets) {
    auto [k, v] = parse_assignment(s);
    overrides[k] = v;
  }
  apply_key_values(rc, overrides);
  rc.validate();
  return rc;
}

inline std::filesystem::path prepare_out(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

inline void write_effective_config(const std::filesystem::path& dir, const RunConfig& rc) {
  io::write_text(dir / "effective-config.txt", echo_config(rc));
}

inline std::vector<std::optional<std::size_t>> parse_kernel_list(const std::string& s) {
  std::vector<std::optional<std::size_t>> out;
  for (const auto& item : split_list(s)) out.push_back(parse_kernel(trim(item)));
  if (out.empty()) throw UsageError("--kernel needs at least one value");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& name, const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) out.push_back(parse_number<std::size_t>(name, trim(item)));
  if (out.empty()) throw UsageError(name + " needs at least one value");
  return out;
}

inline std::string kernel_label(const std::optional<std::size_t>& k) { return k ? std::to_string(*k) : "none"; }

// Synthetic data follows the model's image size and class count.
inline Dataset synthetic_data(const RunConfig& rc) {
  return gen_longrange(rc.data.seed, rc.data.samples, rc.model.image_size, rc.model.classes);
}

inline Dataset input_data(const RunConfig& rc, const std::string& path) {
  return path.empty() ? synthetic_data(rc) : load_dataset(path);
}

struct RunResult {
  std::vector<EpochMetrics> history;
  double test_top1 = 0.0;
  std::size_t train_samples = 0, test_samples = 0;
};

inline RunResult train_and_test(Model& m, const Dataset& ds, const RunConfig& rc) {
  auto [train_set, test_set] = split_80_20(ds, rc.data.split_seed);
  RunResult r;
  r.history = train(m, train_set, rc.train);
  r.test_top1 = evaluate(m, test_set);
  r.train_samples = train_set.size();
  r.test_samples = test_set.size();
  return r;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& h) {
  std::string s = "epoch,loss,train_top1\n";
  for (const auto& e : h) s += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + format_double(e.train_top1) + "\n";
  return s;
}

inline std::size_t trainable_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable_params(m)) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int cmd_train(const Common& c, const std::string& data_path, std::ostream& out) {
  const RunConfig rc = resolve_config(c);
  const auto dir = prepare_out(c.out());
  write_effective_config(dir, rc);
  const Dataset ds = input_data(rc, data_path);
  Model m = build_model(rc.model, rc.seeds);
  auto [train_set, test_set] = split_80_20(ds, rc.data.split_seed);
  Trainer t(m, train_set, rc.train);
  auto history = t.run();
  const double top1 = evaluate(m, test_set);
  io::write_text(dir / "metrics.csv", metrics_csv(history));
  io::write_text(dir / "summary.csv", "test_top1,trainable_params,train_samples,test_samples\n" + format_double(top1) +
                                          "," + std::to_string(trainable_count(m)) + "," +
                                          std::to_string(train_set.size()) + "," + std::to_string(test_set.size()) +
                                          "\n");
  save_checkpoint(m, t.optimizer(), dir / "checkpoint.lkck", echo_config(rc));
  for (const auto& e : history)
    out << "epoch " << e.epoch << "  loss " << format_double(e.loss) << "  train_top1 " << format_double(e.train_top1)
        << "\n";
  out << "test top-1: " << format_double(top1) << "\n";
  out << "checkpoint: " << (dir / "checkpoint.lkck").string() << "\n";
  return 0;
}

inline int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_path, std::ostream& out) {
  auto loaded = load_checkpoint(ckpt);
  const auto dir = prepare_out(c.out());
  write_effective_config(dir, loaded.config);
  const Dataset ds = load_dataset(data_path);
  const double top1 = evaluate(loaded.model, ds);
  const std::string row = ckpt + "," + data_path + "," + std::to_string(ds.size()) + "," + format_double(top1) + "\n";
  io::write_text(dir / "eval.csv", "checkpoint,data,samples,top1\n" + row);
  out << "top-1: " << format_double(top1) << "\n";
  return 0;
}

inline int cmd_erf(const Common& c, const std::string& ckpt, std::size_t size, std::size_t images,
                   std::optional<double> perturb, std::ostream& out) {
  RunConfig rc;
  Model m;
  if (!ckpt.empty()) {
    if (!c.config_path.empty() || !c.sets.empty()) throw UsageError("erf takes either --ckpt or --config/--set");
    auto loaded = load_checkpoint(ckpt);
    rc = loaded.config;
    m = std::move(loaded.model);
  } else {
    rc = resolve_config(c);
    m = build_model(rc.model, rc.seeds);
  }
  if (size != rc.model.image_size)
    throw UsageError("--size " + std::to_string(size) + " does not match the model's image size " +
                     std::to_string(rc.model.image_size));
  if (images == 0) throw UsageError("--images must be positive");
  if (perturb) perturb_adapters(m, rc.seeds.adapters, *perturb);
  const auto dir = prepare_out(c.out());
  write_effective_config(dir, rc);
  auto ds = gen_longrange(rc.data.seed, images, size, rc.model.classes);
  ErfMap e = erf_map(m, ds.images());
  if (e.degenerate) throw Error("ERF map is all zero; nothing to export");
  export_erf(e, dir / "erf.pgm", dir / "erf.csv");
  out << erf_metrics_csv(e);
  out << "wrote " << (dir / "erf.pgm").string() << "\n";
  return 0;
}

inline int cmd_params(const Common& c, std::ostream& out) {
  const RunConfig rc = resolve_config(c);
  const auto dir = prepare_out(c.out());
  write_effective_config(dir, rc);
  out << format_param_report(param_report(build_model(rc.model, rc.seeds)));
  return 0;
}

struct SweepCell {
  std::optional<std::size_t> kernel;
  std::size_t width = 0;
  std::size_t seed = 0;
};

struct SweepRow {
  double test_top1 = 0.0;
  std::size_t trainable = 0, adapter_params = 0;
  double seconds = 0.0;
};

inline int cmd_sweep(const Common& c, const std::string& kernels, const std::string& widths, std::size_t seeds,
                     std::size_t jobs, const std::string& data_path, std::ostream& out) {
  const RunConfig base = resolve_config(c);
  if (seeds == 0) throw UsageError("--seeds must be positive");
  const auto ks = parse_kernel_list(kernels);
  const auto ws = widths.empty() ? std::vector<std::size_t>{base.model.bottleneck} : parse_size_list("--width", widths);
  std::vector<SweepCell> cells;
  for (const auto& k : ks)
    for (auto w : ws)
      for (std::size_t s = 0; s < seeds; ++s) cells.push_back({k, w, s});
  std::vector<RunConfig> configs;
  for (const auto& cell : cells) {
    RunConfig rc = base;
    rc.model.adapters = true;
    rc.model.kernel = cell.kernel;
    rc.model.bottleneck = cell.width;
    rc.seeds.adapters = base.seeds.adapters + cell.seed;
    rc.train.seed = base.train.seed + cell.seed;
    rc.validate();
    configs.push_back(rc);
  }
  const auto dir = prepare_out(c.out());
  write_effective_config(dir, base);
  const Dataset ds = input_data(base, data_path);

  std::vector<SweepRow> rows(cells.size());
  std::mutex log_mu;
  auto run_cell = [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    Model m = build_model(configs[i].model, configs[i].seeds);
    const auto r = train_and_test(m, ds, configs[i]);
    rows[i].test_top1 = r.test_top1;
    rows[i].trainable = trainable_count(m);
    rows[i].adapter_params = param_report(m).adapters.total();
    rows[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard lock(log_mu);
    out << "kernel " << kernel_label(cells[i].kernel) << " width " << cells[i].width << " seed " << cells[i].seed
        << ": top-1 " << format_double(r.test_top1) << "\n";
  };
  if (jobs <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors;
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, cells.size()); ++j)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < cells.size();) {
          try {
            run_cell(i);
          } catch (const std::exception& e) {
            std::lock_guard lock(log_mu);
            errors.push_back(e.what());
          }
        }
      });
    for (auto& t : pool) t.join();
    if (!errors.empty()) throw Error("sweep cell failed: " + errors.front());
  }

  // Rows come out in (kernel, width, seed) order whatever the schedule.
  std::string csv = "kernel,width,seed,test_top1,trainable_params,adapter_params\n";
  std::string timing = "kernel,width,seed,runtime_s\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string key =
        kernel_label(cells[i].kernel) + "," + std::to_string(cells[i].width) + "," + std::to_string(cells[i].seed);
    csv += key + "," + format_double(rows[i].test_top1) + "," + std::to_string(rows[i].trainable) + "," +
           std::to_string(rows[i].adapter_params) + "\n";
    timing += key + "," + format_double(rows[i].seconds) + "\n";
  }
  io::write_text(dir / "sweep.csv", csv);
  io::write_text(dir / "sweep-runtime.csv", timing);
  out << csv;
  return 0;
}

inline int cmd_gen_data(std::uint64_t seed, std::size_t n, std::size_t size, std::size_t classes,
                        const std::string& path, std::ostream& out) {
  if (path.empty()) throw UsageError("gen-data needs --out FILE");
  if (size < 32) throw UsageError("gen-data needs --size >= 32");
  if (classes != 2 && classes != 4) throw UsageError("gen-data supports --classes 2 or 4");
  const auto ds = gen_longrange(seed, n, size, classes);
  const std::filesystem::path p(path);
  if (p.has_parent_path()) prepare_out(p.parent_path());
  save_dataset(ds, p);
  out << "wrote " << n << " samples to " << path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Large-kernel adapter tuning on a desk-scale vision transformer"};
  app.name("lka");
  app.require_subcommand(1);
  app.footer(std::string("Environment:\n  ") + kOutDirEnv +
             "  default output directory when --out is not given (else the current directory)");

  Common common;
  auto add_common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", common.config_path, "key = value config file")->check(CLI::ExistingFile);
      sub->add_option("--set", common.sets, "override a config key (key=value); flags win over the file");
    }
    sub->add_option("--out", common.out_dir, "output directory");
  };

  std::string data_path, ckpt, kernels, widths, gen_out;
  bool synthetic = false;
  std::size_t size = 0, images = 8, seeds = 1, jobs = 1, n = 2000, classes = 4;
  std::uint64_t gen_seed = 0;
  std::optional<double> perturb;

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.lkck and metrics.csv");
  add_common(train_cmd, true);
  auto* data_opt = train_cmd->add_option("--data", data_path, "LKDS dataset (80/20 split)")->check(CLI::ExistingFile);
  train_cmd->add_flag("--synthetic", synthetic, "generate the long-range task (default)")->excludes(data_opt);

  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a dataset");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_path, "LKDS dataset")->required()->check(CLI::ExistingFile);

  auto* erf_cmd = app.add_subcommand("erf", "effective receptive field map (PGM) and area ratios (CSV)");
  add_common(erf_cmd, true);
  erf_cmd->add_option("--ckpt", ckpt, "checkpoint file (or build from --config)")->check(CLI::ExistingFile);
  erf_cmd->add_option("--size", size, "image size S")->required();
  erf_cmd->add_option("--images", images, "number of synthetic images")->capture_default_str();
  erf_cmd->add_option("--perturb", perturb, "fill adapter up-projections uniformly in [-B, B] first");

  auto* params_cmd = app.add_subcommand("params", "parameter counts by group, closed form vs enumeration");
  add_common(params_cmd, true);

  auto* sweep_cmd = app.add_subcommand("sweep", "train one model per (kernel, width, seed) and write sweep.csv");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--kernel", kernels, "comma-separated kernel sizes; 'none' for the vanilla adapter")->required();
  sweep_cmd->add_option("--width", widths, "comma-separated bottleneck widths (default: config)");
  sweep_cmd->add_option("--seeds", seeds, "adapter/batch seeds per cell")->capture_default_str();
  sweep_cmd->add_option("--jobs", jobs, "cells trained concurrently")->capture_default_str();
  sweep_cmd->add_option("--data", data_path, "LKDS dataset instead of the synthetic task")->check(CLI::ExistingFile);

  auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic long-range task as an LKDS file");
  gen_cmd->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--n", n, "number of samples")->capture_default_str();
  gen_cmd->add_option("--size", size, "image size S (>= 32)")->required();
  gen_cmd->add_option("--classes", classes, "2 or 4")->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "output file")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto& subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(common, data_path, out);
    if (*eval_cmd) return cmd_eval(common, ckpt, data_path, out);
    if (*erf_cmd) return cmd_erf(common, ckpt, size, images, perturb, out);
    if (*params_cmd) return cmd_params(common, out);
    if (*sweep_cmd) return cmd_sweep(common, kernels, widths, seeds, jobs, data_path, out);
    if (*gen_cmd) return cmd_gen_data(gen_seed, n, size, classes, gen_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int main_entry(int argc, char** argv) {
  return run(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace lka::cli
