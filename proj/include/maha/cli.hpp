#pragma once

// Command-line front end: bench, train, ablate, gradcheck, heatmap.
// Exit codes: 0 success, 1 check failure, 2 config error, 3 divergence.

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maha/aggregate.hpp"
#include "maha/config.hpp"
#include "maha/errors.hpp"
#include "maha/flops.hpp"
#include "maha/gradcheck.hpp"
#include "maha/heatmap.hpp"
#include "maha/hybrid.hpp"
#include "maha/toymodel.hpp"

namespace maha {

enum ExitCode : int { exit_ok = 0, exit_check_failed = 1, exit_config = 2, exit_diverged = 3 };

/// Writes to a sibling temp file, then renames over the destination.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// "2,4,6" -> {2, 4, 6}; the empty string gives an empty list.
inline std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    item = item.substr(first, item.find_last_not_of(" \t") - first + 1);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.front() == '-') throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::string format_exact(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

/// Flag values; unset flags leave the config untouched.
struct CliOverrides {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> agg;
  std::optional<std::string> scales;
  std::optional<std::string> layers;
  std::optional<std::string> lengths;
  std::optional<std::string> policy;
  std::optional<std::string> metric;
  std::optional<std::string> format;
  std::optional<std::size_t> n;
  std::optional<std::size_t> steps;
  bool timing = false;
  bool trained = false;
  bool inject_fault = false;
};

inline RunConfig resolve_config(const CliOverrides& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.out) c.output.directory = *o.out;
  if (o.seed) c.train.seed = *o.seed;
  if (o.task) c.train.task = *o.task;
  if (o.agg) c.solver.method = *o.agg;
  if (o.lengths) c.bench.lengths = parse_size_list(*o.lengths, "--lengths");
  if (o.policy) c.bench.policy = *o.policy;
  if (o.metric) c.bench.metric = *o.metric;
  if (o.format) c.output.formats = {*o.format};
  if (o.n) c.model.n = *o.n;
  if (o.steps) c.train.steps = *o.steps;
  if (o.timing) c.bench.timing = true;
  c.validate();
  return c;
}

inline std::filesystem::path out_dir(const RunConfig& c) { return std::filesystem::path(c.output.directory); }

inline void write_resolved_config(const RunConfig& c) {
  write_atomic(out_dir(c) / "config.json", config_to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// bench

/// Wall-clock of one co layer forward against plain single-scale attention.
inline std::string bench_timing_csv(const RunConfig& c) {
  std::ostringstream os;
  os << "n,depth,maha_ms,baseline_ms\n";
  Rng rng(c.train.seed);
  const auto kind = parse_downsample_kind(c.model.downsample_kind);
  for (std::size_t n : c.bench.lengths) {
    const std::size_t depth = std::min(c.bench.depth, max_feasible_depth(n, c.bench.ratio));
    if (depth == 0) continue;
    const auto sched = make_schedule(n, c.bench.ratio, depth);
    auto p = HybridParams::random(c.model.d, c.model.d_k, sched, kind, rng);
    p.solver = c.solver_config();
    const Matrix x = random_matrix(n, c.model.d, rng);
    const Matrix wq = init_uniform(c.model.d, c.model.d_k, c.model.d, rng);
    const Matrix wk = init_uniform(c.model.d, c.model.d_k, c.model.d, rng);
    const Matrix wv = init_uniform(c.model.d, c.model.d, c.model.d, rng);

    auto t0 = std::chrono::steady_clock::now();
    const auto y = maha_layer(x, p, sched, AggMethod::co);
    auto t1 = std::chrono::steady_clock::now();
    const Matrix a = scaled_dot_attention(matmul(x, wq), matmul(x, wk), c.model.d_k);
    const Matrix o = matmul(a, matmul(x, wv));
    auto t2 = std::chrono::steady_clock::now();
    (void)y;
    (void)o;
    os << n << ',' << depth << ',' << format_real(std::chrono::duration<double, std::milli>(t1 - t0).count(), 3)
       << ',' << format_real(std::chrono::duration<double, std::milli>(t2 - t1).count(), 3) << '\n';
  }
  return os.str();
}

inline int cmd_bench(const RunConfig& c, std::ostream& out) {
  const auto rows = bench_sweep(c.bench_config());
  write_resolved_config(c);
  write_atomic(out_dir(c) / "flops.csv", bench_csv(rows));
  for (const auto& r : rows) {
    out << std::setw(6) << r.n << "  " << std::setw(12) << to_string(r.policy) << "  " << std::setw(13)
        << to_string(r.metric) << "  baseline " << r.baseline << "  maha " << r.maha << "  reduction "
        << format_real(r.reduction_pct, 2) << "%" << (r.degenerate ? "  (degenerate)" : "") << '\n';
  }
  if (c.bench.timing) write_atomic(out_dir(c) / "timing.csv", bench_timing_csv(c));
  return exit_ok;
}

// ---------------------------------------------------------------------------
// train / ablate

inline std::string loss_curve_csv(const std::vector<std::pair<AggMethod, TrainTrace>>& runs) {
  std::ostringstream os;
  os << "method,step,loss\n";
  for (const auto& [m, t] : runs)
    for (std::size_t s = 0; s < t.losses.size(); ++s) os << to_string(m) << ',' << s << ',' << format_exact(t.losses[s]) << '\n';
  return os.str();
}

inline std::string weights_csv(const std::vector<std::pair<AggMethod, TrainTrace>>& runs) {
  std::ostringstream os;
  os << "method,step,layer,scale,weight\n";
  for (const auto& [m, t] : runs)
    for (std::size_t s = 0; s < t.weights.size(); ++s)
      for (std::size_t b = 0; b < t.weights[s].size(); ++b)
        for (std::size_t k = 0; k < t.weights[s][b].size(); ++k)
          os << to_string(m) << ',' << s << ',' << b << ',' << k << ',' << format_exact(t.weights[s][b][k]) << '\n';
  return os.str();
}

inline int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto base = c.toy_config();
  base.validate();
  write_resolved_config(c);
  // Several methods train round-robin so their ms/step figures are comparable.
  std::vector<ToyModelConfig> cfgs;
  for (AggMethod m : c.methods()) {
    cfgs.push_back(base);
    cfgs.back().method = m;
  }
  auto traces = train_interleaved(cfgs);
  std::vector<std::pair<AggMethod, TrainTrace>> runs;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const AggMethod m = cfgs[i].method;
    const auto& trace = traces[i];
    out << to_string(m) << ": final smoothed loss " << format_real(final_smoothed_loss(trace)) << ", reduction "
        << format_real(100.0 * smoothed_reduction(trace.losses), 2) << "%, accuracy "
        << format_real(trace.final_metric, 4) << ", " << format_real(1e3 * trace.median_step_seconds(), 2)
        << " ms/step\n";
    runs.emplace_back(m, std::move(traces[i]));
  }
  write_atomic(out_dir(c) / "loss_curve.csv", loss_curve_csv(runs));
  write_atomic(out_dir(c) / "weights.csv", weights_csv(runs));
  return exit_ok;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, bool by_depth) {
  std::ostringstream os;
  os << (by_depth ? "depth" : "method") << ",final_loss,metric,wallclock_rel,solver_rel\n";
  for (const auto& r : rows) {
    os << (by_depth ? std::to_string(r.depth) : to_string(r.method)) << ',' << format_real(r.final_loss, 8) << ','
       << format_real(r.metric, 6) << ',' << format_real(r.wallclock_rel, 4) << ',' << format_real(r.solver_rel, 4)
       << '\n';
  }
  return os.str();
}

/// Aggregation table over --agg (all three by default) and, with --scales,
/// a depth table.
inline int cmd_ablate(const RunConfig& c, const CliOverrides& o, std::ostream& out) {
  const auto base = c.toy_config();
  std::vector<std::size_t> depths;
  if (o.scales) {
    depths = parse_size_list(*o.scales, "--scales");
    if (depths.empty()) throw ConfigError("--scales: empty depth list");
    const std::size_t max_depth = max_feasible_depth(base.n, base.ratio);
    for (std::size_t dpt : depths) {
      if (dpt < 1 || dpt > max_depth) {
        throw ConfigError("--scales: depth " + std::to_string(dpt) + " is infeasible for n=" + std::to_string(base.n) +
                          " at r=" + std::to_string(base.ratio) + " (max " + std::to_string(max_depth) +
                          "); raise model.n");
      }
    }
  }
  base.validate();
  write_resolved_config(c);
  const auto methods = o.agg ? c.methods() : std::vector<AggMethod>{AggMethod::co, AggMethod::ne, AggMethod::mean};
  const auto agg_rows = ablate_aggregation(base, methods);
  write_atomic(out_dir(c) / "ablation_aggregation.csv", ablation_csv(agg_rows, false));
  for (const auto& r : agg_rows)
    out << "method " << r.label << ": loss " << format_real(r.final_loss) << ", metric " << format_real(r.metric, 4)
        << ", wall-clock x" << format_real(r.wallclock_rel, 2) << ", solver x" << format_real(r.solver_rel, 2) << '\n';
  if (!depths.empty()) {
    const auto scale_rows = ablate_scales(base, depths);
    write_atomic(out_dir(c) / "ablation_scales.csv", ablation_csv(scale_rows, true));
    for (const auto& r : scale_rows)
      out << "L=" << r.label << ": loss " << format_real(r.final_loss) << ", metric " << format_real(r.metric, 4)
          << ", wall-clock x" << format_real(r.wallclock_rel, 2) << '\n';
  }
  return exit_ok;
}

// ---------------------------------------------------------------------------
// gradcheck

inline constexpr std::size_t kGradcheckMaxLength = 32;
inline constexpr double kGradcheckEps = 1e-4;
inline constexpr double kGradcheckTol = 1e-4;

struct SuiteResult {
  std::string suite;
  GradCheckReport report;
};

/// Full layer against finite differences: every parameter group plus the input.
inline GradCheckReport layer_gradcheck(const RunConfig& c, AggMethod method, bool inject_fault) {
  Rng rng(c.train.seed + 11);
  const auto sched = make_schedule(c.model.n, c.model.ratio, c.model.depth, c.model.include_base_scale);
  HybridOptions opts;
  opts.gating = c.model.gating;
  opts.local_conv = c.model.local_conv;
  opts.dilation = c.model.dilation;
  auto p = HybridParams::random(c.model.d, c.model.d_k, sched, parse_downsample_kind(c.model.downsample_kind), rng,
                                opts);
  p.solver = c.solver_config();
  p.solver.tol = 0.0;  // fixed iteration count keeps the unrolled map smooth
  for (auto& b : p.local_bias)
    for (double& v : b) v = rng.uniform(-0.3, 0.3);
  Matrix x = random_matrix(c.model.n, c.model.d, rng);
  const Matrix r = random_matrix(c.model.n, c.model.d, rng);

  LayerCache cache;
  const auto y = maha_layer_forward(x, p, sched, method, opts, &cache);
  auto g = maha_layer_backward(cache, y, p, sched, opts, r);

  std::vector<std::vector<double>> analytic;
  g.dparams.visit([&](const std::string&, std::span<double> v) { analytic.emplace_back(v.begin(), v.end()); });
  std::vector<ParamGroup> groups;
  std::size_t k = 0;
  p.visit([&](const std::string& name, std::span<double> v) { groups.push_back({name, v, analytic[k++]}); });
  groups.push_back({"input", x.values(), std::vector<double>(g.dx.values().begin(), g.dx.values().end())});
  if (inject_fault) {
    for (auto& grp : groups)
      if (grp.name == "gate")
        for (double& v : grp.analytic) v *= 1.1;
  }
  auto f = [&] { return frobenius_dot(maha_layer(x, p, sched, method, opts).y, r); };
  return finite_diff_check(f, groups, kGradcheckEps, kGradcheckTol);
}

/// The co solve on its own: d<r, w>/dC_l and d<r, w>/dT through the unrolled
/// iterations.
inline GradCheckReport co_unrolled_gradcheck(const RunConfig& c) {
  Rng rng(c.train.seed + 23);
  const std::size_t scales = std::max<std::size_t>(c.model.depth, 2);
  std::vector<Matrix> cands;
  for (std::size_t l = 0; l < scales; ++l) cands.push_back(random_matrix(c.model.n, c.model.d, rng));
  Matrix target = random_matrix(c.model.n, c.model.d, rng);
  std::vector<double> r(scales);
  for (double& v : r) v = rng.uniform(-1.0, 1.0);
  auto cfg = c.solver_config();
  cfg.tol = 0.0;

  const auto sol = co_solve_traced(cands, target, cfg);
  const auto g = co_backward(cands, target, sol, r, cfg);
  std::vector<ParamGroup> groups;
  for (std::size_t l = 0; l < scales; ++l) {
    groups.push_back({"candidate_" + std::to_string(l), cands[l].values(),
                      std::vector<double>(g.dcands[l].values().begin(), g.dcands[l].values().end())});
  }
  groups.push_back({"target", target.values(), std::vector<double>(g.dtarget.values().begin(), g.dtarget.values().end())});
  auto f = [&] {
    const auto w = co_solve(cands, target, cfg).w;
    double s = 0.0;
    for (std::size_t l = 0; l < scales; ++l) s += r[l] * w[l];
    return s;
  };
  return finite_diff_check(f, groups, kGradcheckEps, kGradcheckTol);
}

inline std::vector<SuiteResult> run_gradcheck_suites(const RunConfig& c, bool inject_fault) {
  if (c.model.n > kGradcheckMaxLength) {
    throw ConfigError("gradcheck needs a tiny config: n=" + std::to_string(c.model.n) + " exceeds " +
                      std::to_string(kGradcheckMaxLength));
  }
  std::vector<SuiteResult> out;
  out.push_back({"layer_co", layer_gradcheck(c, AggMethod::co, inject_fault)});
  out.push_back({"layer_ne", layer_gradcheck(c, AggMethod::ne, false)});
  out.push_back({"layer_mean", layer_gradcheck(c, AggMethod::mean, false)});
  out.push_back({"co_unrolled", co_unrolled_gradcheck(c)});
  return out;
}

inline int cmd_gradcheck(const RunConfig& c, const CliOverrides& o, std::ostream& out) {
  const auto suites = run_gradcheck_suites(c, o.inject_fault);
  write_resolved_config(c);
  std::ostringstream csv;
  csv << "suite,group,max_rel_error,pass\n";
  bool ok = true;
  for (const auto& s : suites) {
    for (const auto& g : s.report.groups) {
      const bool pass = g.max_rel_error < s.report.tolerance;
      ok = ok && pass;
      csv << s.suite << ',' << g.name << ',' << std::scientific << std::setprecision(3) << g.max_rel_error
          << std::defaultfloat << ',' << (pass ? 1 : 0) << '\n';
      out << (pass ? "ok    " : "FAIL  ") << s.suite << ' ' << g.name << "  rel err " << std::scientific
          << std::setprecision(3) << g.max_rel_error << std::defaultfloat << '\n';
    }
  }
  write_atomic(out_dir(c) / "gradcheck.csv", csv.str());
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tol " << kGradcheckTol << ")\n";
  return ok ? exit_ok : exit_check_failed;
}

// ---------------------------------------------------------------------------
// heatmap

/// One file per selected scale and layer, named scale_<l>_layer_<i>.<ext>,
/// where l is the pyramid level and i the block index.
inline int cmd_heatmap(const RunConfig& c, const CliOverrides& o, std::ostream& out) {
  auto cfg = c.toy_config();
  cfg.validate();
  const auto sched = cfg.schedule();
  const auto levels = sched.attention_levels();

  std::vector<std::size_t> scales = levels;
  if (o.scales) {
    scales = parse_size_list(*o.scales, "--scales");
    if (scales.empty()) throw ConfigError("--scales: empty scale selector");
    for (std::size_t l : scales)
      if (std::find(levels.begin(), levels.end(), l) == levels.end())
        throw ConfigError("--scales: level " + std::to_string(l) + " is not an attention scale of this model");
  }
  std::vector<std::size_t> layers;
  for (std::size_t b = 0; b < cfg.layers; ++b) layers.push_back(b);
  if (o.layers) {
    layers = parse_size_list(*o.layers, "--layers");
    if (layers.empty()) throw ConfigError("--layers: empty layer selector");
    for (std::size_t b : layers)
      if (b >= cfg.layers)
        throw ConfigError("--layers: layer " + std::to_string(b) + " out of range (model has " +
                          std::to_string(cfg.layers) + ")");
  }

  auto task = make_task(cfg);
  ToyModel model;
  if (o.trained) {
    train(cfg, &model);
  } else {
    model = ToyModel::init(cfg, task.classes());
  }
  write_resolved_config(c);
  auto probe = make_task(cfg, 424243);
  const auto res = run_sample(model, cfg, sched, probe.next(), nullptr, true);

  std::size_t files = 0;
  for (const auto& fmt_name : c.output.formats) {
    HeatmapSpec spec;
    spec.format = parse_heatmap_format(fmt_name);
    for (std::size_t b : layers) {
      for (std::size_t l : scales) {
        const auto s = static_cast<std::size_t>(std::find(levels.begin(), levels.end(), l) - levels.begin());
        spec.scale = l;
        const auto name = "scale_" + std::to_string(l) + "_layer_" + std::to_string(b) + "." + fmt_name;
        write_atomic(out_dir(c) / name, export_heatmap(res.attention[b][s], spec));
        ++files;
      }
    }
  }
  out << "wrote " << files << " heatmap file(s) to " << c.output.directory << '\n';
  return exit_ok;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multiscale aggregated hierarchical attention: benchmarks, training and checks"};
  app.require_subcommand(1);
  app.fallthrough();
  CliOverrides o;
  auto opt = [&](const char* flag, auto& dst, const char* help) { app.add_option(flag, dst, help); };

  app.add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  opt("--out", o.out, "output directory");
  opt("--seed", o.seed, "random seed");
  opt("--task", o.task, "copy or pattern_classify");
  opt("--agg", o.agg, "co, ne, mean or all");
  opt("--scales", o.scales, "comma list: depths (ablate) or pyramid levels (heatmap)");
  opt("--layers", o.layers, "comma list of block indices (heatmap)");
  opt("--lengths", o.lengths, "comma list of sequence lengths (bench)");
  opt("--policy", o.policy, "proportional or absolute (bench)");
  opt("--metric", o.metric, "score_entries or full_macs (bench)");
  opt("--format", o.format, "csv or pgm (heatmap)");
  opt("--n", o.n, "sequence length");
  opt("--steps", o.steps, "training steps");
  app.add_flag("--timing", o.timing, "also write timing.csv (bench)");
  app.add_flag("--trained", o.trained, "train before exporting (heatmap)");
  app.add_flag("--inject-fault", o.inject_fault, "corrupt one analytic gradient (gradcheck negative control)")
      ->group("");

  auto* bench = app.add_subcommand("bench", "attention cost sweep -> flops.csv");
  auto* train_cmd = app.add_subcommand("train", "toy-task training -> loss_curve.csv, weights.csv");
  auto* ablate = app.add_subcommand("ablate", "aggregation and depth ablations");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks on a tiny layer");
  auto* heatmap = app.add_subcommand("heatmap", "export attention maps");

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_config;
  }

  try {
    const RunConfig c = resolve_config(o);
    if (bench->parsed()) return cmd_bench(c, out);
    if (train_cmd->parsed()) return cmd_train(c, out);
    if (ablate->parsed()) return cmd_ablate(c, o, out);
    if (gradcheck->parsed()) return cmd_gradcheck(c, o, out);
    if (heatmap->parsed()) return cmd_heatmap(c, o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DivergenceError& e) {
    err << "diverged at step " << e.step() << ": " << e.what() << '\n';
    return exit_diverged;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_check_failed;
  }
  return exit_config;
}

}  // namespace maha
