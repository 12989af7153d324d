#pragma once

// JSON run configuration. Every section and key is optional; missing keys
// take the defaults below, unknown keys are rejected.
//
//   model:  n 32, d 32, d_k 8, L 2, r 2, downsample_kind "strided_conv",
//           heads 1, include_base_scale false, gating true, local_conv true,
//           dilation 2, layers 2, vocab 16, ffn_hidden 64
//   solver: method "co" (co|ne|mean|all), lambda 0.1, iters 50, step 1.0,
//           tol 1e-8, target_kind "value_pathway"
//   train:  task "copy", lr 0.1, steps 500, seed 0, batch 8, copy_shift 0,
//           eval_samples 64
//   bench:  lengths [128..4096 doubling], policy "both", metric
//           "score_entries", L 4, r 2, timing false
//   output: directory "out", formats ["pgm"] (heatmap file types; tables are always CSV)

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maha/aggregate.hpp"
#include "maha/errors.hpp"
#include "maha/flops.hpp"
#include "maha/heatmap.hpp"
#include "maha/pyramid.hpp"
#include "maha/toymodel.hpp"

namespace maha {

struct ModelSection {
  std::size_t n = 32;
  std::size_t d = 32;
  std::size_t d_k = 8;
  std::size_t depth = 2;
  std::size_t ratio = 2;
  std::string downsample_kind = "strided_conv";
  std::size_t heads = 1;
  bool include_base_scale = false;
  bool gating = true;
  bool local_conv = true;
  std::size_t dilation = 2;
  std::size_t layers = 2;
  std::size_t vocab = 16;
  std::size_t ffn_hidden = 64;
};

struct SolverSection {
  std::string method = "co";
  double lambda = 0.1;
  std::size_t iters = 50;
  double step = 1.0;
  double tol = 1e-8;
  std::string target_kind = "value_pathway";
};

struct TrainSection {
  std::string task = "copy";
  double lr = 0.1;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  std::size_t batch = 8;
  std::size_t copy_shift = 0;
  std::size_t eval_samples = 64;
};

struct BenchSection {
  std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048, 4096};
  std::string policy = "both";
  std::string metric = "score_entries";
  std::size_t depth = 4;
  std::size_t ratio = 2;
  bool timing = false;
};

struct OutputSection {
  std::string directory = "out";
  std::vector<std::string> formats{"pgm"};
};

struct RunConfig {
  ModelSection model;
  SolverSection solver;
  TrainSection train;
  BenchSection bench;
  OutputSection output;

  /// Checks enumerations and ranges; throws ConfigError.
  void validate() const {
    if (model.heads != 1) throw ConfigError("model.heads must be 1 (single head per scale)");
    (void)parse_downsample_kind(model.downsample_kind);
    if (solver.method != "all") (void)parse_agg_method(solver.method);
    (void)parse_target_kind(solver.target_kind);
    (void)parse_task_kind(train.task);
    if (bench.policy != "both") (void)parse_scale_policy(bench.policy);
    (void)parse_count_mode(bench.metric);
    for (const auto& f : output.formats) (void)parse_heatmap_format(f);
    if (model.dilation < 1) throw ConfigError("model.dilation must be >= 1");
    solver_config().validate();
  }

  SolverConfig solver_config() const {
    SolverConfig s;
    s.lambda = solver.lambda;
    s.max_iters = solver.iters;
    s.step = solver.step;
    s.tol = solver.tol;
    s.target = parse_target_kind(solver.target_kind);
    return s;
  }

  std::vector<AggMethod> methods() const {
    if (solver.method == "all") return {AggMethod::co, AggMethod::ne, AggMethod::mean};
    return {parse_agg_method(solver.method)};
  }

  ToyModelConfig toy_config() const {
    ToyModelConfig c;
    c.layers = model.layers;
    c.d = model.d;
    c.d_k = model.d_k;
    c.vocab = model.vocab;
    c.ffn_hidden = model.ffn_hidden;
    c.n = model.n;
    c.ratio = model.ratio;
    c.depth = model.depth;
    c.downsample = parse_downsample_kind(model.downsample_kind);
    c.include_base_scale = model.include_base_scale;
    c.hybrid.gating = model.gating;
    c.hybrid.local_conv = model.local_conv;
    c.hybrid.dilation = model.dilation;
    c.method = methods().front();
    c.solver = solver_config();
    c.task = parse_task_kind(train.task);
    c.copy_shift = train.copy_shift;
    c.lr = train.lr;
    c.steps = train.steps;
    c.batch = train.batch;
    c.eval_samples = train.eval_samples;
    c.seed = train.seed;
    return c;
  }

  BenchConfig bench_config() const {
    BenchConfig b;
    b.lengths = bench.lengths;
    b.ratio = bench.ratio;
    b.depth = bench.depth;
    if (bench.policy == "both") {
      b.policies = {ScalePolicy::proportional, ScalePolicy::absolute};
    } else {
      b.policies = {parse_scale_policy(bench.policy)};
    }
    b.metrics = {CountMode::score_entries};
    if (parse_count_mode(bench.metric) == CountMode::full_macs) b.metrics.push_back(CountMode::full_macs);
    b.cost.d = model.d;
    b.cost.d_k = model.d_k;
    b.cost.d_v = model.d;
    b.cost.downsample = parse_downsample_kind(model.downsample_kind);
    b.cost.solver_iters = solver.iters;
    b.cost.include_base_scale = model.include_base_scale;
    return b;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_key(const nlohmann::json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j, {"model", "solver", "train", "bench", "output"}, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, {"n", "d", "d_k", "L", "r", "downsample_kind", "heads", "include_base_scale", "gating",
                               "local_conv", "dilation", "layers", "vocab", "ffn_hidden"},
                           "model");
    detail::read_key(m, "n", c.model.n, "model");
    detail::read_key(m, "d", c.model.d, "model");
    detail::read_key(m, "d_k", c.model.d_k, "model");
    detail::read_key(m, "L", c.model.depth, "model");
    detail::read_key(m, "r", c.model.ratio, "model");
    detail::read_key(m, "downsample_kind", c.model.downsample_kind, "model");
    detail::read_key(m, "heads", c.model.heads, "model");
    detail::read_key(m, "include_base_scale", c.model.include_base_scale, "model");
    detail::read_key(m, "gating", c.model.gating, "model");
    detail::read_key(m, "local_conv", c.model.local_conv, "model");
    detail::read_key(m, "dilation", c.model.dilation, "model");
    detail::read_key(m, "layers", c.model.layers, "model");
    detail::read_key(m, "vocab", c.model.vocab, "model");
    detail::read_key(m, "ffn_hidden", c.model.ffn_hidden, "model");
  }
  if (j.contains("solver")) {
    const auto& s = j["solver"];
    detail::reject_unknown(s, {"method", "lambda", "iters", "step", "tol", "target_kind"}, "solver");
    detail::read_key(s, "method", c.solver.method, "solver");
    detail::read_key(s, "lambda", c.solver.lambda, "solver");
    detail::read_key(s, "iters", c.solver.iters, "solver");
    detail::read_key(s, "step", c.solver.step, "solver");
    detail::read_key(s, "tol", c.solver.tol, "solver");
    detail::read_key(s, "target_kind", c.solver.target_kind, "solver");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, {"task", "lr", "steps", "seed", "batch", "copy_shift", "eval_samples"}, "train");
    detail::read_key(t, "task", c.train.task, "train");
    detail::read_key(t, "lr", c.train.lr, "train");
    detail::read_key(t, "steps", c.train.steps, "train");
    detail::read_key(t, "seed", c.train.seed, "train");
    detail::read_key(t, "batch", c.train.batch, "train");
    detail::read_key(t, "copy_shift", c.train.copy_shift, "train");
    detail::read_key(t, "eval_samples", c.train.eval_samples, "train");
  }
  if (j.contains("bench")) {
    const auto& b = j["bench"];
    detail::reject_unknown(b, {"lengths", "policy", "metric", "L", "r", "timing"}, "bench");
    detail::read_key(b, "lengths", c.bench.lengths, "bench");
    detail::read_key(b, "policy", c.bench.policy, "bench");
    detail::read_key(b, "metric", c.bench.metric, "bench");
    detail::read_key(b, "L", c.bench.depth, "bench");
    detail::read_key(b, "r", c.bench.ratio, "bench");
    detail::read_key(b, "timing", c.bench.timing, "bench");
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    detail::reject_unknown(o, {"directory", "formats"}, "output");
    detail::read_key(o, "directory", c.output.directory, "output");
    detail::read_key(o, "formats", c.output.formats, "output");
  }
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = {{"n", c.model.n},
                {"d", c.model.d},
                {"d_k", c.model.d_k},
                {"L", c.model.depth},
                {"r", c.model.ratio},
                {"downsample_kind", c.model.downsample_kind},
                {"heads", c.model.heads},
                {"include_base_scale", c.model.include_base_scale},
                {"gating", c.model.gating},
                {"local_conv", c.model.local_conv},
                {"dilation", c.model.dilation},
                {"layers", c.model.layers},
                {"vocab", c.model.vocab},
                {"ffn_hidden", c.model.ffn_hidden}};
  j["solver"] = {{"method", c.solver.method},     {"lambda", c.solver.lambda}, {"iters", c.solver.iters},
                 {"step", c.solver.step},         {"tol", c.solver.tol},       {"target_kind", c.solver.target_kind}};
  j["train"] = {{"task", c.train.task},   {"lr", c.train.lr},         {"steps", c.train.steps},
                {"seed", c.train.seed},   {"batch", c.train.batch},   {"copy_shift", c.train.copy_shift},
                {"eval_samples", c.train.eval_samples}};
  j["bench"] = {{"lengths", c.bench.lengths}, {"policy", c.bench.policy}, {"metric", c.bench.metric},
                {"L", c.bench.depth},         {"r", c.bench.ratio},       {"timing", c.bench.timing}};
  j["output"] = {{"directory", c.output.directory}, {"formats", c.output.formats}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace maha
