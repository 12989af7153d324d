#pragma once

// A small transformer stack built around maha_layer, synthetic tasks and a
// plain-SGD training loop, plus the aggregation and depth ablations.
//
// Per block:  a = maha_layer(h);  h' = a + W2 ReLU(W1 LN(a) + b1) + b2
// Head:       logits = LN_f(h) W_out + b_out, per token (copy) or on the
//             token-mean (pattern_classify).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maha/aggregate.hpp"
#include "maha/errors.hpp"
#include "maha/hybrid.hpp"
#include "maha/pyramid.hpp"
#include "maha/tensor.hpp"

namespace maha {

enum class TaskKind { copy, pattern_classify };

inline std::string to_string(TaskKind k) { return k == TaskKind::copy ? "copy" : "pattern_classify"; }

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "pattern_classify") return TaskKind::pattern_classify;
  throw ConfigError("unknown task '" + s + "' (expected copy or pattern_classify)");
}

struct Sample {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> targets;  // copy
  std::size_t label = 0;             // pattern_classify
};

// Reserved tokens for pattern_classify.
inline constexpr std::size_t kLocalFirst = 1;
inline constexpr std::size_t kLocalSecond = 2;
inline constexpr std::size_t kGlobalMarker = 3;
inline constexpr std::size_t kFirstBackground = 4;

/// Deterministic stream of training samples.
///
/// copy: tokens uniform over 1..vocab-1; target i is token i - shift (0 for
/// the first `shift` positions).
/// pattern_classify: label 1 iff the sequence holds both the adjacent pair
/// (1, 2) somewhere (local pattern) and the marker 3 in each half (global
/// pattern). Negatives carry neither, only one, or a single marker.
class TaskGenerator {
 public:
  TaskGenerator(TaskKind kind, std::size_t n, std::size_t vocab, std::uint64_t seed, std::size_t shift = 0,
                bool constant = false)
      : kind_(kind), n_(n), vocab_(vocab), shift_(shift), constant_(constant), rng_(seed) {
    if (n < 4) throw ConfigError("task sequences need at least 4 tokens");
    if (kind == TaskKind::pattern_classify && vocab <= kFirstBackground + 1) {
      throw ConfigError("pattern_classify needs a vocabulary of at least 6 tokens");
    }
    if (kind == TaskKind::copy && vocab < 2) throw ConfigError("copy needs a vocabulary of at least 2 tokens");
    if (shift >= n) throw ConfigError("copy shift must be smaller than the sequence length");
  }

  TaskKind kind() const { return kind_; }
  std::size_t length() const { return n_; }
  std::size_t vocab() const { return vocab_; }
  std::size_t classes() const { return kind_ == TaskKind::copy ? vocab_ : 2; }

  Sample next() { return kind_ == TaskKind::copy ? next_copy() : next_pattern(); }

  std::vector<Sample> batch(std::size_t size) {
    std::vector<Sample> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) out.push_back(next());
    return out;
  }

 private:
  Sample next_copy() {
    Sample s;
    s.tokens.resize(n_);
    const std::size_t fixed = 1 + rng_.index(vocab_ - 1);
    for (auto& t : s.tokens) t = constant_ ? fixed : 1 + rng_.index(vocab_ - 1);
    s.targets.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) s.targets[i] = i >= shift_ ? s.tokens[i - shift_] : 0;
    return s;
  }

  Sample next_pattern() {
    Sample s;
    s.tokens.resize(n_);
    for (auto& t : s.tokens) t = kFirstBackground + rng_.index(vocab_ - kFirstBackground);
    s.label = rng_.bernoulli(0.5) ? 1 : 0;
    bool local = true;
    bool global = true;
    bool single_marker = false;
    if (s.label == 0) {
      switch (rng_.index(4)) {
        case 0: local = global = false; break;
        case 1: global = false; break;
        case 2: local = false; break;
        default: global = false; single_marker = true; break;
      }
    }
    const std::size_t half = n_ / 2;
    std::vector<bool> used(n_, false);
    if (local) {
      const std::size_t p = rng_.index(n_ - 1);
      s.tokens[p] = kLocalFirst;
      s.tokens[p + 1] = kLocalSecond;
      used[p] = used[p + 1] = true;
    }
    auto plant_marker = [&](std::size_t lo, std::size_t hi) {
      for (int tries = 0; tries < 64; ++tries) {
        const std::size_t p = lo + rng_.index(hi - lo);
        if (!used[p]) {
          s.tokens[p] = kGlobalMarker;
          used[p] = true;
          return;
        }
      }
    };
    if (global) {
      plant_marker(0, half);
      plant_marker(half, n_);
    } else if (single_marker) {
      if (rng_.bernoulli(0.5)) {
        plant_marker(0, half);
      } else {
        plant_marker(half, n_);
      }
    }
    return s;
  }

  TaskKind kind_;
  std::size_t n_;
  std::size_t vocab_;
  std::size_t shift_;
  bool constant_;
  Rng rng_;
};

struct ToyModelConfig {
  std::size_t layers = 2;
  std::size_t d = 32;
  std::size_t d_k = 8;
  std::size_t vocab = 16;
  std::size_t ffn_hidden = 64;
  std::size_t n = 32;
  std::size_t ratio = 2;
  std::size_t depth = 2;
  DownsampleKind downsample = DownsampleKind::strided_conv;
  bool include_base_scale = false;
  HybridOptions hybrid;
  AggMethod method = AggMethod::co;
  SolverConfig solver;
  TaskKind task = TaskKind::copy;
  std::size_t copy_shift = 0;
  bool constant_sequences = false;  // copy task with one repeated token per sample
  double lr = 0.1;
  std::size_t steps = 500;
  std::size_t batch = 8;
  std::size_t eval_samples = 64;
  std::uint64_t seed = 0;

  ScaleSchedule schedule() const { return make_schedule(n, ratio, depth, include_base_scale); }

  void validate() const {
    if (layers < 1 || d < 1 || d_k < 1 || vocab < 2 || ffn_hidden < 1 || batch < 1) {
      throw ConfigError("toy model dimensions must be positive");
    }
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    solver.validate();
    (void)schedule();
  }
};

struct ToyBlock {
  HybridParams attn;
  std::vector<double> ln_gain;
  std::vector<double> ln_bias;
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
};

struct ToyModel {
  Matrix embed;     // vocab x d
  Matrix position;  // n x d
  std::vector<ToyBlock> blocks;
  std::vector<double> final_gain;
  std::vector<double> final_bias;
  Matrix head;  // d x classes
  std::vector<double> head_bias;

  static ToyModel init(const ToyModelConfig& cfg, std::size_t classes) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto sched = cfg.schedule();
    ToyModel m;
    m.embed = random_matrix(cfg.vocab, cfg.d, rng, -1.0, 1.0);
    m.position = random_matrix(cfg.n, cfg.d, rng, -0.1, 0.1);
    for (std::size_t b = 0; b < cfg.layers; ++b) {
      ToyBlock blk;
      blk.attn = HybridParams::random(cfg.d, cfg.d_k, sched, cfg.downsample, rng, cfg.hybrid);
      blk.attn.solver = cfg.solver;
      blk.ln_gain.assign(cfg.d, 1.0);
      blk.ln_bias.assign(cfg.d, 0.0);
      blk.w1 = init_uniform(cfg.d, cfg.ffn_hidden, cfg.d, rng);
      blk.b1.assign(cfg.ffn_hidden, 0.0);
      blk.w2 = init_uniform(cfg.ffn_hidden, cfg.d, cfg.ffn_hidden, rng);
      blk.b2.assign(cfg.d, 0.0);
      m.blocks.push_back(std::move(blk));
    }
    m.final_gain.assign(cfg.d, 1.0);
    m.final_bias.assign(cfg.d, 0.0);
    m.head = init_uniform(cfg.d, classes, cfg.d, rng);
    m.head_bias.assign(classes, 0.0);
    return m;
  }

  static ToyModel zeros_like(const ToyModel& like) {
    ToyModel m = like;
    m.visit([](const std::string&, std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); });
    return m;
  }

  /// f(group name, values) for every trainable tensor, in a fixed order.
  template <class F>
  void visit(F&& f) {
    f(std::string("embed"), embed.values());
    f(std::string("position"), position.values());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& blk = blocks[b];
      const std::string pre = "block" + std::to_string(b) + ".";
      blk.attn.visit([&](const std::string& name, std::span<double> v) { f(pre + name, v); });
      f(pre + "ln_gain", std::span<double>(blk.ln_gain));
      f(pre + "ln_bias", std::span<double>(blk.ln_bias));
      f(pre + "ffn_w1", blk.w1.values());
      f(pre + "ffn_b1", std::span<double>(blk.b1));
      f(pre + "ffn_w2", blk.w2.values());
      f(pre + "ffn_b2", std::span<double>(blk.b2));
    }
    f(std::string("final_gain"), std::span<double>(final_gain));
    f(std::string("final_bias"), std::span<double>(final_bias));
    f(std::string("head"), head.values());
    f(std::string("head_bias"), std::span<double>(head_bias));
  }
};

// ---------------------------------------------------------------------------
// Layer norm

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                         LayerNormCache& cache, double eps = 1e-5) {
  cache.xhat = Matrix(x.rows(), x.cols());
  cache.inv_std.assign(x.rows(), 0.0);
  Matrix y(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    const double mu = std::accumulate(r.begin(), r.end(), 0.0) / d;
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    const double inv = 1.0 / std::sqrt(var / d + eps);
    cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double xh = (r[j] - mu) * inv;
      cache.xhat(i, j) = xh;
      y(i, j) = gain[j] * xh + bias[j];
    }
  }
  return y;
}

inline Matrix layer_norm_backward(const LayerNormCache& cache, std::span<const double> gain, const Matrix& dy,
                                  std::span<double> dgain, std::span<double> dbias) {
  Matrix dx(dy.rows(), dy.cols());
  const double d = static_cast<double>(dy.cols());
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t j = 0; j < dy.cols(); ++j) {
      const double g = dy(i, j) * gain[j];
      dgain[j] += dy(i, j) * cache.xhat(i, j);
      dbias[j] += dy(i, j);
      mean_g += g;
      mean_gx += g * cache.xhat(i, j);
    }
    mean_g /= d;
    mean_gx /= d;
    for (std::size_t j = 0; j < dy.cols(); ++j) {
      const double g = dy(i, j) * gain[j];
      dx(i, j) = cache.inv_std[i] * (g - mean_g - cache.xhat(i, j) * mean_gx);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Forward / backward for one sample

struct BlockCache {
  LayerCache attn;
  LayerOutput attn_out;
  LayerNormCache ln;
  Matrix normed;
  Matrix hidden_pre;
  Matrix hidden;
};

struct SampleResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<double>> weights;  // per block
  std::vector<std::vector<Matrix>> attention;  // per block, per scale (only when requested)
  double solver_seconds = 0.0;
};

namespace detail {

/// Softmax cross-entropy of one logit row; writes dL/dlogits scaled by `scale`.
inline double cross_entropy_row(std::span<const double> logits, std::size_t target, std::span<double> dlogits,
                                double scale, bool& correct) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double logz = mx + std::log(z);
  std::size_t arg = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    dlogits[c] = scale * std::exp(logits[c] - logz);
    if (logits[c] > logits[arg]) arg = c;
  }
  dlogits[target] -= scale;
  correct = arg == target;
  return logz - logits[target];
}

}  // namespace detail

/// Runs one sample forward and, when `grads` is given, accumulates the
/// gradient of its loss into it.
inline SampleResult run_sample(const ToyModel& model, const ToyModelConfig& cfg, const ScaleSchedule& sched,
                               const Sample& sample, ToyModel* grads, bool keep_attention = false) {
  const std::size_t n = cfg.n;
  if (sample.tokens.size() != n) throw ShapeError("sample length does not match the model");
  Matrix h = model.position;
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = model.embed.row(sample.tokens[i]);
    auto r = h.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += e[j];
  }

  SampleResult res;
  std::vector<BlockCache> caches(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];
    auto& c = caches[b];
    c.attn_out = maha_layer_forward(h, blk.attn, sched, cfg.method, cfg.hybrid, &c.attn);
    res.weights.push_back(c.attn_out.weights.w);
    if (keep_attention) res.attention.push_back(c.attn_out.scales.attention);
    res.solver_seconds += c.attn_out.solver_seconds;
    c.normed = layer_norm(c.attn_out.y, blk.ln_gain, blk.ln_bias, c.ln);
    c.hidden_pre = add_row_bias(matmul(c.normed, blk.w1), blk.b1);
    c.hidden = relu(c.hidden_pre);
    h = c.attn_out.y + add_row_bias(matmul(c.hidden, blk.w2), blk.b2);
  }
  LayerNormCache final_ln;
  const Matrix z = layer_norm(h, model.final_gain, model.final_bias, final_ln);

  Matrix dz(z.rows(), z.cols());
  Matrix dhead = grads ? zeros_like(model.head) : Matrix();
  std::vector<double> dhead_bias(model.head_bias.size(), 0.0);
  if (cfg.task == TaskKind::copy) {
    const Matrix logits = add_row_bias(matmul(z, model.head), model.head_bias);
    Matrix dlogits(logits.rows(), logits.cols());
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      bool ok = false;
      res.loss += scale * detail::cross_entropy_row(logits.row(i), sample.targets[i], dlogits.row(i), scale, ok);
      res.correct += ok ? 1 : 0;
    }
    res.total = n;
    if (grads) {
      dhead = matmul_tn(z, dlogits);
      dhead_bias = column_sums(dlogits);
      dz = matmul_nt(dlogits, model.head);
    }
  } else {
    Matrix pooled(1, z.cols());
    for (std::size_t i = 0; i < n; ++i) pooled += Matrix(1, z.cols(), std::vector<double>(z.row(i).begin(), z.row(i).end()));
    pooled *= 1.0 / static_cast<double>(n);
    const Matrix logits = add_row_bias(matmul(pooled, model.head), model.head_bias);
    Matrix dlogits(1, logits.cols());
    bool ok = false;
    res.loss = detail::cross_entropy_row(logits.row(0), sample.label, dlogits.row(0), 1.0, ok);
    res.correct = ok ? 1 : 0;
    res.total = 1;
    if (grads) {
      dhead = matmul_tn(pooled, dlogits);
      dhead_bias = column_sums(dlogits);
      const Matrix dpooled = matmul_nt(dlogits, model.head);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) dz(i, j) = dpooled(0, j) / static_cast<double>(n);
    }
  }
  if (!grads) return res;

  grads->head += dhead;
  for (std::size_t c = 0; c < dhead_bias.size(); ++c) grads->head_bias[c] += dhead_bias[c];
  Matrix dh = layer_norm_backward(final_ln, model.final_gain, dz, grads->final_gain, grads->final_bias);

  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    const auto& blk = model.blocks[b];
    auto& gblk = grads->blocks[b];
    auto& c = caches[b];
    // h = a + ffn(LN(a))
    auto db2 = column_sums(dh);
    for (std::size_t j = 0; j < db2.size(); ++j) gblk.b2[j] += db2[j];
    gblk.w2 += matmul_tn(c.hidden, dh);
    const Matrix dhidden = relu_backward(c.hidden_pre, matmul_nt(dh, blk.w2));
    auto db1 = column_sums(dhidden);
    for (std::size_t j = 0; j < db1.size(); ++j) gblk.b1[j] += db1[j];
    gblk.w1 += matmul_tn(c.normed, dhidden);
    const Matrix dnormed = matmul_nt(dhidden, blk.w1);
    Matrix da = dh + layer_norm_backward(c.ln, blk.ln_gain, dnormed, gblk.ln_gain, gblk.ln_bias);
    auto lg = maha_layer_backward(c.attn, c.attn_out, blk.attn, sched, cfg.hybrid, da);
    res.solver_seconds += lg.solver_seconds;
    std::vector<std::span<double>> dst;
    gblk.attn.visit([&](const std::string&, std::span<double> v) { dst.push_back(v); });
    std::size_t k = 0;
    lg.dparams.visit([&](const std::string&, std::span<double> v) {
      for (std::size_t i = 0; i < v.size(); ++i) dst[k][i] += v[i];
      ++k;
    });
    dh = std::move(lg.dx);
  }
  grads->position += dh;
  for (std::size_t i = 0; i < n; ++i) {
    auto e = grads->embed.row(sample.tokens[i]);
    const auto g = dh.row(i);
    for (std::size_t j = 0; j < e.size(); ++j) e[j] += g[j];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainTrace {
  std::vector<double> losses;
  /// weights[step][block] = batch-mean aggregation weights.
  std::vector<std::vector<std::vector<double>>> weights;
  double final_metric = 0.0;
  double seconds = 0.0;
  double solver_seconds = 0.0;  // weight solve, forward and backward
  std::vector<double> step_seconds;

  double seconds_per_step() const { return losses.empty() ? 0.0 : seconds / static_cast<double>(losses.size()); }
  double solver_seconds_per_step() const {
    return losses.empty() ? 0.0 : solver_seconds / static_cast<double>(losses.size());
  }
  /// Median wall-clock of one step; robust to scheduler hiccups.
  double median_step_seconds() const {
    if (step_seconds.empty()) return 0.0;
    auto s = step_seconds;
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(s.size() / 2), s.end());
    return s[s.size() / 2];
  }
};

/// Trailing moving average with the given window (shorter at the start).
inline std::vector<double> smoothed(std::span<const double> xs, std::size_t window) {
  std::vector<double> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sum += xs[i];
    if (i >= window) sum -= xs[i - window];
    out.push_back(sum / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

/// 1 - mean(last window) / mean(first window).
inline double smoothed_reduction(std::span<const double> losses, std::size_t window = 50) {
  if (losses.empty()) return 0.0;
  const std::size_t w = std::min(window, losses.size());
  const double first = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(w), 0.0);
  const double last = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(w), losses.end(), 0.0);
  return 1.0 - last / first;
}

inline TaskGenerator make_task(const ToyModelConfig& cfg, std::uint64_t seed_offset = 0) {
  return TaskGenerator(cfg.task, cfg.n, cfg.vocab, cfg.seed * 7919 + 17 + seed_offset, cfg.copy_shift,
                       cfg.constant_sequences);
}

/// Accuracy over fresh samples (token accuracy for copy, label accuracy for
/// pattern_classify).
inline double evaluate(const ToyModel& model, const ToyModelConfig& cfg, std::size_t samples) {
  auto task = make_task(cfg, 1000003);
  const auto sched = cfg.schedule();
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const auto& s : task.batch(samples)) {
    const auto r = run_sample(model, cfg, sched, s, nullptr);
    correct += r.correct;
    total += r.total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

/// Optional per-step hook: (step, model, gradient) after the gradient is
/// computed and before the update.
using StepHook = std::function<void(std::size_t, const ToyModel&, const ToyModel&)>;

/// Step-at-a-time training loop; train() drives one to completion, and
/// train_interleaved() alternates several so their step timings share the
/// same machine conditions.
class Trainer {
 public:
  explicit Trainer(const ToyModelConfig& cfg)
      : cfg_((cfg.validate(), cfg)), task_(make_task(cfg_)), sched_(cfg_.schedule()),
        model_(ToyModel::init(cfg_, task_.classes())) {}

  bool running() const { return step_ < cfg_.steps; }

  void step(const StepHook& hook = {}) {
    const auto step_start = std::chrono::steady_clock::now();
    ToyModel grads = ToyModel::zeros_like(model_);
    double loss = 0.0;
    std::vector<std::vector<double>> mean_w(cfg_.layers);
    for (const auto& s : task_.batch(cfg_.batch)) {
      const auto r = run_sample(model_, cfg_, sched_, s, &grads);
      loss += r.loss;
      trace_.solver_seconds += r.solver_seconds;
      for (std::size_t b = 0; b < cfg_.layers; ++b) {
        if (mean_w[b].empty()) mean_w[b].assign(r.weights[b].size(), 0.0);
        for (std::size_t i = 0; i < r.weights[b].size(); ++i) mean_w[b][i] += r.weights[b][i];
      }
    }
    const double inv = 1.0 / static_cast<double>(cfg_.batch);
    loss *= inv;
    for (auto& w : mean_w)
      for (double& v : w) v *= inv;
    if (!std::isfinite(loss) || loss > 1e6) {
      throw DivergenceError(step_, "training diverged at step " + std::to_string(step_) + " (loss " +
                                       std::to_string(loss) + ")");
    }
    trace_.losses.push_back(loss);
    trace_.weights.push_back(std::move(mean_w));
    if (hook) hook(step_, model_, grads);

    std::vector<std::span<double>> params;
    model_.visit([&](const std::string&, std::span<double> v) { params.push_back(v); });
    std::size_t k = 0;
    grads.visit([&](const std::string&, std::span<double> g) {
      auto p = params[k++];
      for (std::size_t i = 0; i < g.size(); ++i) p[i] -= cfg_.lr * inv * g[i];
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - step_start).count();
    trace_.step_seconds.push_back(secs);
    trace_.seconds += secs;
    ++step_;
  }

  /// Evaluates the final model and hands back the trace.
  TrainTrace finish(ToyModel* model_out = nullptr) {
    trace_.final_metric = evaluate(model_, cfg_, cfg_.eval_samples);
    if (model_out) *model_out = std::move(model_);
    return std::move(trace_);
  }

 private:
  ToyModelConfig cfg_;
  TaskGenerator task_;
  ScaleSchedule sched_;
  ToyModel model_;
  TrainTrace trace_;
  std::size_t step_ = 0;
};

inline TrainTrace train(const ToyModelConfig& cfg, ToyModel* model_out = nullptr, const StepHook& hook = {}) {
  Trainer t(cfg);
  while (t.running()) t.step(hook);
  return t.finish(model_out);
}

/// Trains one model per config, advancing them round-robin one step at a
/// time. Losses match separate train() calls; only the timing differs.
inline std::vector<TrainTrace> train_interleaved(const std::vector<ToyModelConfig>& cfgs) {
  std::vector<Trainer> trainers;
  for (const auto& c : cfgs) trainers.emplace_back(c);
  for (bool any = true; any;) {
    any = false;
    for (auto& t : trainers) {
      if (!t.running()) continue;
      t.step();
      any = true;
    }
  }
  std::vector<TrainTrace> out;
  for (auto& t : trainers) out.push_back(t.finish());
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string label;  // method name or depth
  std::size_t depth = 0;
  AggMethod method = AggMethod::co;
  TrainTrace trace;
  double final_loss = 0.0;  // smoothed (window 50) loss at the last step
  double metric = 0.0;
  double wallclock_rel = 1.0;
  double solver_rel = 1.0;  // weight-solve time relative to the reference row
};

inline double final_smoothed_loss(const TrainTrace& t) {
  const auto s = smoothed(t.losses, 50);
  return s.empty() ? 0.0 : s.back();
}

/// Trains the same configuration with co, ne and mean aggregation (same seed,
/// same initialisation). wallclock_rel is per-step time relative to co.
inline std::vector<AblationRow> ablate_aggregation(const ToyModelConfig& base,
                                                   std::vector<AggMethod> methods = {AggMethod::co, AggMethod::ne,
                                                                                     AggMethod::mean}) {
  std::vector<ToyModelConfig> cfgs;
  for (AggMethod m : methods) {
    cfgs.push_back(base);
    cfgs.back().method = m;
  }
  auto traces = train_interleaved(cfgs);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    AblationRow row;
    row.label = to_string(methods[i]);
    row.method = methods[i];
    row.depth = base.depth;
    row.trace = std::move(traces[i]);
    row.final_loss = final_smoothed_loss(row.trace);
    row.metric = row.trace.final_metric;
    rows.push_back(std::move(row));
  }
  const AblationRow* ref = &rows.front();
  for (const auto& r : rows)
    if (r.method == AggMethod::co) ref = &r;
  const double step_ref = ref->trace.median_step_seconds();
  const double solver_ref = ref->trace.solver_seconds_per_step();
  for (auto& r : rows) {
    r.wallclock_rel = step_ref > 0.0 ? r.trace.median_step_seconds() / step_ref : 1.0;
    r.solver_rel = solver_ref > 0.0 ? r.trace.solver_seconds_per_step() / solver_ref : 1.0;
  }
  return rows;
}

/// One model per pyramid depth; wallclock_rel is relative to the first depth.
inline std::vector<AblationRow> ablate_scales(const ToyModelConfig& base, const std::vector<std::size_t>& depths) {
  if (depths.empty()) throw ConfigError("ablate_scales: no depths given");
  for (std::size_t depth : depths) {
    const std::size_t max_depth = max_feasible_depth(base.n, base.ratio);
    if (depth < 1 || depth > max_depth) {
      throw ConfigError("depth " + std::to_string(depth) + " is infeasible for n=" + std::to_string(base.n) +
                        " at ratio " + std::to_string(base.ratio) + " (max " + std::to_string(max_depth) + ")");
    }
  }
  std::vector<AblationRow> rows;
  for (std::size_t depth : depths) {
    ToyModelConfig cfg = base;
    cfg.depth = depth;
    AblationRow row;
    row.label = std::to_string(depth);
    row.depth = depth;
    row.method = cfg.method;
    row.trace = train(cfg);
    row.final_loss = final_smoothed_loss(row.trace);
    row.metric = row.trace.final_metric;
    rows.push_back(std::move(row));
  }
  const double ref = rows.front().trace.seconds_per_step();
  const double solver_ref = rows.front().trace.solver_seconds_per_step();
  for (auto& r : rows) {
    r.wallclock_rel = ref > 0.0 ? r.trace.seconds_per_step() / ref : 1.0;
    r.solver_rel = solver_ref > 0.0 ? r.trace.solver_seconds_per_step() / solver_ref : 1.0;
  }
  return rows;
}

}  // namespace maha
