#pragma once

// The full attention sublayer: gated pyramid, dilated local-context block per
// scale, per-scale attention with shared values, weight solve, aggregation
// and the residual connection y = x + O*.
//
// Wiring, per level l = 1..L:
//   P_l   = D_l(X_{l-1})                        provisional coarse view
//   H     = up(sigmoid(P_l W_g), n_{l-1}) * X_{l-1}
//   X_l   = D_l(H)                              gated input is what gets downsampled
// and per attention scale:
//   X'_l  = X_l + ReLU(DilatedConv(X_l) + b_l)
//   A_l   = softmax(X'_l W_l^Q (X'_l W_l^K)^T / sqrt(d_k)),  O_l = A_l V_l
// Gating and the local block can each be switched off.

#include <chrono>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "maha/aggregate.hpp"
#include "maha/attention.hpp"
#include "maha/errors.hpp"
#include "maha/pyramid.hpp"
#include "maha/tensor.hpp"

namespace maha {

struct HybridOptions {
  bool gating = true;
  bool local_conv = true;
  std::size_t dilation = 2;
  std::size_t local_kernel_size = 3;
};

struct HybridParams {
  DownsampleParams down;
  std::vector<ConvKernel> local_kernels;       // one per attention scale
  std::vector<std::vector<double>> local_bias;  // one per attention scale
  Matrix gate;                                 // W_g (d x d), shared by all levels
  ScaleAttnParams attn;
  SolverConfig solver;

  static HybridParams random(std::size_t d, std::size_t d_k, const ScaleSchedule& schedule,
                             DownsampleKind kind, Rng& rng, const HybridOptions& opts = {}) {
    HybridParams p;
    p.down = DownsampleParams::make(kind, d, schedule.depth, rng);
    const std::size_t scales = schedule.attention_scale_count();
    for (std::size_t s = 0; s < scales; ++s) {
      p.local_kernels.push_back(init_kernel(opts.local_kernel_size, d, d, rng));
      p.local_bias.emplace_back(d, 0.0);
    }
    p.gate = init_uniform(d, d, d, rng);
    p.attn = ScaleAttnParams::random(d, d_k, scales, rng);
    return p;
  }

  /// Same structure as `like`, every entry zero. Used for gradients.
  static HybridParams zeros_like(const HybridParams& like) {
    HybridParams p = like;
    p.visit([](const std::string&, std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); });
    return p;
  }

  /// Calls f(name, values) for every trainable tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    for (std::size_t l = 0; l < down.kernels.size(); ++l)
      f("downsample_kernel_" + std::to_string(l + 1), std::span<double>(down.kernels[l].weights));
    for (std::size_t s = 0; s < local_kernels.size(); ++s) {
      f("local_kernel_" + std::to_string(s), std::span<double>(local_kernels[s].weights));
      f("local_bias_" + std::to_string(s), std::span<double>(local_bias[s]));
    }
    f(std::string("gate"), gate.values());
    for (std::size_t s = 0; s < attn.query.size(); ++s) {
      f("query_" + std::to_string(s), attn.query[s].values());
      f("key_" + std::to_string(s), attn.key[s].values());
    }
    f(std::string("value"), attn.value.values());
  }
};

struct LayerOutput {
  Matrix y;
  AggWeights weights;
  ScaleOutputs scales;
  double solver_seconds = 0.0;  // time spent in the weight solve
};

/// Intermediates kept by the forward pass for maha_layer_backward.
struct LayerCache {
  Matrix x;
  std::vector<Matrix> levels;       // X_0..X_L
  std::vector<Matrix> provisional;  // P_l, index l-1
  std::vector<Matrix> gate_act;     // sigmoid(P_l W_g)
  std::vector<Matrix> gate_up;      // gate upsampled to n_{l-1}
  std::vector<Matrix> gated;        // H_{l-1}
  SharedValues values;
  std::vector<Matrix> conv_pre;  // per scale
  std::vector<Matrix> local;     // X'_l per scale
  std::vector<Matrix> q;
  std::vector<Matrix> k;
  Matrix target;
  CoSolution co;
  AggMethod method = AggMethod::co;
};

namespace detail {

inline void check_hybrid(const Matrix& x, const HybridParams& p, const ScaleSchedule& schedule,
                         const HybridOptions& opts) {
  if (x.rows() != schedule.n) {
    throw ShapeError("maha_layer: input has " + std::to_string(x.rows()) + " rows, schedule n=" +
                     std::to_string(schedule.n));
  }
  const std::size_t d = x.cols();
  const std::size_t scales = schedule.attention_scale_count();
  if (p.attn.model_dim() != d || p.attn.value_dim() != d) {
    throw ShapeError("maha_layer: value projection " + p.attn.value.shape() + " must be (d x d) with d=" +
                     std::to_string(d));
  }
  if (p.attn.scales() != scales) {
    throw ShapeError("maha_layer: " + std::to_string(p.attn.scales()) + " attention parameter sets for " +
                     std::to_string(scales) + " scales");
  }
  if (opts.gating && (p.gate.rows() != d || p.gate.cols() != d)) {
    throw ShapeError("maha_layer: gate matrix " + p.gate.shape() + " must be (d x d)");
  }
  if (opts.local_conv && (p.local_kernels.size() != scales || p.local_bias.size() != scales)) {
    throw ShapeError("maha_layer: need one local kernel and bias per attention scale");
  }
}

inline Matrix checked(Matrix m, const std::string& stage) {
  ensure_finite(m, stage);
  return m;
}

}  // namespace detail

inline LayerOutput maha_layer_forward(const Matrix& x, const HybridParams& p, const ScaleSchedule& schedule,
                                      AggMethod method, const HybridOptions& opts, LayerCache* cache) {
  detail::check_hybrid(x, p, schedule, opts);
  LayerCache local_cache;
  LayerCache& c = cache ? *cache : local_cache;
  c = LayerCache{};
  c.x = x;
  c.method = method;
  c.levels.push_back(x);

  for (std::size_t l = 1; l <= schedule.depth; ++l) {
    const Matrix& prev = c.levels[l - 1];
    const std::string stage = "pyramid level " + std::to_string(l);
    if (opts.gating) {
      c.provisional.push_back(detail::checked(downsample(prev, l, p.down, schedule), stage));
      c.gate_act.push_back(sigmoid(matmul(c.provisional.back(), p.gate)));
      c.gate_up.push_back(nn_upsample(c.gate_act.back(), prev.rows()));
      c.gated.push_back(hadamard(c.gate_up.back(), prev));
      c.levels.push_back(detail::checked(downsample(c.gated.back(), l, p.down, schedule), stage));
    } else {
      c.levels.push_back(detail::checked(downsample(prev, l, p.down, schedule), stage));
    }
  }
  c.values = shared_values(x, p.attn.value, p.down, schedule);
  for (const auto& v : c.values.levels) ensure_finite(v, "shared values");

  LayerOutput out;
  out.scales.levels = schedule.attention_levels();
  out.scales.value_base = c.values.base;
  const std::size_t dk = p.attn.key_dim();
  for (std::size_t s = 0; s < out.scales.levels.size(); ++s) {
    const std::size_t level = out.scales.levels[s];
    const Matrix& xl = c.levels[level];
    const std::string stage = "attention scale " + std::to_string(s);
    if (opts.local_conv) {
      c.conv_pre.push_back(add_row_bias(conv1d(xl, p.local_kernels[s], 1, opts.dilation), p.local_bias[s]));
      c.local.push_back(detail::checked(xl + relu(c.conv_pre.back()), "local conv block " + std::to_string(s)));
    } else {
      c.local.push_back(xl);
    }
    c.q.push_back(matmul(c.local.back(), p.attn.query[s]));
    c.k.push_back(matmul(c.local.back(), p.attn.key[s]));
    Matrix a = detail::checked(scaled_dot_attention(c.q.back(), c.k.back(), dk), stage);
    Matrix o = matmul(a, c.values.level(level));
    out.scales.upsampled.push_back(nn_upsample(o, schedule.n));
    out.scales.attention.push_back(std::move(a));
    out.scales.outputs.push_back(std::move(o));
  }

  const auto& cands = out.scales.upsampled;
  c.target = build_target(x, c.values.base, cands, p.solver.target);
  const auto solve_start = std::chrono::steady_clock::now();
  switch (method) {
    case AggMethod::co:
      c.co = co_solve_traced(cands, c.target, p.solver);
      out.weights = c.co.weights;
      break;
    case AggMethod::ne:
      out.weights = ne_solve(cands, c.target, p.solver);
      break;
    case AggMethod::mean:
      out.weights = mean_weights(cands, c.target, p.solver);
      break;
  }
  out.solver_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - solve_start).count();
  out.y = detail::checked(x + aggregate_outputs(cands, out.weights), "aggregation");
  return out;
}

inline LayerOutput maha_layer(const Matrix& x, const HybridParams& p, const ScaleSchedule& schedule,
                              AggMethod method, const HybridOptions& opts = {}) {
  return maha_layer_forward(x, p, schedule, method, opts, nullptr);
}

struct LayerGrad {
  Matrix dx;
  HybridParams dparams;
  double solver_seconds = 0.0;  // time spent differentiating the weight solve
};

inline LayerGrad maha_layer_backward(const LayerCache& c, const LayerOutput& out, const HybridParams& p,
                                     const ScaleSchedule& schedule, const HybridOptions& opts,
                                     const Matrix& dy) {
  LayerGrad g{dy, HybridParams::zeros_like(p)};
  auto& dp = g.dparams;
  const auto& cands = out.scales.upsampled;
  const std::size_t scales = cands.size();

  std::vector<Matrix> dcands;
  std::vector<double> dw(scales);
  for (std::size_t s = 0; s < scales; ++s) {
    dcands.push_back(dy * out.weights.w[s]);
    dw[s] = frobenius_dot(dy, cands[s]);
  }
  Matrix dtarget = zeros_like(c.target);
  if (c.method != AggMethod::mean) {
    const auto solve_start = std::chrono::steady_clock::now();
    auto sg = c.method == AggMethod::co ? co_backward(cands, c.target, c.co, dw, p.solver)
                                        : ne_backward(cands, c.target, out.weights, dw);
    for (std::size_t s = 0; s < scales; ++s) dcands[s] += sg.dcands[s];
    dtarget = std::move(sg.dtarget);
    g.solver_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - solve_start).count();
  }

  std::vector<Matrix> dvals;
  std::vector<Matrix> dlevels;
  for (std::size_t l = 0; l <= schedule.depth; ++l) {
    dvals.push_back(zeros_like(c.values.level(l)));
    dlevels.push_back(zeros_like(c.levels[l]));
  }
  if (p.solver.target == TargetKind::value_pathway) dvals[0] += dtarget;

  for (std::size_t s = 0; s < scales; ++s) {
    const std::size_t level = out.scales.levels[s];
    const Matrix& a = out.scales.attention[s];
    const Matrix& v = c.values.level(level);
    const Matrix d_o = nn_upsample_backward(dcands[s], schedule.length(level));
    dvals[level] += matmul_tn(a, d_o);
    const auto ag = scaled_dot_attention_backward(c.q[s], c.k[s], a, matmul_nt(d_o, v));
    dp.attn.query[s] = matmul_tn(c.local[s], ag.dq);
    dp.attn.key[s] = matmul_tn(c.local[s], ag.dk);
    const Matrix dlocal = matmul_nt(ag.dq, p.attn.query[s]) + matmul_nt(ag.dk, p.attn.key[s]);
    dlevels[level] += dlocal;
    if (opts.local_conv) {
      const Matrix dpre = relu_backward(c.conv_pre[s], dlocal);
      auto cg = conv1d_backward(c.levels[level], p.local_kernels[s], 1, opts.dilation, dpre);
      dlevels[level] += cg.dx;
      dp.local_kernels[s] = std::move(cg.dkernel);
      dp.local_bias[s] = column_sums(dpre);
    }
  }

  auto add_kernel_grad = [&](std::size_t l, const ConvKernel& k) {
    if (p.down.kind != DownsampleKind::strided_conv) return;
    auto& dst = dp.down.kernels[l - 1].weights;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += k.weights[i];
  };

  for (std::size_t l = schedule.depth; l >= 1; --l) {
    auto vg = downsample_backward(c.values.level(l - 1), l, p.down, schedule, dvals[l]);
    dvals[l - 1] += vg.dx;
    add_kernel_grad(l, vg.dkernel);
  }
  dp.attn.value = matmul_tn(c.x, dvals[0]);
  g.dx += matmul_nt(dvals[0], p.attn.value);

  for (std::size_t l = schedule.depth; l >= 1; --l) {
    const Matrix& prev = c.levels[l - 1];
    if (opts.gating) {
      auto hg = downsample_backward(c.gated[l - 1], l, p.down, schedule, dlevels[l]);
      add_kernel_grad(l, hg.dkernel);
      dlevels[l - 1] += hadamard(hg.dx, c.gate_up[l - 1]);
      const Matrix dup = hadamard(hg.dx, prev);
      const Matrix dz = sigmoid_backward(c.gate_act[l - 1], nn_upsample_backward(dup, schedule.length(l)));
      dp.gate += matmul_tn(c.provisional[l - 1], dz);
      auto pg = downsample_backward(prev, l, p.down, schedule, matmul_nt(dz, p.gate));
      dlevels[l - 1] += pg.dx;
      add_kernel_grad(l, pg.dkernel);
    } else {
      auto xg = downsample_backward(prev, l, p.down, schedule, dlevels[l]);
      dlevels[l - 1] += xg.dx;
      add_kernel_grad(l, xg.dkernel);
    }
  }
  g.dx += dlevels[0];
  return g;
}

}  // namespace maha
