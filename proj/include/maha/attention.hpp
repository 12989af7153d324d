#pragma once

// Per-scale scaled dot-product attention. Query and key projections are
// scale-specific; a single value projection is applied once at full
// resolution and the result is downsampled to every scale.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "maha/aggregate.hpp"
#include "maha/errors.hpp"
#include "maha/pyramid.hpp"
#include "maha/tensor.hpp"

namespace maha {

struct ScaleAttnParams {
  std::vector<Matrix> query;  // one (d x d_k) per attention scale
  std::vector<Matrix> key;    // one (d x d_k) per attention scale
  Matrix value;               // shared (d x d_v)

  std::size_t scales() const { return query.size(); }
  std::size_t model_dim() const { return value.rows(); }
  std::size_t key_dim() const { return query.empty() ? 0 : query.front().cols(); }
  std::size_t value_dim() const { return value.cols(); }

  /// L * 2 * d * d_k + d * d_v.
  std::size_t parameter_count() const {
    std::size_t total = value.size();
    for (const auto& q : query) total += q.size();
    for (const auto& k : key) total += k.size();
    return total;
  }

  static ScaleAttnParams random(std::size_t d, std::size_t d_k, std::size_t scales, Rng& rng) {
    ScaleAttnParams p;
    for (std::size_t s = 0; s < scales; ++s) {
      p.query.push_back(init_uniform(d, d_k, d, rng));
      p.key.push_back(init_uniform(d, d_k, d, rng));
    }
    p.value = init_uniform(d, d, d, rng);
    return p;
  }

  static ScaleAttnParams zeros(std::size_t d, std::size_t d_k, std::size_t scales) {
    ScaleAttnParams p;
    for (std::size_t s = 0; s < scales; ++s) {
      p.query.emplace_back(d, d_k);
      p.key.emplace_back(d, d_k);
    }
    p.value = Matrix(d, d);
    return p;
  }
};

/// softmax(q k^T / sqrt(d_k)) for self-attention within one scale.
inline Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, std::size_t d_k) {
  if (q.cols() != d_k || k.cols() != d_k || q.rows() != k.rows()) {
    throw ShapeError("scaled_dot_attention: q " + q.shape() + ", k " + k.shape() + ", d_k=" +
                     std::to_string(d_k));
  }
  Matrix logits = matmul_nt(q, k);
  logits *= 1.0 / std::sqrt(static_cast<double>(d_k));
  return softmax_rows(logits);
}

struct AttentionGrad {
  Matrix dq;
  Matrix dk;
};

/// a is the forward result; da the upstream gradient w.r.t. a.
inline AttentionGrad scaled_dot_attention_backward(const Matrix& q, const Matrix& k, const Matrix& a,
                                                   const Matrix& da) {
  Matrix dlogits = softmax_rows_backward(a, da);
  dlogits *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return {matmul(dlogits, k), matmul_tn(dlogits, q)};
}

/// V_base = X W^V and its downsampled copies V_l = D_l(V_{l-1}).
struct SharedValues {
  Matrix base;
  std::vector<Matrix> levels;  // V_1..V_L

  const Matrix& level(std::size_t l) const { return l == 0 ? base : levels.at(l - 1); }
};

inline SharedValues shared_values(const Matrix& x0, const Matrix& wv, const DownsampleParams& params,
                                  const ScaleSchedule& schedule) {
  if (x0.rows() != schedule.n) {
    throw ShapeError("shared_values: input has " + std::to_string(x0.rows()) + " rows, schedule n=" +
                     std::to_string(schedule.n));
  }
  SharedValues v{matmul(x0, wv), {}};
  for (std::size_t l = 1; l <= schedule.depth; ++l) {
    v.levels.push_back(downsample(v.level(l - 1), l, params, schedule));
  }
  return v;
}

/// Everything produced per attention scale, finest scale first.
struct ScaleOutputs {
  std::vector<std::size_t> levels;  // pyramid level of each scale
  std::vector<Matrix> attention;    // A_l (n_l x n_l)
  std::vector<Matrix> outputs;      // O_l (n_l x d_v)
  std::vector<Matrix> upsampled;    // U_l(O_l) (n x d_v)
  Matrix value_base;                // V_base
};

inline ScaleOutputs maha_attention(const ScalePyramid& pyramid, const ScaleAttnParams& params,
                                   const DownsampleParams& down) {
  const auto& sched = pyramid.schedule;
  const auto levels = sched.attention_levels();
  if (params.scales() != levels.size() || params.key.size() != levels.size()) {
    throw ShapeError("maha_attention: " + std::to_string(params.scales()) +
                     " query/key pairs for " + std::to_string(levels.size()) + " attention scales");
  }
  if (params.model_dim() != pyramid.base.cols()) {
    throw ShapeError("maha_attention: value projection expects d=" + std::to_string(params.model_dim()) +
                     ", input has d=" + std::to_string(pyramid.base.cols()));
  }
  const auto values = shared_values(pyramid.base, params.value, down, sched);
  ScaleOutputs out;
  out.levels = levels;
  out.value_base = values.base;
  const std::size_t dk = params.key_dim();
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const Matrix& xl = pyramid.level(levels[s]);
    const Matrix a = scaled_dot_attention(matmul(xl, params.query[s]), matmul(xl, params.key[s]), dk);
    Matrix o = matmul(a, values.level(levels[s]));
    out.upsampled.push_back(nn_upsample(o, sched.n));
    out.attention.push_back(a);
    out.outputs.push_back(std::move(o));
  }
  return out;
}

}  // namespace maha
