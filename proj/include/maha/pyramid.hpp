#pragma once

// Scale schedule and the downsampling pyramid X_l = D_l(X_{l-1}), X_0 = X.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "maha/errors.hpp"
#include "maha/tensor.hpp"

namespace maha {

enum class DownsampleKind { strided_conv, adaptive_pool };

inline std::string to_string(DownsampleKind k) {
  return k == DownsampleKind::strided_conv ? "strided_conv" : "adaptive_pool";
}

inline DownsampleKind parse_downsample_kind(const std::string& s) {
  if (s == "strided_conv") return DownsampleKind::strided_conv;
  if (s == "adaptive_pool") return DownsampleKind::adaptive_pool;
  throw ConfigError("unknown downsample kind '" + s + "' (expected strided_conv or adaptive_pool)");
}

/// Lengths n_1 > n_2 > ... > n_L of the pyramid levels below the input length n.
struct ScaleSchedule {
  std::size_t n = 0;
  std::size_t ratio = 2;
  std::size_t depth = 0;
  std::vector<std::size_t> lengths;
  /// Also attend at full resolution (level 0). Off by default: attention
  /// cost then stays geometric in the coarse levels only.
  bool include_base_scale = false;

  /// Length of level l, where level 0 is the input.
  std::size_t length(std::size_t level) const { return level == 0 ? n : lengths.at(level - 1); }

  /// Pyramid levels that carry an attention head, finest first.
  std::vector<std::size_t> attention_levels() const {
    std::vector<std::size_t> levels;
    if (include_base_scale) levels.push_back(0);
    for (std::size_t l = 1; l <= depth; ++l) levels.push_back(l);
    return levels;
  }

  std::size_t attention_scale_count() const { return depth + (include_base_scale ? 1 : 0); }
};

/// Deepest L with floor(n / r^L) >= 2, or 0 when none exists.
inline std::size_t max_feasible_depth(std::size_t n, std::size_t r) {
  if (r < 2) return 0;
  std::size_t depth = 0;
  for (std::size_t len = n / r; len >= 2; len /= r) ++depth;
  return depth;
}

inline ScaleSchedule make_schedule(std::size_t n, std::size_t r, std::size_t depth,
                                   bool include_base_scale = false) {
  if (r < 2) throw ConfigError("compression ratio must be an integer > 1, got " + std::to_string(r));
  if (depth < 1) throw ConfigError("pyramid depth must be at least 1");
  ScaleSchedule s{n, r, depth, {}, include_base_scale};
  std::size_t len = n;
  for (std::size_t l = 0; l < depth; ++l) {
    len /= r;
    s.lengths.push_back(len);
  }
  if (s.lengths.back() < 2) {
    throw ConfigError("sequence length " + std::to_string(n) + " is too short for " +
                      std::to_string(depth) + " levels at ratio " + std::to_string(r) +
                      " (coarsest level would have " + std::to_string(s.lengths.back()) +
                      " tokens); max feasible depth is " + std::to_string(max_feasible_depth(n, r)));
  }
  return s;
}

/// Schedule with explicit level lengths, e.g. fixed absolute scales that do
/// not follow n. Lengths may be given in any order; they are stored
/// finest-first.
inline ScaleSchedule schedule_from_lengths(std::size_t n, std::size_t r, std::vector<std::size_t> lengths,
                                           bool include_base_scale = false) {
  if (lengths.empty()) throw ConfigError("explicit schedule needs at least one length");
  std::sort(lengths.begin(), lengths.end(), std::greater<>());
  std::size_t prev = n;
  for (std::size_t len : lengths) {
    if (len < 2) throw ConfigError("scale length must be at least 2, got " + std::to_string(len));
    if (len >= prev) {
      throw ConfigError("scale lengths must be strictly decreasing and below n=" + std::to_string(n));
    }
    prev = len;
  }
  return ScaleSchedule{n, r, lengths.size(), std::move(lengths), include_base_scale};
}

/// Per-level kernels W_l^s for the strided-conv variant; empty for pooling.
struct DownsampleParams {
  DownsampleKind kind = DownsampleKind::adaptive_pool;
  std::size_t kernel_size = 3;
  std::vector<ConvKernel> kernels;

  static DownsampleParams pooling() { return {}; }

  static DownsampleParams strided(std::vector<ConvKernel> kernels) {
    const std::size_t k = kernels.empty() ? 3 : kernels.front().taps;
    return {DownsampleKind::strided_conv, k, std::move(kernels)};
  }

  static DownsampleParams random_conv(std::size_t d, std::size_t depth, Rng& rng, std::size_t k = 3) {
    std::vector<ConvKernel> kernels;
    for (std::size_t l = 0; l < depth; ++l) kernels.push_back(init_kernel(k, d, d, rng));
    return strided(std::move(kernels));
  }

  static DownsampleParams make(DownsampleKind kind, std::size_t d, std::size_t depth, Rng& rng) {
    return kind == DownsampleKind::strided_conv ? random_conv(d, depth, rng) : pooling();
  }
};

namespace detail {

inline void check_level(const Matrix& x, std::size_t level, const DownsampleParams& params,
                        const ScaleSchedule& schedule) {
  if (level < 1 || level > schedule.depth) {
    throw ShapeError("downsample level " + std::to_string(level) + " outside 1.." +
                     std::to_string(schedule.depth));
  }
  if (x.rows() != schedule.length(level - 1)) {
    throw ShapeError("downsample to level " + std::to_string(level) + ": input has " +
                     std::to_string(x.rows()) + " rows, schedule expects " +
                     std::to_string(schedule.length(level - 1)));
  }
  if (params.kind == DownsampleKind::strided_conv) {
    if (params.kernels.size() < level) {
      throw ShapeError("no strided-conv kernel for level " + std::to_string(level));
    }
    if (x.rows() / schedule.ratio != schedule.length(level)) {
      throw ShapeError("strided conv maps " + std::to_string(x.rows()) + " rows to " +
                       std::to_string(x.rows() / schedule.ratio) + ", schedule wants " +
                       std::to_string(schedule.length(level)));
    }
  }
}

}  // namespace detail

inline Matrix downsample(const Matrix& x, std::size_t level, const DownsampleParams& params,
                         const ScaleSchedule& schedule) {
  detail::check_level(x, level, params, schedule);
  if (params.kind == DownsampleKind::adaptive_pool) {
    return adaptive_max_pool(x, schedule.length(level));
  }
  return conv1d(x, params.kernels[level - 1], schedule.ratio, 1);
}

struct DownsampleGrad {
  Matrix dx;
  ConvKernel dkernel;  // empty for pooling
};

inline DownsampleGrad downsample_backward(const Matrix& x, std::size_t level,
                                          const DownsampleParams& params,
                                          const ScaleSchedule& schedule, const Matrix& dy) {
  detail::check_level(x, level, params, schedule);
  if (params.kind == DownsampleKind::adaptive_pool) {
    return {adaptive_max_pool_backward(x, schedule.length(level), dy), {}};
  }
  auto g = conv1d_backward(x, params.kernels[level - 1], schedule.ratio, 1, dy);
  return {std::move(g.dx), std::move(g.dkernel)};
}

struct ScalePyramid {
  Matrix base;                 // X_0
  std::vector<Matrix> levels;  // X_1..X_L
  ScaleSchedule schedule;
  DownsampleKind kind = DownsampleKind::adaptive_pool;

  const Matrix& level(std::size_t l) const { return l == 0 ? base : levels.at(l - 1); }
};

inline ScalePyramid build_pyramid(const Matrix& x, const DownsampleParams& params,
                                  const ScaleSchedule& schedule) {
  if (x.rows() != schedule.n) {
    throw ShapeError("build_pyramid: input has " + std::to_string(x.rows()) +
                     " rows, schedule expects n=" + std::to_string(schedule.n));
  }
  ScalePyramid p{x, {}, schedule, params.kind};
  p.levels.reserve(schedule.depth);
  for (std::size_t l = 1; l <= schedule.depth; ++l) {
    p.levels.push_back(downsample(p.level(l - 1), l, params, schedule));
  }
  return p;
}

}  // namespace maha
