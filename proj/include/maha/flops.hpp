#pragma once

// Analytical cost model: standard attention against the multiscale layer,
// counted either as attention-score entries (n^2 vs sum_l n_l^2) or as
// multiply-accumulates of the whole sublayer.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "maha/errors.hpp"
#include "maha/pyramid.hpp"

namespace maha {

enum class CountMode { score_entries, full_macs };
enum class ScalePolicy { proportional, absolute };

inline std::string to_string(CountMode m) { return m == CountMode::score_entries ? "score_entries" : "full_macs"; }
inline std::string to_string(ScalePolicy p) { return p == ScalePolicy::proportional ? "proportional" : "absolute"; }

inline CountMode parse_count_mode(const std::string& s) {
  if (s == "score_entries") return CountMode::score_entries;
  if (s == "full_macs") return CountMode::full_macs;
  throw ConfigError("unknown metric '" + s + "' (expected score_entries or full_macs)");
}

inline ScalePolicy parse_scale_policy(const std::string& s) {
  if (s == "proportional") return ScalePolicy::proportional;
  if (s == "absolute") return ScalePolicy::absolute;
  throw ConfigError("unknown scale policy '" + s + "' (expected proportional or absolute)");
}

/// Scale lengths used at 512 tokens in the reference configuration.
inline const std::vector<std::size_t>& absolute_scale_lengths() {
  static const std::vector<std::size_t> lengths{256, 128, 64, 32};
  return lengths;
}

struct CostConfig {
  std::size_t d = 768;
  std::size_t d_k = 64;
  std::size_t d_v = 768;
  std::size_t kernel_size = 3;
  DownsampleKind downsample = DownsampleKind::strided_conv;
  std::size_t solver_iters = 50;
  /// Also count the full-resolution level (the literal l = 0 term).
  bool include_base_scale = false;
};

struct FlopsReport {
  std::size_t n = 0;
  CountMode mode = CountMode::score_entries;
  std::vector<std::uint64_t> scale_scores;  // n_l^2 per attention scale
  std::uint64_t total_scores = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t baseline_scores = 0;
  std::uint64_t baseline_macs = 0;

  std::uint64_t maha() const { return mode == CountMode::score_entries ? total_scores : total_macs; }
  std::uint64_t baseline() const { return mode == CountMode::score_entries ? baseline_scores : baseline_macs; }
  double ratio() const { return static_cast<double>(maha()) / static_cast<double>(baseline()); }
  /// 1 - maha/baseline; negative when the hierarchy costs more.
  double reduction() const { return 1.0 - ratio(); }
};

inline std::uint64_t mha_score_entries(std::size_t n) {
  if (n < 1) throw ConfigError("sequence length must be >= 1");
  return static_cast<std::uint64_t>(n) * n;
}

/// Single-head attention: Q, K, V projections, scores and the value product.
inline std::uint64_t mha_macs(std::size_t n, const CostConfig& cfg) {
  const std::uint64_t nn = mha_score_entries(n);
  return static_cast<std::uint64_t>(n) * cfg.d * (2 * cfg.d_k + cfg.d_v) + nn * (cfg.d_k + cfg.d_v);
}

/// Cost of the multiscale layer for explicit level lengths (finest first).
inline FlopsReport maha_cost(std::size_t n, const std::vector<std::size_t>& lengths, const CostConfig& cfg,
                             CountMode mode) {
  if (lengths.empty()) throw ConfigError("maha_cost: no scale lengths");
  if (n < 1) throw ConfigError("maha_cost: sequence length must be >= 1");
  FlopsReport r;
  r.n = n;
  r.mode = mode;
  std::vector<std::size_t> attn = lengths;
  if (cfg.include_base_scale) attn.insert(attn.begin(), n);

  const std::uint64_t d = cfg.d;
  std::uint64_t macs = static_cast<std::uint64_t>(n) * d * cfg.d_v;  // shared V_base
  for (std::size_t len : attn) {
    const std::uint64_t sq = static_cast<std::uint64_t>(len) * len;
    r.scale_scores.push_back(sq);
    r.total_scores += sq;
    macs += 2 * static_cast<std::uint64_t>(len) * d * cfg.d_k;  // Q_l, K_l
    macs += sq * (cfg.d_k + cfg.d_v);                            // scores, A_l V_l
    macs += static_cast<std::uint64_t>(n) * cfg.d_v;             // upsample copy
  }
  for (std::size_t len : lengths) {
    // X and V pyramids are both downsampled.
    if (cfg.downsample == DownsampleKind::strided_conv) {
      macs += 2 * static_cast<std::uint64_t>(len) * cfg.kernel_size * d * d;
    } else {
      macs += 2 * static_cast<std::uint64_t>(n) * d;  // window comparisons, bounded by input size
    }
  }
  macs += static_cast<std::uint64_t>(cfg.solver_iters) * attn.size() * n * cfg.d_v;
  r.total_macs = macs;
  r.baseline_scores = mha_score_entries(n);
  r.baseline_macs = mha_macs(n, cfg);
  return r;
}

inline FlopsReport maha_cost(const ScaleSchedule& schedule, const CostConfig& cfg, CountMode mode) {
  CostConfig c = cfg;
  c.include_base_scale = cfg.include_base_scale || schedule.include_base_scale;
  return maha_cost(schedule.n, schedule.lengths, c, mode);
}

/// Closed form n^2 / (r^2 - 1) of the infinite geometric sum over levels >= 1.
inline double asymptotic_bound(std::size_t n, std::size_t r) {
  if (r < 2) throw ConfigError("asymptotic_bound: ratio must be >= 2, got " + std::to_string(r));
  const double nn = static_cast<double>(n);
  const double rr = static_cast<double>(r);
  return nn * nn / (rr * rr - 1.0);
}

/// Level lengths under a scale policy. Proportional: n_l = floor(n / r^l).
/// Absolute: the fixed reference lengths that fit strictly below n; when
/// none fits the single length n is returned (degenerate hierarchy).
inline std::vector<std::size_t> policy_lengths(std::size_t n, ScalePolicy policy, std::size_t r, std::size_t depth) {
  if (policy == ScalePolicy::proportional) return make_schedule(n, r, depth).lengths;
  std::vector<std::size_t> out;
  for (std::size_t len : absolute_scale_lengths())
    if (len < n) out.push_back(len);
  if (out.empty()) out.push_back(n);
  return out;
}

struct BenchConfig {
  std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048, 4096};
  std::vector<ScalePolicy> policies{ScalePolicy::proportional, ScalePolicy::absolute};
  std::vector<CountMode> metrics{CountMode::score_entries};
  std::size_t ratio = 2;
  std::size_t depth = 4;
  CostConfig cost;
};

struct BenchRow {
  std::size_t n = 0;
  ScalePolicy policy = ScalePolicy::proportional;
  CountMode metric = CountMode::score_entries;
  std::uint64_t baseline = 0;
  std::uint64_t maha = 0;
  double ratio = 0.0;
  double reduction_pct = 0.0;
  bool degenerate = false;  // hierarchy no cheaper than the baseline
};

/// One row per (metric, policy, n), metrics outermost so each metric forms a
/// contiguous block.
inline std::vector<BenchRow> bench_sweep(const BenchConfig& cfg) {
  if (cfg.lengths.empty()) throw ConfigError("bench_sweep: no sequence lengths given");
  for (std::size_t i = 0; i < cfg.lengths.size(); ++i) {
    if (cfg.lengths[i] < 1) throw ConfigError("bench_sweep: sequence lengths must be positive");
    if (i > 0 && cfg.lengths[i] <= cfg.lengths[i - 1]) {
      throw ConfigError("bench_sweep: sequence lengths must be strictly ascending");
    }
  }
  std::vector<BenchRow> rows;
  for (CountMode metric : cfg.metrics) {
    for (ScalePolicy policy : cfg.policies) {
      for (std::size_t n : cfg.lengths) {
        std::vector<std::size_t> lengths;
        if (policy == ScalePolicy::proportional && max_feasible_depth(n, cfg.ratio) < cfg.depth) {
          lengths = {n};
        } else {
          lengths = policy_lengths(n, policy, cfg.ratio, cfg.depth);
        }
        CostConfig cost = cfg.cost;
        const bool degenerate_lengths = lengths.size() == 1 && lengths.front() == n;
        if (degenerate_lengths) cost.include_base_scale = false;
        const auto rep = maha_cost(n, lengths, cost, metric);
        BenchRow row{n, policy, metric, rep.baseline(), rep.maha(), rep.ratio(), 100.0 * rep.reduction(), false};
        row.degenerate = row.ratio >= 1.0;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

inline std::string format_real(double v, int precision = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "n,policy,metric,baseline,maha,ratio,reduction_pct\n";
  for (const auto& r : rows) {
    os << r.n << ',' << to_string(r.policy) << ',' << to_string(r.metric) << ',' << r.baseline << ','
       << r.maha << ',' << format_real(r.ratio, 8) << ',' << format_real(r.reduction_pct, 4) << '\n';
  }
  return os.str();
}

}  // namespace maha
