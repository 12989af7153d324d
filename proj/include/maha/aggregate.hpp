#pragma once

// Fusion of the per-scale upsampled outputs C_l = U_l(O_l) into a single
// full-resolution output O* = sum_l w_l C_l, with w on the probability
// simplex. Weights come from one of three rules:
//   co    projected gradient descent on ||sum_l w_l C_l - T||_F^2 + lambda ||w||_1,
//         unrolled for a fixed number of steps so it can be differentiated
//   ne    Gauss-Seidel best-response dynamics between scales
//   mean  uniform weights
// T is an explicit fitting target (see build_target).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maha/errors.hpp"
#include "maha/tensor.hpp"

namespace maha {

enum class AggMethod { co, ne, mean };
enum class TargetKind { value_pathway, mean_of_scales };

inline std::string to_string(AggMethod m) {
  switch (m) {
    case AggMethod::co: return "co";
    case AggMethod::ne: return "ne";
    case AggMethod::mean: return "mean";
  }
  return "?";
}

inline AggMethod parse_agg_method(const std::string& s) {
  if (s == "co") return AggMethod::co;
  if (s == "ne") return AggMethod::ne;
  if (s == "mean") return AggMethod::mean;
  throw ConfigError("unknown aggregation method '" + s + "' (expected co, ne or mean)");
}

inline std::string to_string(TargetKind k) {
  return k == TargetKind::value_pathway ? "value_pathway" : "mean_of_scales";
}

inline TargetKind parse_target_kind(const std::string& s) {
  if (s == "value_pathway") return TargetKind::value_pathway;
  if (s == "mean_of_scales") return TargetKind::mean_of_scales;
  throw ConfigError("unknown target kind '" + s + "' (expected value_pathway or mean_of_scales)");
}

struct SolverConfig {
  double lambda = 0.1;
  std::size_t max_iters = 50;
  /// Relative step for projected gradient: the actual step is
  /// step / (2 sum_l ||C_l||^2), which never exceeds 1 / Lipschitz.
  double step = 1.0;
  double tol = 1e-8;
  TargetKind target = TargetKind::value_pathway;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("solver lambda must be >= 0");
    if (max_iters < 1) throw ConfigError("solver iterations must be >= 1");
    if (!(step > 0.0)) throw ConfigError("solver step must be > 0");
    if (!(tol >= 0.0)) throw ConfigError("solver tolerance must be >= 0");
  }
};

struct AggWeights {
  std::vector<double> w;
  AggMethod method = AggMethod::mean;
  std::size_t iterations = 0;
  double objective = 0.0;
  /// Objective after each iteration (co) or sweep (ne).
  std::vector<double> trajectory;
  /// Scales whose candidate is identically zero (ne only); their weight is 0.
  std::vector<std::size_t> degenerate;
};

// ---------------------------------------------------------------------------
// Upsampling

/// Row i of the result is row floor(i * o.rows / n) of o.
inline Matrix nn_upsample(const Matrix& o, std::size_t n) {
  if (n < o.rows()) {
    throw ShapeError("nn_upsample: cannot upsample " + o.shape() + " to " + std::to_string(n) + " rows");
  }
  Matrix out(n, o.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = o.row(i * o.rows() / n);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix nn_upsample_backward(const Matrix& dy, std::size_t rows_in) {
  if (rows_in == 0 || rows_in > dy.rows()) throw ShapeError("nn_upsample_backward: bad source length");
  Matrix dx(rows_in, dy.cols());
  const std::size_t n = dy.rows();
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = dx.row(i * rows_in / n);
    const auto g = dy.row(i);
    for (std::size_t c = 0; c < g.size(); ++c) dst[c] += g[c];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Simplex projection

/// Euclidean projection onto {w : sum w = 1, w >= 0} by sorting and
/// thresholding.
inline std::vector<double> simplex_project(std::span<const double> v) {
  if (v.empty()) throw ShapeError("simplex_project: empty input");
  for (double x : v)
    if (!std::isfinite(x)) throw EvaluationError("simplex_project: non-finite input");
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double running = 0.0;
  double theta = 0.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    running += sorted[k];
    const double t = (running - 1.0) / static_cast<double>(k + 1);
    if (sorted[k] - t > 0.0) theta = t;
  }
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = std::max(v[i] - theta, 0.0);
  return w;
}

/// Vector-Jacobian product of simplex_project at the point that produced w.
/// Inside the active face the Jacobian is I - 11^T/|S| on the support S.
inline std::vector<double> simplex_project_backward(std::span<const double> w,
                                                    std::span<const double> dw) {
  double sum = 0.0;
  std::size_t support = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) {
      sum += dw[i];
      ++support;
    }
  }
  const double mean = support ? sum / static_cast<double>(support) : 0.0;
  std::vector<double> dv(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) dv[i] = dw[i] - mean;
  return dv;
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

inline void check_candidates(std::span<const Matrix> cands, const Matrix& target) {
  if (cands.empty()) throw ShapeError("aggregation needs at least one candidate");
  for (std::size_t l = 0; l < cands.size(); ++l) {
    if (!cands[l].same_shape(target)) {
      throw ShapeError("candidate " + std::to_string(l) + " has shape " + cands[l].shape() +
                       ", target has " + target.shape());
    }
    if (!cands[l].all_finite()) {
      throw EvaluationError("candidate " + std::to_string(l) + " contains non-finite values");
    }
  }
  if (!target.all_finite()) throw EvaluationError("aggregation target contains non-finite values");
}

/// Gram matrix G_lm = <C_l, C_m> and right-hand side b_l = <C_l, T>.
struct Gram {
  std::size_t size = 0;
  std::vector<double> g;
  std::vector<double> b;
  double target_sq = 0.0;

  double at(std::size_t l, std::size_t m) const { return g[l * size + m]; }
  double trace() const {
    double t = 0.0;
    for (std::size_t l = 0; l < size; ++l) t += at(l, l);
    return t;
  }
  /// ||sum w C - T||^2 expanded through the Gram matrix.
  double residual(std::span<const double> w) const {
    double q = target_sq;
    for (std::size_t l = 0; l < size; ++l) {
      q -= 2.0 * w[l] * b[l];
      for (std::size_t m = 0; m < size; ++m) q += w[l] * w[m] * at(l, m);
    }
    return std::max(q, 0.0);
  }
};

inline Gram gram(std::span<const Matrix> cands, const Matrix& target) {
  const std::size_t n = cands.size();
  Gram s{n, std::vector<double>(n * n), std::vector<double>(n), squared_norm(target)};
  for (std::size_t l = 0; l < n; ++l) {
    s.b[l] = frobenius_dot(cands[l], target);
    for (std::size_t m = l; m < n; ++m) {
      const double v = frobenius_dot(cands[l], cands[m]);
      s.g[l * n + m] = v;
      s.g[m * n + l] = v;
    }
  }
  return s;
}

/// Maps gradients w.r.t. the Gram entries back onto candidates and target.
inline void gram_backward(std::span<const Matrix> cands, const Matrix& target,
                          std::span<const double> dg, std::span<const double> db,
                          std::vector<Matrix>& dcands, Matrix& dtarget) {
  const std::size_t n = cands.size();
  for (std::size_t l = 0; l < n; ++l) {
    for (std::size_t m = 0; m < n; ++m) {
      const double coef = dg[l * n + m] + dg[m * n + l];
      if (coef != 0.0) dcands[l].add_scaled(cands[m], coef);
    }
    if (db[l] != 0.0) {
      dcands[l].add_scaled(target, db[l]);
      dtarget.add_scaled(cands[l], db[l]);
    }
  }
}

inline double l1(std::span<const double> w) {
  double s = 0.0;
  for (double v : w) s += std::abs(v);
  return s;
}

/// Dense solve with partial pivoting; returns false when singular.
inline bool solve_linear(std::vector<double> a, std::vector<double> rhs, std::size_t n,
                         std::vector<double>& x) {
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (std::abs(a[piv * n + c]) < 1e-300) return false;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
      std::swap(rhs[c], rhs[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      if (f == 0.0) continue;
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
      rhs[r] -= f * rhs[c];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    double s = rhs[r];
    for (std::size_t k = r + 1; k < n; ++k) s -= a[r * n + k] * x[k];
    x[r] = s / a[r * n + r];
  }
  return true;
}

}  // namespace detail

/// ||sum_l w_l C_l - T||_F^2, evaluated directly on the matrices.
inline double reconstruction_error(std::span<const Matrix> cands, const Matrix& target,
                                   std::span<const double> w) {
  Matrix r = target * -1.0;
  for (std::size_t l = 0; l < cands.size(); ++l) r.add_scaled(cands[l], w[l]);
  return squared_norm(r);
}

inline Matrix aggregate_outputs(std::span<const Matrix> cands, std::span<const double> w) {
  if (cands.empty() || w.size() != cands.size()) {
    throw ShapeError("aggregate_outputs: " + std::to_string(w.size()) + " weights for " +
                     std::to_string(cands.size()) + " candidates");
  }
  Matrix out = zeros_like(cands.front());
  for (std::size_t l = 0; l < cands.size(); ++l) out.add_scaled(cands[l], w[l]);
  return out;
}

inline Matrix aggregate_outputs(std::span<const Matrix> cands, const AggWeights& w) {
  return aggregate_outputs(cands, std::span<const double>(w.w));
}

/// The matrix the weights are fitted to. value_pathway is the full-resolution
/// value projection V_base; mean_of_scales is the plain average of the
/// candidates and is held constant while solving.
inline Matrix build_target(const Matrix& x0, const Matrix& v_base, std::span<const Matrix> cands,
                           TargetKind kind) {
  if (v_base.rows() != x0.rows()) {
    throw ShapeError("build_target: value pathway " + v_base.shape() + " does not match input " + x0.shape());
  }
  if (kind == TargetKind::value_pathway) return v_base;
  if (cands.empty()) throw ShapeError("build_target: no candidates to average");
  Matrix t = zeros_like(cands.front());
  for (const auto& c : cands) t += c;
  t *= 1.0 / static_cast<double>(cands.size());
  return t;
}

// ---------------------------------------------------------------------------
// Convex aggregation

/// Iterates of the unrolled projected-gradient solve, kept for backward.
struct CoTrace {
  std::vector<std::vector<double>> iterates;   // w_0 .. w_K
  std::vector<std::vector<double>> proposals;  // pre-projection v_1 .. v_K
  double alpha = 0.0;
  double trace_sum = 0.0;  // sum_l ||C_l||^2, defines alpha
  /// Smallest distance of a proposal coordinate from the projection
  /// threshold; tiny values mean the solve sat on a kink.
  double kink_margin = std::numeric_limits<double>::infinity();
};

struct CoSolution {
  AggWeights weights;
  CoTrace trace;
};

inline CoSolution co_solve_traced(std::span<const Matrix> cands, const Matrix& target,
                                  const SolverConfig& cfg) {
  cfg.validate();
  detail::check_candidates(cands, target);
  const std::size_t n = cands.size();
  const auto sys = detail::gram(cands, target);

  CoSolution sol;
  auto& tr = sol.trace;
  tr.trace_sum = sys.trace();
  tr.alpha = tr.trace_sum > 0.0 ? cfg.step / (2.0 * tr.trace_sum) : cfg.step;

  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  tr.iterates.push_back(w);
  std::size_t iters = 0;
  if (n > 1) {
    for (; iters < cfg.max_iters;) {
      std::vector<double> v(n);
      for (std::size_t l = 0; l < n; ++l) {
        double grad = -2.0 * sys.b[l] + cfg.lambda;  // w >= 0 so d|w_l| = 1
        for (std::size_t m = 0; m < n; ++m) grad += 2.0 * sys.at(l, m) * w[m];
        v[l] = w[l] - tr.alpha * grad;
      }
      auto next = simplex_project(v);
      const auto anchor = static_cast<std::size_t>(
          std::distance(next.begin(), std::max_element(next.begin(), next.end())));
      const double theta = v[anchor] - next[anchor];
      for (std::size_t l = 0; l < n; ++l) tr.kink_margin = std::min(tr.kink_margin, std::abs(v[l] - theta));
      double change = 0.0;
      for (std::size_t l = 0; l < n; ++l) change = std::max(change, std::abs(next[l] - w[l]));
      w = std::move(next);
      tr.proposals.push_back(std::move(v));
      tr.iterates.push_back(w);
      ++iters;
      sol.weights.trajectory.push_back(sys.residual(w) + cfg.lambda * detail::l1(w));
      if (change < cfg.tol) break;
    }
  }
  sol.weights.w = w;
  sol.weights.method = AggMethod::co;
  sol.weights.iterations = iters;
  sol.weights.objective = reconstruction_error(cands, target, w) + cfg.lambda * detail::l1(w);
  return sol;
}

inline AggWeights co_solve(std::span<const Matrix> cands, const Matrix& target, const SolverConfig& cfg) {
  return co_solve_traced(cands, target, cfg).weights;
}

struct SolverGrad {
  std::vector<Matrix> dcands;
  Matrix dtarget;
};

/// Reverse pass through the unrolled co iterations: given dL/dw at the final
/// iterate, returns dL/dC_l and dL/dT.
inline SolverGrad co_backward(std::span<const Matrix> cands, const Matrix& target,
                              const CoSolution& sol, std::span<const double> dw_final,
                              const SolverConfig& cfg) {
  const std::size_t n = cands.size();
  SolverGrad out{{}, zeros_like(target)};
  for (const auto& c : cands) out.dcands.push_back(zeros_like(c));
  if (n <= 1 || sol.trace.proposals.empty()) return out;

  const auto sys = detail::gram(cands, target);
  const auto& tr = sol.trace;
  std::vector<double> dg(n * n, 0.0);
  std::vector<double> db(n, 0.0);
  double dalpha = 0.0;
  std::vector<double> dw(dw_final.begin(), dw_final.end());

  for (std::size_t k = tr.proposals.size(); k-- > 0;) {
    const auto& w_prev = tr.iterates[k];
    const auto& w_next = tr.iterates[k + 1];
    const auto dv = simplex_project_backward(w_next, dw);
    // v = w - alpha * (2 G w - 2 b + lambda)
    std::vector<double> dw_prev(dv);
    for (std::size_t l = 0; l < n; ++l) {
      double grad = -2.0 * sys.b[l] + cfg.lambda;
      for (std::size_t m = 0; m < n; ++m) {
        grad += 2.0 * sys.at(l, m) * w_prev[m];
        dw_prev[m] -= 2.0 * tr.alpha * sys.at(l, m) * dv[l];
        dg[l * n + m] -= 2.0 * tr.alpha * dv[l] * w_prev[m];
      }
      db[l] += 2.0 * tr.alpha * dv[l];
      dalpha -= dv[l] * grad;
    }
    dw = std::move(dw_prev);
  }
  if (tr.trace_sum > 0.0) {
    // alpha = step / (2 sum_l G_ll)
    const double dtrace = -dalpha * tr.alpha / tr.trace_sum;
    for (std::size_t l = 0; l < n; ++l) dg[l * n + l] += dtrace;
  }
  detail::gram_backward(cands, target, dg, db, out.dcands, out.dtarget);
  return out;
}

// ---------------------------------------------------------------------------
// Best-response aggregation

/// Each scale is a player that chooses its own share w_l of the mixture.
/// A unilateral move by player l changes w_l and rescales the remaining
/// players proportionally, so the profile stays on the simplex; the best such
/// move solves a one-dimensional least-squares problem
///     min_{t in [0,1]} || t C_l + (1 - t) M_l - T ||^2,
/// with M_l = S_{-l} / (1 - w_l) the normalised mixture of the others.
/// Players update in ascending order (Gauss-Seidel); a sweep ends with a
/// projection back onto the simplex to remove rounding drift. Players whose
/// candidate is identically zero are pinned to 0.
inline AggWeights ne_solve(std::span<const Matrix> cands, const Matrix& target, const SolverConfig& cfg) {
  cfg.validate();
  detail::check_candidates(cands, target);
  const std::size_t n = cands.size();
  AggWeights out;
  out.method = AggMethod::ne;

  std::vector<std::size_t> active;
  for (std::size_t l = 0; l < n; ++l) {
    if (squared_norm(cands[l]) == 0.0) {
      out.degenerate.push_back(l);
    } else {
      active.push_back(l);
    }
  }
  std::vector<double> w(n, 0.0);
  if (active.empty()) {
    // Every candidate is zero: any simplex point reproduces the same output.
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
    active.clear();
  } else {
    for (std::size_t l : active) w[l] = 1.0 / static_cast<double>(active.size());
  }

  if (active.size() > 1) {
    for (std::size_t sweep = 0; sweep < cfg.max_iters; ++sweep) {
      const auto before = w;
      for (std::size_t l : active) {
        const double rest = 1.0 - w[l];
        const bool collapsed = rest <= 1e-12;
        std::vector<double> share(n, 0.0);
        for (std::size_t m : active) {
          if (m == l) continue;
          share[m] = collapsed ? 1.0 / static_cast<double>(active.size() - 1) : w[m] / rest;
        }
        Matrix mix = zeros_like(target);
        for (std::size_t m : active)
          if (m != l && share[m] != 0.0) mix.add_scaled(cands[m], share[m]);
        const Matrix dir = cands[l] - mix;
        const double denom = squared_norm(dir);
        if (denom <= 1e-14 * (squared_norm(cands[l]) + squared_norm(mix))) continue;
        const double t = std::clamp(frobenius_dot(target - mix, dir) / denom, 0.0, 1.0);
        w[l] = t;
        for (std::size_t m : active)
          if (m != l) w[m] = (1.0 - t) * share[m];
      }
      std::vector<double> sub;
      for (std::size_t l : active) sub.push_back(w[l]);
      sub = simplex_project(sub);
      for (std::size_t i = 0; i < active.size(); ++i) w[active[i]] = sub[i];

      double change = 0.0;
      for (std::size_t l = 0; l < n; ++l) change = std::max(change, std::abs(w[l] - before[l]));
      ++out.iterations;
      out.trajectory.push_back(reconstruction_error(cands, target, w) + cfg.lambda * detail::l1(w));
      if (change <= cfg.tol) break;
    }
  }
  out.w = w;
  out.objective = reconstruction_error(cands, target, w) + cfg.lambda * detail::l1(w);
  return out;
}

/// Gradient through the equilibrium by implicit differentiation of the
/// optimality system on the support S of w:
///     G_SS w_S - b_S = mu 1,   1^T w_S = 1.
/// Scales outside the support, degenerate scales, and single-scale supports
/// receive no gradient through w.
inline SolverGrad ne_backward(std::span<const Matrix> cands, const Matrix& target,
                              const AggWeights& sol, std::span<const double> dw) {
  const std::size_t n = cands.size();
  SolverGrad out{{}, zeros_like(target)};
  for (const auto& c : cands) out.dcands.push_back(zeros_like(c));

  std::vector<std::size_t> support;
  for (std::size_t l = 0; l < n; ++l) {
    const bool degenerate =
        std::find(sol.degenerate.begin(), sol.degenerate.end(), l) != sol.degenerate.end();
    if (sol.w[l] > 1e-12 && !degenerate) support.push_back(l);
  }
  const std::size_t s = support.size();
  if (s <= 1) return out;

  const auto sys = detail::gram(cands, target);
  const std::size_t dim = s + 1;
  double ridge = 0.0;
  for (std::size_t i : support) ridge += sys.at(i, i);
  ridge *= 1e-12 / static_cast<double>(s);

  std::vector<double> kkt(dim * dim, 0.0);
  std::vector<double> rhs(dim, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) kkt[i * dim + j] = sys.at(support[i], support[j]);
    kkt[i * dim + i] += ridge;
    kkt[i * dim + s] = 1.0;
    kkt[s * dim + i] = 1.0;
    rhs[i] = dw[support[i]];
  }
  std::vector<double> adj;
  if (!detail::solve_linear(kkt, rhs, dim, adj)) return out;

  // K z = [b; 1] with z = [w_S; m]: dL/db_S = u, dL/dG_SS = -u w_S^T.
  std::vector<double> dg(n * n, 0.0);
  std::vector<double> db(n, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    db[support[i]] = adj[i];
    for (std::size_t j = 0; j < s; ++j) dg[support[i] * n + support[j]] = -adj[i] * sol.w[support[j]];
  }
  detail::gram_backward(cands, target, dg, db, out.dcands, out.dtarget);
  return out;
}

/// Result of probing a weight profile with bounded unilateral deviations.
struct EquilibriumCheck {
  bool ok = true;
  double worst_gain = 0.0;  // largest objective decrease found
  std::size_t player = 0;
  std::size_t partner = 0;
};

/// For every non-degenerate player l, partner m and delta in {+step, -step},
/// moves delta of mass from m to l (when both stay in [0,1]) and measures how
/// much player l's objective ||w_l C_l + S_{-l} - T||^2 drops. The profile is
/// an eps-equilibrium when no probe gains more than eps.
inline EquilibriumCheck equilibrium_check(std::span<const Matrix> cands, const Matrix& target,
                                          const AggWeights& sol, double step = 0.01, double eps = 1e-6) {
  const std::size_t n = cands.size();
  const auto sys = detail::gram(cands, target);
  const double base = sys.residual(sol.w);
  EquilibriumCheck check;
  for (std::size_t l = 0; l < n; ++l) {
    if (std::find(sol.degenerate.begin(), sol.degenerate.end(), l) != sol.degenerate.end()) continue;
    for (std::size_t m = 0; m < n; ++m) {
      if (m == l) continue;
      for (double delta : {step, -step}) {
        auto w = sol.w;
        w[l] += delta;
        w[m] -= delta;
        if (w[l] < 0.0 || w[l] > 1.0 || w[m] < 0.0 || w[m] > 1.0) continue;
        const double gain = base - sys.residual(w);
        if (gain > check.worst_gain) {
          check.worst_gain = gain;
          check.player = l;
          check.partner = m;
        }
      }
    }
  }
  check.ok = check.worst_gain <= eps;
  return check;
}

inline AggWeights mean_weights(std::span<const Matrix> cands, const Matrix& target, const SolverConfig& cfg) {
  detail::check_candidates(cands, target);
  AggWeights out;
  out.method = AggMethod::mean;
  out.w.assign(cands.size(), 1.0 / static_cast<double>(cands.size()));
  out.objective = reconstruction_error(cands, target, out.w) + cfg.lambda * detail::l1(out.w);
  return out;
}

}  // namespace maha
