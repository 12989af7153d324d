#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "maha/errors.hpp"

namespace maha {

/// One named block of parameters together with its analytic gradient.
struct ParamGroup {
  std::string name;
  std::span<double> values;
  std::vector<double> analytic;
};

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GroupError> groups;
  bool pass = true;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& g : groups) w = std::max(w, g.max_rel_error);
    return w;
  }
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients against central differences
/// (f(p+eps) - f(p-eps)) / (2 eps), one coordinate at a time. `f` must read
/// the parameters through the spans held in `groups`; every coordinate is
/// restored after it is perturbed. `floor` bounds the relative-error
/// denominator from below so near-zero gradients are compared absolutely.
template <class F>
GradCheckReport finite_diff_check(F&& f, std::vector<ParamGroup>& groups, double eps, double tol,
                                  double floor = 1e-8) {
  GradCheckReport report;
  report.tolerance = tol;
  auto eval = [&]() {
    const double v = f();
    if (!std::isfinite(v)) throw EvaluationError("finite_diff_check: objective is not finite");
    return v;
  };
  eval();
  for (auto& group : groups) {
    if (group.analytic.size() != group.values.size()) {
      throw ShapeError("finite_diff_check: group '" + group.name + "' has " +
                       std::to_string(group.values.size()) + " values but " +
                       std::to_string(group.analytic.size()) + " analytic entries");
    }
    GroupError err{group.name, 0.0};
    for (std::size_t i = 0; i < group.values.size(); ++i) {
      const double saved = group.values[i];
      group.values[i] = saved + eps;
      const double up = eval();
      group.values[i] = saved - eps;
      const double down = eval();
      group.values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      err.max_rel_error = std::max(err.max_rel_error, relative_error(group.analytic[i], numeric, floor));
    }
    report.pass = report.pass && err.max_rel_error < tol;
    report.groups.push_back(err);
  }
  return report;
}

}  // namespace maha
