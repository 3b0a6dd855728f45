#pragma once

// Central-difference gradient verification. Used by the test suite to hold
// every backward rule against a numeric oracle.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memstream/tensor.hpp"

namespace memstream {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst;  // "param[index]" of the worst element

  bool ok(double tol) const { return max_rel_err <= tol; }
};

/// Compares analytic gradients of `build()` (a scalar loss rebuilt from the
/// current parameter values) against central differences with step `h`.
/// Parameters are perturbed in place; their values are restored on return.
///
/// Error metric per element: |a - n| / max(1e-6, |a| + |n|).
inline GradCheckReport grad_check(
    const std::function<Tensor()>& build,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double h = 1e-4) {
  GradCheckReport report;

  // Analytic pass.
  for (const auto& [name, p] : params) {
    Tensor(p).zero_grad();
  }
  Tensor loss = build();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.push_back(p.grad());

  // Numeric pass, one coordinate at a time.
  NoGradGuard guard;  // perturbed evaluations do not need a tape
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    std::vector<double>& v = p.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = build().item();
      v[i] = saved - h;
      const double down = build().item();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err =
          abs_err / std::max(1e-6, std::abs(a) + std::abs(numeric));
      if (rel_err > report.max_rel_err) {
        report.max_rel_err = rel_err;
        report.worst = msg(params[pi].first, "[", i, "]");
      }
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
    }
  }
  return report;
}

}  // namespace memstream
