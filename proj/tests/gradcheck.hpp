#pragma once

// Central finite-difference gradient checking used across the test suites.
// Kept independent of the library's backward passes: the oracle re-evaluates
// the forward function at perturbed parameter values only.

#include <cmath>
#include <functional>
#include <vector>

#include "unseg/core/tape.hpp"

namespace testutil {

struct GradCheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
};

/// f must rebuild the full forward pass from the current parameter values and
/// return the scalar loss. `entries` lists (param, flat index) pairs to probe.
inline GradCheckResult finite_diff_check(
    const std::function<double()>& eval_loss,
    const std::function<std::vector<double>()>& eval_grads,
    const std::vector<std::pair<unseg::Tensor<double>*, std::int64_t>>& entries, double step = 1e-5) {
  GradCheckResult r;
  std::vector<double> analytic = eval_grads();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto [tensor, idx] = entries[k];
    const double orig = (*tensor)[idx];
    (*tensor)[idx] = orig + step;
    const double fp = eval_loss();
    (*tensor)[idx] = orig - step;
    const double fm = eval_loss();
    (*tensor)[idx] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double abs_err = std::abs(numeric - analytic[k]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[k]), 1e-12});
    r.max_abs_err = std::max(r.max_abs_err, abs_err);
    r.max_rel_err = std::max(r.max_rel_err, abs_err / denom);
  }
  return r;
}

}  // namespace testutil
