#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flat/tensor.hpp"
#include "flat/transforms.hpp"

// Inside the ABI namespace: these helpers are compiled against both the
// float and the double library.
namespace flat {
FLAT_ABI_BEGIN
namespace testing {

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  int skipped = 0;  // stencils that straddle a ReLU or max-pool switch
  double max_rel_error = 0.0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// near-zero gradients from turning O(h^2) truncation error into a large
// ratio: below it the comparison is absolute (tol * floor).
inline constexpr double kGradFloor = 1e-3;
inline double relative_error(double analytic, double numeric, double floor = kGradFloor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

// Central differences on `coords` randomly chosen entries across `inputs`.
// `loss_fn` must rebuild the graph from the current values on every call.
// A coordinate whose h and h/2 differences disagree has a kink inside the
// stencil, where no finite difference is an oracle; it is redrawn (up to
// 4 * coords draws in total) and counted in `skipped`.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs, int coords,
                                       Rng& rng, double h = 1e-3, double tol = 1e-3) {
  for (Tensor& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<Scalar>> analytic;
  std::size_t total = 0;
  for (const Tensor& t : inputs) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
    total += t.numel();
  }
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (int draw = 0; draw < 4 * coords && result.checked < coords; ++draw) {
    std::size_t flat_index = pick(rng);
    std::size_t which = 0;
    while (flat_index >= inputs[which].numel()) flat_index -= inputs[which++].numel();
    Tensor t = inputs[which];
    Scalar& v = t.data()[flat_index];
    const Scalar saved = v;
    auto difference = [&](double step) {
      v = saved + static_cast<Scalar>(step);
      const double plus = loss_fn().item();
      v = saved - static_cast<Scalar>(step);
      const double minus = loss_fn().item();
      v = saved;
      return (plus - minus) / (2.0 * step);
    };
    const double numeric = difference(h);
    if (relative_error(numeric, difference(h / 2)) > tol / 4) {
      ++result.skipped;
      continue;
    }
    const double rel = relative_error(analytic[which][flat_index], numeric);
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
    if (rel > tol) ++result.failed;
  }
  return result;
}

}  // namespace testing
FLAT_ABI_END
}  // namespace flat
