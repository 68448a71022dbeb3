#pragma once

// Central finite differences, independent of the reverse-mode engine: only
// forward values are used.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace fectek::testing {

inline std::vector<double> numeric_gradient(const std::function<double()>& f,
                                            std::span<double> x, double eps) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f();
    x[i] = saved - eps;
    const double down = f();
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_relative_error(std::span<const double> analytic,
                                 std::span<const double> numeric, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace fectek::testing
