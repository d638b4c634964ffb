#pragma once

#include <functional>

#include "efcm/tensor.hpp"

// Finite-difference verification of analytic gradients. Always runs in
// 64-bit: central differences at eps ~1e-5 are unreliable in float.

namespace efcm {

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Relative error with an absolute floor: differences at or below the floor
/// are indistinguishable from finite-difference roundoff (a structurally
/// zero gradient, e.g. a key-projection bias under softmax shift invariance,
/// shows ~1e-12 of pure noise) and count as zero.
inline double rel_err(double a, double n, double floor_abs) {
  const double diff = std::abs(a - n);
  if (diff <= floor_abs) return 0.0;
  return diff / std::max({floor_abs, std::abs(a), std::abs(n)});
}

/// Compares `analytic` against central differences of the scalar map `f`
/// coordinate-by-coordinate. `x` is restored between evaluations. Returns the
/// worst relative error (absolute floor 1e-8 in the denominator).
inline GradCheckReport grad_check(const std::function<double(const Tensor<double>&)>& f,
                                  Tensor<double> x, const Tensor<double>& analytic,
                                  double eps = 1e-5, double floor_abs = 1e-8) {
  detail::require(analytic.same_shape(x), "grad_check: gradient shape mismatch");
  GradCheckReport rep;
  for (size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = f(x);
    x[i] = keep - eps;
    const double fm = f(x);
    x[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite values encountered");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double e = rel_err(analytic[i], numeric, floor_abs);
    if (e >= rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst_index = i;
      rep.analytic_at_worst = analytic[i];
      rep.numeric_at_worst = numeric;
    }
  }
  return rep;
}

}  // namespace efcm
