#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "xkt/tensor.hpp"

namespace xkt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;  // index into the parameter list
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(θ+eps) - f(θ-eps)) / 2eps for every entry of every parameter.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
/// `loss_fn` must be deterministic and return a scalar tensor.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> params, double eps);

}  // namespace xkt
