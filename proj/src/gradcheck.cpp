#include "xkt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xkt/errors.hpp"

namespace xkt {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn, std::size_t flat_index) {
  double value = 0.0;
  try {
    NoGradGuard guard;
    value = static_cast<double>(loss_fn().item());
  } catch (const NumericError& e) {
    throw NumericError("finite_diff_check: loss not finite when perturbing parameter " +
                       std::to_string(flat_index) + ": " + e.what());
  }
  if (!std::isfinite(value)) {
    throw NumericError("finite_diff_check: loss not finite when perturbing parameter " +
                       std::to_string(flat_index));
  }
  return value;
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> params, double eps) {
  if (!(eps > 0)) throw ContractError("finite_diff_check: eps must be positive");
  for (auto& p : params) p.zero_grad();
  {
    Tensor loss = loss_fn();
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw NumericError("finite_diff_check: loss is not finite at the base point");
    }
    backward(loss);
  }
  std::vector<std::vector<real>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckResult result;
  std::size_t flat = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
      const real saved = values[i];
      values[i] = static_cast<real>(saved + eps);
      double up = evaluate(loss_fn, flat);
      values[i] = static_cast<real>(saved - eps);
      double down = evaluate(loss_fn, flat);
      values[i] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = static_cast<double>(analytic[t][i]);
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      double rel = std::fabs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_entry = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace xkt
