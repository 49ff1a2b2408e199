#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fsseg/nd/tensor.hpp"

namespace fsseg::nd {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  // where the worst disagreement happened, for debugging
  int64_t worst_input = -1;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check of reverse-mode gradients. fn must rebuild its
// graph from the current leaf values on every call and return a scalar.
// Inputs are perturbed in place one scalar at a time, so keep them small
// (<= 5000 scalars total).
inline GradCheckReport grad_check(const std::string& op_name,
                                  const std::function<Tensor<double>()>& fn,
                                  std::vector<Tensor<double>> inputs, double eps, double tol) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = fn();
  if (loss.size() != 1) throw ShapeMismatch("grad_check: fn must return a scalar");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.emplace_back(t.node->grad.begin(), t.node->grad.end());

  GradCheckReport rep;
  rep.op_name = op_name;
  rep.tolerance = tol;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].node->value;
    for (size_t i = 0; i < vals.size(); ++i) {
      double saved = vals[i];
      vals[i] = saved + eps;
      double fp = fn().item();
      vals[i] = saved - eps;
      double fm = fn().item();
      vals[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[k][i];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      double rel = std::abs(a - numeric) / denom;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = static_cast<int64_t>(k);
        rep.worst_index = static_cast<int64_t>(i);
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace fsseg::nd
