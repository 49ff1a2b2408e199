#pragma once

#include <cmath>
#include <vector>

#include "fsseg/nd/tensor.hpp"

namespace fsseg::nd {

// Polynomial learning-rate decay: lr0 * (1 - step/total)^power.
inline double poly_lr(double lr0, int64_t step, int64_t total_steps, double power) {
  if (total_steps <= 0) return lr0;
  double frac = 1.0 - double(std::min(step, total_steps)) / double(total_steps);
  return lr0 * std::pow(std::max(frac, 0.0), power);
}

// AdamW with decoupled weight decay: the decay term is applied directly to
// the parameter, scaled by the current lr, outside the Adam moment update.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        wd_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), T(0));
      v_[i].assign(params_[i].size(), T(0));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t step_count() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& node = *params_[i].node;
      node.ensure_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < node.value.size(); ++j) {
        double g = double(node.grad[j]);
        m[j] = T(beta1_ * double(m[j]) + (1.0 - beta1_) * g);
        v[j] = T(beta2_ * double(v[j]) + (1.0 - beta2_) * g * g);
        double mhat = double(m[j]) / bc1;
        double vhat = double(v[j]) / bc2;
        double upd = mhat / (std::sqrt(vhat) + eps_) + wd_ * double(node.value[j]);
        node.value[j] = T(double(node.value[j]) - lr_ * upd);
      }
      check_finite<T>(node.value, "adamw_step");
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace fsseg::nd
