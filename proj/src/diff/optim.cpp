#include "mqe_align/diff/optim.hpp"

#include <cmath>
#include <numbers>

#include "mqe_align/error.hpp"

namespace mqe {

void LrSchedule::validate() const {
  if (!(warmup_lr <= min_lr && min_lr <= init_lr)) {
    throw ConfigError("lr schedule: need warmup_lr <= min_lr <= init_lr, got " +
                      std::to_string(warmup_lr) + ", " + std::to_string(min_lr) + ", " +
                      std::to_string(init_lr));
  }
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("lr schedule: need 0 <= warmup_steps < total_steps, got " +
                      std::to_string(warmup_steps) + " / " + std::to_string(total_steps));
  }
}

double lr_at(const LrSchedule& s, std::int64_t step) {
  if (step < 0 || step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(s.total_steps) + "]");
  }
  if (step < s.warmup_steps) {
    return s.warmup_lr + (s.init_lr - s.warmup_lr) * static_cast<double>(step) /
                             static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.init_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Real>
void AdamW<Real>::reset(const std::vector<NamedParam<Real>>& params) {
  moments_.clear();
  step_ = 0;
  for (const auto& p : params) {
    moments_[p.path] = Moments{std::vector<double>(p.tensor.numel(), 0.0),
                               std::vector<double>(p.tensor.numel(), 0.0)};
  }
}

template <typename Real>
void AdamW<Real>::step(const std::vector<NamedParam<Real>>& params, double lr) {
  for (const auto& p : params) {
    if (!moments_.count(p.path)) continue;
    if (!p.tensor.has_grad()) {
      throw ContractError("adamw: trainable parameter '" + p.path + "' has no gradient");
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (const auto& p : params) {
    auto it = moments_.find(p.path);
    if (it == moments_.end()) continue;
    auto& mo = it->second;
    Tensor<Real> t = p.tensor;
    auto data = t.data();
    auto grad = t.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      double w = static_cast<double>(data[i]) * decay;
      w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      data[i] = static_cast<Real>(w);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace mqe
