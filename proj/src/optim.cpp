#include "dbp/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dbp {

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state, std::size_t step,
                double lr, const AdamWHyper& hyper, std::string_view name) {
  if (step == 0) throw std::invalid_argument("adamw_step: step is 1-based");
  const bool zero_grad = grad.empty();
  if (!zero_grad && grad.size() != param.size()) {
    throw std::invalid_argument("adamw_step: gradient size mismatch for '" + std::string(name) + "'");
  }
  if (!zero_grad) {
    for (double g : grad) {
      if (!std::isfinite(g)) throw std::domain_error("adamw_step: non-finite gradient in '" + std::string(name) + "'");
    }
  }
  if (state.m.size() != param.size()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * hyper.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = zero_grad ? 0.0 : grad[i];
    param[i] *= decay;
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
  }
}

void AdamW::step(ParamStore& params, double lr) {
  auto& entries = params.entries();
  if (state_.size() != entries.size()) state_.resize(entries.size());
  ++step_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, t] = entries[i];
    adamw_step(t.mutable_data(), t.grad(), state_[i], step_, lr, hyper_, name);
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup_steps) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (warmup_steps >= total_steps) {
    throw std::invalid_argument("cosine_lr: warmup_steps " + std::to_string(warmup_steps) +
                                " must be below total_steps " + std::to_string(total_steps));
  }
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return std::max(0.0, 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace dbp
