#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "dbp/params.hpp"

namespace dbp {

struct AdamWHyper {
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// One decoupled-weight-decay Adam update of a single parameter buffer.
// step is 1-based and drives bias correction. Decay multiplies the parameter
// by (1 - lr * weight_decay) before the adaptive update. Throws
// std::domain_error naming the parameter if any gradient entry is non-finite.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state, std::size_t step,
                double lr, const AdamWHyper& hyper, std::string_view name);

class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

  // Parameters without an accumulated gradient are treated as zero-gradient.
  void step(ParamStore& params, double lr);
  std::size_t steps_taken() const { return step_; }

 private:
  AdamWHyper hyper_;
  std::vector<AdamMoments> state_;
  std::size_t step_ = 0;
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0 at
// total_steps. Requires total_steps > 0, warmup_steps < total_steps and
// step <= total_steps; throws std::invalid_argument otherwise.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup_steps = 500);

}  // namespace dbp
