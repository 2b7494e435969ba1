#pragma once

// Central finite-difference checking of tape gradients.
//
// Error measure per element: |analytic - numeric| / max(|analytic|, |numeric|, floor).
// The floor keeps entries whose true derivative is ~0 from dividing roundoff
// by roundoff.

#include <functional>
#include <string>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

struct GradCheckOptions {
  double step = 1e-4;
  double floor = 1e-3;
  double tolerance = 1e-5;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::string worst;  // "input i[j]: analytic a numeric n"
  bool passed(double tol) const { return max_rel_error <= tol; }
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// inputs are leaves; their requires_grad flags select which get checked.
// fn must return a scalar and be a pure function of the input values.
GradCheckResult check_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& opts = {});

// Reduces a tensor-valued output to a scalar with fixed pseudo-random weights
// so every output entry contributes to the checked derivative.
Tensor random_projection(const Tensor& out, unsigned seed);

}  // namespace dbp
