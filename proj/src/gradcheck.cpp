#include "dbp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace dbp {

GradCheckResult check_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& opts) {
  std::vector<Tensor> in = inputs;
  for (auto& t : in) t.zero_grad();
  const Tensor loss = fn(in);
  backward(loss);

  GradCheckResult r;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!in[i].requires_grad()) continue;
    const std::vector<double> analytic = in[i].has_grad() ? std::vector<double>(in[i].grad().begin(), in[i].grad().end())
                                                          : std::vector<double>(in[i].numel(), 0.0);
    auto vals = in[i].mutable_data();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[j] = orig + opts.step;
        fp = fn(in).item();
        vals[j] = orig - opts.step;
        fm = fn(in).item();
        vals[j] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = analytic[j];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), opts.floor});
      ++r.entries;
      if (err > r.max_rel_error || !std::isfinite(err)) {
        r.max_rel_error = std::isfinite(err) ? err : INFINITY;
        std::ostringstream os;
        os << "input " << i << "[" << j << "]: analytic " << a << " numeric " << numeric;
        r.worst = os.str();
      }
    }
  }
  for (auto& t : in) t.zero_grad();
  return r;
}

Tensor random_projection(const Tensor& out, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(out.numel());
  for (double& x : w) x = dist(rng);
  return sum(out * Tensor::from(out.shape(), std::move(w)));
}

}  // namespace dbp
