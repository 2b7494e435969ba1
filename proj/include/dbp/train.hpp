#pragma once

// Supervised training and open-loop evaluation of a Model on synthetic
// scenarios.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbp/losses.hpp"
#include "dbp/metrics.hpp"
#include "dbp/model.hpp"
#include "dbp/world.hpp"

namespace dbp {

struct OptimConfig {
  double lr = 2e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t warmup_steps = 500;  // clamped to a tenth of the run
  std::size_t epochs = 200;
  std::size_t batch_size = 8;  // gradients accumulated per optimizer step
  std::uint64_t seed = 1;      // data order
  std::size_t eval_every = 10; // epochs between validation passes, 0 disables

  void validate() const;
};

// Per-sample loss components; plan includes the branch-level supervision.
LossParts training_losses(const Model& model, const ForwardOutputs& out, const Scenario& s, const LossWeights& w);

inline constexpr std::array<const char*, 8> kLossColumns = {"total", "det",     "map",     "mot",
                                                            "plan",  "distill", "autoreg", "lr"};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double total = 0, det = 0, map = 0, mot = 0, plan = 0, distill = 0, autoreg = 0, lr = 0;
  double val_l2 = -1.0;  // negative when not evaluated this epoch
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t epoch, const std::string& component);
  std::size_t epoch;
  std::string component;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  // Called after a validation pass that improved the best L2.
  std::function<void(const EpochLog&)> on_best;
};

struct TrainSummary {
  std::vector<EpochLog> epochs;
  double best_val_l2 = -1.0;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

// Effective warmup: min(requested, total_steps / 10).
std::size_t effective_warmup(std::size_t requested, std::size_t total_steps);

TrainSummary train_model(Model& model, const std::vector<Scenario>& train, const std::vector<Scenario>& val,
                         const OptimConfig& opt, const LossWeights& w, const TrainHooks& hooks = {});

using Planner = std::function<Trajectory(const Scenario&)>;

struct ScenarioResult {
  std::array<double, 3> l2{};
  std::array<bool, 3> collision{};
};

// Runs planner over every scenario on up to `threads` workers (0 reads
// DBP_THREADS, default 1). Results are in input order.
std::vector<ScenarioResult> run_planner(const Planner& planner, const std::vector<Scenario>& scenarios,
                                        std::size_t threads = 0);
PlanMetrics summarize(const std::vector<ScenarioResult>& results);

std::size_t eval_threads();

// Model planner under an optional ego perturbation.
Planner model_planner(const Model& model, PerturbMode mode = PerturbMode::None, ForwardOptions opt = {});

}  // namespace dbp
