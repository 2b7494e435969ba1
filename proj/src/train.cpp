#include "dbp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <thread>

#include "dbp/optim.hpp"

namespace dbp {

void OptimConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("optimizer config: " + msg);
  };
  need(std::isfinite(lr) && lr >= 0.0, "lr must be finite and non-negative");
  need(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay must be non-negative");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  need(epochs > 0, "epochs must be positive");
  need(batch_size > 0, "batch_size must be positive");
}

LossParts training_losses(const Model& model, const ForwardOutputs& out, const Scenario& s, const LossWeights& w) {
  const ModelConfig& cfg = model.config();
  LossParts p;
  const PerceptionLosses perc = perception_losses(out.agents, out.maps, s.agents, s.map);
  p.det = perc.det;
  p.map = perc.map;
  p.mot = perc.mot;

  const PlanningLoss final_plan = planning_loss(out.plan.trajectories, out.plan.scores, s.gt_plan);
  p.plan = final_plan.loss;
  if (cfg.flags.dual_branch) {
    p.plan = p.plan + planning_loss(out.scene.trajectories, out.scene.scores, s.gt_plan).loss;
    if (out.ego) p.plan = p.plan + planning_loss(out.ego->trajectories, out.ego->scores, s.gt_plan).loss;
  }

  if (cfg.flags.distill && out.b_wes) p.distill = distill_total(*out.b_woes, *out.b_wes, s.agent_boxes(), w).total;

  if (cfg.flags.autoregressive_map) {
    const std::size_t k = final_plan.winner, T = cfg.horizon;
    const Tensor traj = reshape(slice(out.plan.trajectories, 0, k, k + 1), {T, 2});
    const Tensor aligned = aligned_map_points(out.maps, perc.map_match);
    p.autoreg = autoregressive_map_loss(traj, s.gt_plan, aligned, s.map, cfg.spec, w.eps) * w.delta +
                autoregressive_gwd_loss(traj, s.gt_plan, cfg.spec) * w.lambda;
  }
  return p;
}

NonFiniteLoss::NonFiniteLoss(std::size_t e, const std::string& c)
    : std::runtime_error("non-finite " + c + " loss at epoch " + std::to_string(e)), epoch(e), component(c) {}

std::size_t effective_warmup(std::size_t requested, std::size_t total_steps) {
  return std::min(requested, total_steps / 10);
}

namespace {

double value_of(const Tensor& t) { return t.defined() ? t[0] : 0.0; }

}  // namespace

TrainSummary train_model(Model& model, const std::vector<Scenario>& train, const std::vector<Scenario>& val,
                         const OptimConfig& opt, const LossWeights& w, const TrainHooks& hooks) {
  opt.validate();
  w.validate();
  if (train.empty()) throw std::invalid_argument("train_model: empty training set");

  const std::size_t steps_per_epoch = (train.size() + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total = steps_per_epoch * opt.epochs;
  const std::size_t warmup = effective_warmup(opt.warmup_steps, total);
  AdamW adam({opt.weight_decay, opt.beta1, opt.beta2, 1e-8});
  ParamStore& ps = model.params();

  std::vector<Tensor> obs;
  obs.reserve(train.size());
  for (const auto& s : train) obs.push_back(s.obs.tensor());

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed);

  TrainSummary summary;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * opt.batch_size, hi = std::min(train.size(), lo + opt.batch_size);
      const double scale = 1.0 / static_cast<double>(hi - lo);
      ps.zero_grad();
      for (std::size_t i = lo; i < hi; ++i) {
        const Scenario& s = train[order[i]];
        const ForwardOutputs out = model.forward(obs[order[i]], s.ego, s.command);
        const LossParts parts = training_losses(model, out, s, w);
        const std::pair<const char*, const Tensor*> named[] = {{"det", &parts.det},   {"map", &parts.map},
                                                               {"mot", &parts.mot},   {"plan", &parts.plan},
                                                               {"distill", &parts.distill},
                                                               {"autoreg", &parts.autoreg}};
        for (const auto& [name, t] : named)
          if (t->defined() && !std::isfinite((*t)[0])) throw NonFiniteLoss(epoch, name);
        const Tensor loss = total_loss(parts, w);
        if (!std::isfinite(loss.item())) throw NonFiniteLoss(epoch, "total");
        backward(loss * scale);
        log.total += loss.item();
        log.det += value_of(parts.det);
        log.map += value_of(parts.map);
        log.mot += value_of(parts.mot);
        log.plan += value_of(parts.plan);
        log.distill += value_of(parts.distill);
        log.autoreg += value_of(parts.autoreg);
      }
      ++step;
      log.lr = cosine_lr(step, total, opt.lr, warmup);
      adam.step(ps, log.lr);
    }
    const double n = static_cast<double>(train.size());
    for (double* v : {&log.total, &log.det, &log.map, &log.mot, &log.plan, &log.distill, &log.autoreg}) *v /= n;

    const bool evaluate = !val.empty() && opt.eval_every > 0 && (epoch % opt.eval_every == 0 || epoch == opt.epochs);
    if (evaluate) {
      log.val_l2 = summarize(run_planner(model_planner(model), val)).l2_avg;
      if (summary.best_epoch == 0 || log.val_l2 < summary.best_val_l2) {
        summary.best_val_l2 = log.val_l2;
        summary.best_epoch = epoch;
        if (hooks.on_best) hooks.on_best(log);
      }
    }
    summary.epochs.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
  }
  summary.steps = step;
  return summary;
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("DBP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

std::vector<ScenarioResult> run_planner(const Planner& planner, const std::vector<Scenario>& scenarios,
                                        std::size_t threads) {
  if (threads == 0) threads = eval_threads();
  threads = std::max<std::size_t>(1, std::min(threads, scenarios.size()));
  std::vector<ScenarioResult> results(scenarios.size());
  auto work = [&](std::size_t t) {
    for (std::size_t i = t; i < scenarios.size(); i += threads) {
      const Scenario& s = scenarios[i];
      const Trajectory p = planner(s);
      results[i] = {l2_error(p, s.gt_plan), collision_check(p, s.agents)};
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }
  return results;
}

PlanMetrics summarize(const std::vector<ScenarioResult>& results) {
  MetricsAccumulator acc;
  for (const auto& r : results) acc.add(r.l2, r.collision);
  return acc.result();
}

Planner model_planner(const Model& model, PerturbMode mode, ForwardOptions opt) {
  return [&model, mode, opt](const Scenario& s) {
    return model.plan(s.obs.tensor(), perturb_ego(s.ego, mode), s.command, opt);
  };
}

}  // namespace dbp
