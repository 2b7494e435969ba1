#pragma once

// Training objectives. Every loss returns a rank-0 scalar tensor.

#include <cstddef>
#include <string>
#include <vector>

#include "dbp/bev.hpp"
#include "dbp/scene_types.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

struct LossWeights {
  // distillation
  double alpha = 0.01;
  double beta = 0.1;
  double gamma = 0.01;
  // autoregressive mapping: delta on the masked map term, lambda on GWD
  double delta = 0.01;
  double lambda = 0.01;
  // task weights
  double det = 1.0;
  double map = 1.0;
  double mot = 1.0;
  double plan = 1.0;
  double aux = 1.0;
  double eps = 1.0;          // mask normalizer smoothing, in coordinate counts
  double background = 0.05;  // dense distillation weight outside agent boxes

  // Throws std::invalid_argument on a negative or non-finite weight.
  void validate() const;
};

// ---- distillation ----------------------------------------------------------

// 1 for cells whose center lies in any box, 0 elsewhere (H x W, row-major).
std::vector<std::uint8_t> foreground_cells(const BevSpec& spec, const std::vector<OrientedRect>& boxes);

// Center and four corners of every box as grid points, clamped to the grid.
std::vector<Vec2> agent_keypoints(const BevSpec& spec, const std::vector<OrientedRect>& boxes);

Tensor distill_df(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes,
                  double background = 0.05);
// keypoints are grid points.
Tensor distill_ik(const BevGrid& student, const BevGrid& teacher, const std::vector<Vec2>& keypoints);
Tensor distill_ic(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes);

struct DistillParts {
  Tensor df, ik, ic, total;
};
// The teacher is detached before all three terms.
DistillParts distill_total(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes,
                           const LossWeights& w);

// ---- autoregressive mapping ------------------------------------------------

// Ego perception box at every waypoint: BEV-window sized, centered on the
// waypoint, heading from path_headings.
std::vector<OrientedRect> perception_boxes(const std::vector<Vec2>& waypoints, const BevSpec& spec);
std::vector<Vec2> to_points(const Tensor& traj);  // T x 2 -> waypoints

// pred_traj: T x 2. pred_map: n_map x n_point x 2 aligned row-for-row with gt_map.
Tensor autoregressive_map_loss(const Tensor& pred_traj, const Trajectory& gt_traj, const Tensor& pred_map,
                               const MapInstanceSet& gt_map, const BevSpec& spec, double eps = 1.0);

// Mean over waypoints of log(1 + gwd) between predicted and true perception boxes.
Tensor autoregressive_gwd_loss(const Tensor& pred_traj, const Trajectory& gt_traj, const BevSpec& spec);

// ---- matching and supervised losses ----------------------------------------

// cost is n x m row-major. Returns, per row, its assigned column or -1; exactly
// min(n, m) rows are assigned. Throws std::invalid_argument on non-finite cost.
std::vector<long> hungarian_match(const std::vector<double>& cost, std::size_t n, std::size_t m);
double assignment_cost(const std::vector<double>& cost, std::size_t m, const std::vector<long>& assign);

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets);  // mean over rows

struct AgentPredictions {
  Tensor boxes;   // N x 5: cx, cy, length, width, heading
  Tensor logits;  // N x (kNumAgentClasses + 1), last column is no-object
  Tensor motion;  // N x T x 2 displacement of the center from t = 0
};

struct MapPredictions {
  Tensor points;  // N x n_point x 2
  Tensor logits;  // N x (kNumMapClasses + 1), last column is no-object
};

struct PerceptionLosses {
  Tensor det, map, mot;
  std::vector<long> agent_match;  // per ground-truth agent, its prediction
  std::vector<long> map_match;    // per ground-truth instance slot, its prediction or -1 when invalid
};

PerceptionLosses perception_losses(const AgentPredictions& agents, const MapPredictions& maps,
                                   const std::vector<AgentTruth>& gt_agents, const MapInstanceSet& gt_map);

// Prediction rows reordered to line up with gt_map slots; unmatched slots
// take prediction 0 and are ignored downstream because they are invalid.
Tensor aligned_map_points(const MapPredictions& maps, const std::vector<long>& map_match);

struct PlanningLoss {
  Tensor loss;
  std::size_t winner = 0;
};

// modes: N_mode x T x 2, scores: N_mode. Winner-takes-all on summed L1 with
// the lowest index winning ties; loss = L1(winner) / T + CE(scores, winner).
PlanningLoss planning_loss(const Tensor& modes, const Tensor& scores, const Trajectory& gt);

struct LossParts {
  Tensor det, map, mot, plan, distill, autoreg;
};

// Throws std::domain_error naming the first non-finite part.
Tensor total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace dbp
