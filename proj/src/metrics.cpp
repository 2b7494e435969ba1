#include "dbp/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dbp/bev.hpp"

namespace dbp {

std::size_t horizon_index(double horizon, double dt, std::size_t steps) {
  if (!(dt > 0.0) || !(horizon > 0.0)) throw std::invalid_argument("horizon and dt must be positive");
  const double r = horizon / dt;
  const double k = std::round(r);
  if (std::fabs(r - k) > 1e-9 || k < 1.0 || k > static_cast<double>(steps)) {
    throw std::invalid_argument("horizon " + std::to_string(horizon) + " s is beyond " + std::to_string(steps) +
                                " steps of " + std::to_string(dt) + " s");
  }
  return static_cast<std::size_t>(k) - 1;
}

std::array<double, 3> l2_error(const Trajectory& pred, const Trajectory& gt) {
  if (pred.waypoints.size() != gt.waypoints.size() || pred.dt != gt.dt) {
    throw std::invalid_argument("l2_error: trajectories differ in length or dt");
  }
  std::array<double, 3> out{};
  for (std::size_t h = 0; h < 3; ++h) {
    const std::size_t k = horizon_index(kMetricHorizons[h], gt.dt, gt.waypoints.size());
    out[h] = std::hypot(pred.waypoints[k].x - gt.waypoints[k].x, pred.waypoints[k].y - gt.waypoints[k].y);
  }
  return out;
}

std::vector<OrientedRect> ego_footprints(const Trajectory& pred, double length, double width) {
  const auto headings = path_headings(pred.waypoints);
  std::vector<OrientedRect> out;
  for (std::size_t k = 0; k < pred.waypoints.size(); ++k)
    out.push_back(OrientedRect::make(pred.waypoints[k], length, width, headings[k]));
  return out;
}

std::array<bool, 3> collision_check(const Trajectory& pred, const std::vector<AgentTruth>& agents, double length,
                                    double width) {
  std::array<std::size_t, 3> idx{};
  for (std::size_t h = 0; h < 3; ++h) idx[h] = horizon_index(kMetricHorizons[h], pred.dt, pred.waypoints.size());
  const auto ego = ego_footprints(pred, length, width);
  std::size_t first_hit = ego.size();
  for (std::size_t k = 0; k < ego.size() && first_hit == ego.size(); ++k)
    for (const auto& a : agents) {
      const OrientedRect& box = a.future.empty() ? a.box : a.future[std::min(k, a.future.size() - 1)];
      if (rects_overlap(ego[k], box)) {
        first_hit = k;
        break;
      }
    }
  std::array<bool, 3> out{};
  for (std::size_t h = 0; h < 3; ++h) out[h] = first_hit <= idx[h];
  return out;
}

void MetricsAccumulator::add(const std::array<double, 3>& l2, const std::array<bool, 3>& collision) {
  for (std::size_t h = 0; h < 3; ++h) {
    l2_sum_[h] += l2[h];
    col_sum_[h] += collision[h] ? 1.0 : 0.0;
  }
  ++count_;
}

void MetricsAccumulator::merge(const MetricsAccumulator& other) {
  for (std::size_t h = 0; h < 3; ++h) {
    l2_sum_[h] += other.l2_sum_[h];
    col_sum_[h] += other.col_sum_[h];
  }
  count_ += other.count_;
}

PlanMetrics MetricsAccumulator::result() const {
  PlanMetrics m;
  m.count = count_;
  if (count_ == 0) return m;
  const double n = static_cast<double>(count_);
  for (std::size_t h = 0; h < 3; ++h) {
    m.l2_at[h] = l2_sum_[h] / n;
    m.collision_at[h] = col_sum_[h] / n;
  }
  m.l2_avg = (m.l2_at[0] + m.l2_at[1] + m.l2_at[2]) / 3.0;
  m.collision_avg = (m.collision_at[0] + m.collision_at[1] + m.collision_at[2]) / 3.0;
  return m;
}

}  // namespace dbp
