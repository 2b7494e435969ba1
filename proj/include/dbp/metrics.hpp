#pragma once

// Open-loop planning metrics: displacement error and collision rate at 1, 2
// and 3 seconds.

#include <array>
#include <cstddef>
#include <vector>

#include "dbp/scene_types.hpp"

namespace dbp {

inline constexpr std::array<double, 3> kMetricHorizons = {1.0, 2.0, 3.0};
inline constexpr double kEgoLength = 4.08;
inline constexpr double kEgoWidth = 1.73;

// Waypoint index for a horizon in seconds: round(h / dt) - 1. Throws
// std::invalid_argument when the horizon is not reachable.
std::size_t horizon_index(double horizon, double dt, std::size_t steps);

// Euclidean error at each of kMetricHorizons. Both trajectories must share
// their step count and dt.
std::array<double, 3> l2_error(const Trajectory& pred, const Trajectory& gt);

// Ego boxes along pred, heading from waypoint differences.
std::vector<OrientedRect> ego_footprints(const Trajectory& pred, double length = kEgoLength,
                                         double width = kEgoWidth);

// Cumulative: flag h is set when the ego box overlaps an agent future box at
// any step up to horizon h. Agents with a short future keep their last box.
std::array<bool, 3> collision_check(const Trajectory& pred, const std::vector<AgentTruth>& agents,
                                    double length = kEgoLength, double width = kEgoWidth);

struct PlanMetrics {
  std::array<double, 3> l2_at{};
  double l2_avg = 0.0;
  std::array<double, 3> collision_at{};
  double collision_avg = 0.0;
  std::size_t count = 0;
};

class MetricsAccumulator {
 public:
  void add(const std::array<double, 3>& l2, const std::array<bool, 3>& collision);
  void merge(const MetricsAccumulator& other);
  std::size_t count() const { return count_; }
  PlanMetrics result() const;

 private:
  std::array<double, 3> l2_sum_{};
  std::array<double, 3> col_sum_{};
  std::size_t count_ = 0;
};

}  // namespace dbp
