#pragma once

// Synthetic BEV driving scenarios and their JSON-Lines persistence.
//
// The ego sits at the origin heading +x at t = 0. Lanes are 3.5 m wide:
// dividers at y = +-1.75, road boundaries at y = +-5.25. Turn episodes bend
// every lane line into concentric arcs that follow the ego path.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dbp/bev.hpp"
#include "dbp/scene_types.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

struct WorldConfig {
  BevSpec spec;
  std::size_t horizon = 6;  // planning waypoints
  double dt = 0.5;
  std::size_t n_map = 8;
  std::size_t n_point = 20;
  double speed_min = 2.0;
  double speed_max = 4.5;
  double kappa_min = 0.03;
  double kappa_max = 0.08;
  double difficulty = 0.5;  // [0, 1]: agent count and obstacle frequency
  std::size_t max_agents = 6;
  std::size_t history_steps = 4;  // past ego poses, dt apart

  void validate() const;
};

enum ObsChannel : std::size_t {
  kObsAgents = 0,
  kObsAgentsPast,  // agent footprints 1 s earlier
  kObsDivider,
  kObsBoundary,
  kObsCrossing,
  kObsEgoTrail,
  kObsDistance,  // meters to the nearest agent, clipped
  kObsChannels
};
inline constexpr double kDistanceClip = 5.0;

struct SensorObservation {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> data;  // channels x height x width
  Tensor tensor() const { return Tensor::from({channels, height, width}, data); }
  friend bool operator==(const SensorObservation&, const SensorObservation&) = default;
};

struct Scenario {
  std::uint64_t seed = 0;
  Command command = Command::Straight;
  EgoStatus ego;
  Trajectory gt_plan;
  std::vector<AgentTruth> agents;
  MapInstanceSet map;
  std::vector<Vec2> history;  // ego positions at t = -dt, -2dt, ...
  bool obstacle = false;      // blocked-lane variant
  SensorObservation obs;      // derived, never persisted

  std::vector<OrientedRect> agent_boxes() const;
};

// Deterministic in (seed, command, config).
Scenario generate_scenario(std::uint64_t seed, Command command, const WorldConfig& cfg);
// Draws the command from the seed: turns with probability turn_fraction, split evenly left/right.
Scenario generate_scenario(std::uint64_t seed, double turn_fraction, const WorldConfig& cfg);

// Seeds first_seed .. first_seed + n - 1. Exactly floor(n * turn_fraction)
// turn episodes (alternating left/right), the rest straight, in an order
// shuffled by first_seed.
std::vector<Scenario> generate_dataset(std::uint64_t first_seed, std::size_t n, double turn_fraction,
                                       const WorldConfig& cfg);

// Point on a constant-curvature path after arc length s, heading +x at the
// origin; kappa > 0 turns left.
Vec2 arc_point(double kappa, double s);

SensorObservation rasterize(const Scenario& s, const BevSpec& spec);

void save_dataset(const std::vector<Scenario>& scenarios, const std::filesystem::path& path);
// Rasters are regenerated with spec. Throws std::runtime_error naming the
// line on malformed input or a schema mismatch.
std::vector<Scenario> load_dataset(const std::filesystem::path& path, const BevSpec& spec);

inline constexpr std::string_view kDatasetSchema = "dbp-scn-1";

enum class PerturbMode { None, Zero, Half, OneAndHalf, Abs100 };
inline constexpr PerturbMode kPerturbModes[] = {PerturbMode::None, PerturbMode::Zero, PerturbMode::Half,
                                                PerturbMode::OneAndHalf, PerturbMode::Abs100};
std::string_view perturb_name(PerturbMode m);
PerturbMode parse_perturb(std::string_view s);  // throws std::invalid_argument
EgoStatus perturb_ego(const EgoStatus& ego, PerturbMode mode);

}  // namespace dbp
