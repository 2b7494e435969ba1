#pragma once

// Plain value types shared by geometry, losses, the model and the world
// generator. Metric quantities are meters in the ego frame at t = 0
// (+x forward, +y left), seconds, and radians.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dbp {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

// Heading wrapped to (-pi, pi].
double normalize_angle(double a);

struct OrientedRect {
  Vec2 center;
  Vec2 half_extents;  // (length / 2, width / 2), both > 0
  double heading = 0.0;

  // Validates extents and normalizes heading; throws std::invalid_argument.
  static OrientedRect make(Vec2 center, double length, double width, double heading);
  friend bool operator==(const OrientedRect&, const OrientedRect&) = default;
};

enum class Command : std::uint8_t { Straight = 0, Left = 1, Right = 2 };
inline constexpr std::size_t kNumCommands = 3;
std::string_view command_name(Command c);
Command parse_command(std::string_view s);
inline bool is_turn(Command c) { return c != Command::Straight; }

struct EgoStatus {
  Vec2 velocity;              // m/s
  double acceleration = 0.0;  // m/s^2, longitudinal
  double yaw_rate = 0.0;      // rad/s
  Command command = Command::Straight;
  friend bool operator==(const EgoStatus&, const EgoStatus&) = default;
};

struct Trajectory {
  std::vector<Vec2> waypoints;  // waypoint k sits at t = (k + 1) * dt
  double dt = 0.5;
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// Heading of each waypoint from its displacement to the previous one (the
// first from the origin). Steps shorter than min_step keep the previous
// heading, starting from 0.
std::vector<double> path_headings(const std::vector<Vec2>& waypoints, double min_step = 1e-6);

enum class MapClass : std::uint8_t { LaneDivider = 0, Boundary = 1, Crossing = 2 };
inline constexpr std::size_t kNumMapClasses = 3;

struct MapInstanceSet {
  std::size_t n_map = 0;
  std::size_t n_point = 0;
  std::vector<double> points;  // n_map x n_point x 2, row-major
  std::vector<MapClass> classes;
  std::vector<std::uint8_t> valid;

  static MapInstanceSet empty(std::size_t n_map, std::size_t n_point);
  Vec2 point(std::size_t i, std::size_t j) const {
    const std::size_t o = (i * n_point + j) * 2;
    return {points[o], points[o + 1]};
  }
  std::size_t valid_count() const;
  friend bool operator==(const MapInstanceSet&, const MapInstanceSet&) = default;
};

enum class AgentClass : std::uint8_t { Vehicle = 0, Pedestrian = 1 };
inline constexpr std::size_t kNumAgentClasses = 2;

struct AgentTruth {
  OrientedRect box;
  AgentClass cls = AgentClass::Vehicle;
  std::vector<OrientedRect> future;  // pose at t = (k + 1) * dt
  friend bool operator==(const AgentTruth&, const AgentTruth&) = default;
};

}  // namespace dbp
