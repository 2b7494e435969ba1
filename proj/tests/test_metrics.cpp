#include <cmath>
#include <random>

#include "doctest.h"
#include "dbp/bev.hpp"
#include "dbp/metrics.hpp"

using namespace dbp;

namespace {

Trajectory straight(double v, double y = 0.0) {
  Trajectory t;
  t.dt = 0.5;
  for (int k = 1; k <= 6; ++k) t.waypoints.push_back({v * 0.5 * k, y});
  return t;
}

AgentTruth stationary(Vec2 c, double l, double w, double h = 0.0) {
  const auto box = OrientedRect::make(c, l, w, h);
  return {box, AgentClass::Vehicle, std::vector<OrientedRect>(6, box)};
}

// Convex polygons intersect iff an edge pair crosses or one contains a vertex of the other.
double cross(Vec2 o, Vec2 a, Vec2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool segments_cross(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
  const double d1 = cross(c, d, a), d2 = cross(c, d, b), d3 = cross(a, b, c), d4 = cross(a, b, d);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

bool inside(const std::vector<Vec2>& poly, Vec2 p) {
  for (std::size_t i = 0; i < poly.size(); ++i)
    if (cross(poly[i], poly[(i + 1) % poly.size()], p) < 0) return false;
  return true;
}

bool oracle_overlap(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (segments_cross(a[i], a[(i + 1) % a.size()], b[j], b[(j + 1) % b.size()])) return true;
  return inside(a, b[0]) || inside(b, a[0]);
}

std::vector<Vec2> corners(Vec2 c, double l, double w, double h) {
  const double ch = std::cos(h), sh = std::sin(h);
  std::vector<Vec2> out;
  for (auto [sx, sy] : {std::pair{-1.0, -1.0}, {1.0, -1.0}, {1.0, 1.0}, {-1.0, 1.0}}) {
    const double dx = sx * l / 2, dy = sy * w / 2;
    out.push_back({c.x + dx * ch - dy * sh, c.y + dx * sh + dy * ch});
  }
  return out;
}

}  // namespace

TEST_CASE("l2 error") {
  const Trajectory gt = straight(4.0);
  for (double e : l2_error(gt, gt)) CHECK(e == 0.0);
  for (double e : l2_error(straight(4.0, 1.0), gt)) CHECK(e == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    Trajectory a, b;
    a.dt = b.dt = 0.5;
    for (int k = 0; k < 6; ++k) {
      a.waypoints.push_back({g(rng), g(rng)});
      b.waypoints.push_back({g(rng), g(rng)});
    }
    const auto e = l2_error(a, b);
    // 1 s, 2 s and 3 s are waypoints 2, 4 and 6 at 0.5 s steps.
    for (int h = 0; h < 3; ++h) {
      const std::size_t k = 2 * h + 1;
      const double dx = a.waypoints[k].x - b.waypoints[k].x, dy = a.waypoints[k].y - b.waypoints[k].y;
      CHECK(e[h] == doctest::Approx(std::sqrt(dx * dx + dy * dy)).epsilon(1e-14));
    }
    // Shifting both leaves the error unchanged.
    Trajectory as = a, bs = b;
    for (auto* t : {&as, &bs})
      for (Vec2& p : t->waypoints) p = {p.x + 7.0, p.y - 2.0};
    const auto es = l2_error(as, bs);
    for (int h = 0; h < 3; ++h) CHECK(es[h] == doctest::Approx(e[h]).epsilon(1e-12));
  }
}

TEST_CASE("l2 error rejects unreachable horizons") {
  Trajectory shortp;
  shortp.dt = 0.5;
  for (int k = 1; k <= 4; ++k) shortp.waypoints.push_back({1.0 * k, 0.0});
  CHECK_THROWS_AS(l2_error(shortp, shortp), std::invalid_argument);
  CHECK_THROWS_AS(l2_error(straight(1.0), shortp), std::invalid_argument);
  CHECK(horizon_index(3.0, 0.5, 6) == 5);
  CHECK(horizon_index(1.0, 0.5, 6) == 1);
  CHECK_THROWS_AS(horizon_index(3.5, 0.5, 6), std::invalid_argument);
}

TEST_CASE("collision without agents or with distant agents") {
  const Trajectory p = straight(4.0);
  for (bool c : collision_check(p, {})) CHECK_FALSE(c);
  for (bool c : collision_check(p, {stationary({200.0, 50.0}, 4.0, 2.0)})) CHECK_FALSE(c);
}

TEST_CASE("collision with a stationary agent first reached at 1.5 s") {
  // Ego front reaches 6.04 m at 1 s and 8.04 m at 1.5 s; the agent spans x in [7, 8].
  const auto c = collision_check(straight(4.0), {stationary({7.5, 0.0}, 1.0, 1.0)});
  CHECK_FALSE(c[0]);
  CHECK(c[1]);
  CHECK(c[2]);
}

TEST_CASE("collision flags match a polygon intersection oracle and are monotone") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> pos(-2.0, 14.0), lat(-4.0, 4.0), head(-3.0, 3.0), size(0.5, 4.0);
  int hits = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const double v = 1.0 + 4.0 * std::abs(head(rng)) / 3.0;
    const double kappa = head(rng) * 0.02;
    Trajectory p;
    p.dt = 0.5;
    double yaw = 0.0;
    Vec2 at{};
    for (int k = 0; k < 6; ++k) {
      yaw += v * kappa * 0.5;
      at = {at.x + v * 0.5 * std::cos(yaw), at.y + v * 0.5 * std::sin(yaw)};
      p.waypoints.push_back(at);
    }
    std::vector<AgentTruth> agents;
    for (int i = 0; i < 2; ++i) {
      AgentTruth a;
      a.cls = AgentClass::Vehicle;
      Vec2 c{pos(rng), lat(rng)};
      const double l = size(rng), w = size(rng), h = head(rng);
      const Vec2 vel{lat(rng) * 0.3, lat(rng) * 0.3};
      a.box = OrientedRect::make(c, l, w, h);
      for (int k = 1; k <= 6; ++k)
        a.future.push_back(OrientedRect::make({c.x + vel.x * 0.5 * k, c.y + vel.y * 0.5 * k}, l, w, h));
      agents.push_back(a);
    }
    const auto flags = collision_check(p, agents);
    std::array<bool, 6> step{};
    Vec2 prev{};
    double h = 0.0;
    for (int k = 0; k < 6; ++k) {
      const Vec2 q = p.waypoints[k];
      if (std::hypot(q.x - prev.x, q.y - prev.y) > 1e-6) h = std::atan2(q.y - prev.y, q.x - prev.x);
      prev = q;
      const auto ego = corners(q, kEgoLength, kEgoWidth, h);
      for (const auto& a : agents)
        step[k] = step[k] ||
                  oracle_overlap(ego, corners(a.future[k].center, a.future[k].half_extents.x * 2,
                                              a.future[k].half_extents.y * 2, a.future[k].heading));
    }
    for (int hz = 0; hz < 3; ++hz) {
      bool any = false;
      for (int k = 0; k <= 2 * hz + 1; ++k) any = any || step[k];
      CHECK(flags[hz] == any);
    }
    CHECK((!flags[0] || flags[1]));
    CHECK((!flags[1] || flags[2]));
    hits += flags[2];
  }
  CHECK(hits > 20);
  CHECK(hits < 280);
}

TEST_CASE("metrics accumulation") {
  MetricsAccumulator acc;
  acc.add({1.0, 2.0, 3.0}, {false, true, true});
  acc.add({3.0, 4.0, 5.0}, {false, false, true});
  const PlanMetrics m = acc.result();
  CHECK(m.count == 2);
  CHECK(m.l2_at[0] == 2.0);
  CHECK(m.l2_at[2] == 4.0);
  CHECK(m.l2_avg == doctest::Approx(3.0));
  CHECK(m.collision_at[0] == 0.0);
  CHECK(m.collision_at[1] == 0.5);
  CHECK(m.collision_at[2] == 1.0);
  CHECK(m.collision_avg == doctest::Approx(0.5));
  MetricsAccumulator other;
  other.add({0.0, 0.0, 0.0}, {true, true, true});
  acc.merge(other);
  CHECK(acc.result().collision_at[0] == doctest::Approx(1.0 / 3.0));
  CHECK(MetricsAccumulator{}.result().count == 0);
}
