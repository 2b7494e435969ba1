#include "dbp/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dbp {

namespace {

using ojson = nlohmann::ordered_json;

constexpr double kLaneWidth = 3.5;
constexpr double kEgoLength = 4.08;
constexpr double kEgoWidth = 1.73;
constexpr double kPastSeconds = 1.0;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

bool inside_window(const BevSpec& spec, Vec2 p) {
  return p.x >= spec.x_min && p.x <= spec.x_max && p.y >= spec.y_min && p.y <= spec.y_max;
}

bool rect_inside_window(const BevSpec& spec, const OrientedRect& r) {
  for (const Vec2& c : rect_polygon(r))
    if (!inside_window(spec, c)) return false;
  return true;
}

Vec2 agent_velocity(const AgentTruth& a, double dt) {
  if (a.future.empty()) return {};
  return (1.0 / dt) * (a.future.front().center - a.box.center);
}

// Lane line offset laterally by d (left positive) from the ego path, from the
// rear window edge forward, clipped to the window and resampled by arc length.
std::vector<Vec2> lane_line(const BevSpec& spec, double kappa, double d, std::size_t n_point) {
  std::vector<Vec2> dense;
  const double step = 0.05;
  for (double x = spec.x_min; x < 0.0; x += step) dense.push_back({x, d});
  const double s_max = kappa == 0.0 ? spec.x_max + 1.0 : std::min(60.0, 0.5 * std::numbers::pi / std::fabs(kappa));
  for (double s = 0.0; s <= s_max; s += step) {
    const Vec2 p = arc_point(kappa, s);
    const double th = kappa * s;
    dense.push_back({p.x - d * std::sin(th), p.y + d * std::cos(th)});
  }
  std::vector<Vec2> run;
  for (const Vec2& p : dense) {
    if (inside_window(spec, p)) run.push_back(p);
    else if (!run.empty()) break;
  }
  if (run.size() < 2) return {};
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < run.size(); ++i) cum.push_back(cum.back() + std::hypot(run[i].x - run[i - 1].x, run[i].y - run[i - 1].y));
  std::vector<Vec2> out;
  std::size_t seg = 1;
  for (std::size_t j = 0; j < n_point; ++j) {
    const double target = cum.back() * static_cast<double>(j) / static_cast<double>(n_point - 1);
    while (seg + 1 < run.size() && cum[seg] < target) ++seg;
    const double len = cum[seg] - cum[seg - 1];
    const double u = len > 0.0 ? std::clamp((target - cum[seg - 1]) / len, 0.0, 1.0) : 0.0;
    out.push_back(run[seg - 1] + u * (run[seg] - run[seg - 1]));
  }
  return out;
}

void set_instance(MapInstanceSet& m, std::size_t slot, MapClass cls, const std::vector<Vec2>& pts) {
  m.classes[slot] = cls;
  m.valid[slot] = 1;
  for (std::size_t j = 0; j < pts.size(); ++j) {
    m.points[(slot * m.n_point + j) * 2] = pts[j].x;
    m.points[(slot * m.n_point + j) * 2 + 1] = pts[j].y;
  }
}

std::vector<OrientedRect> ego_footprints(const Trajectory& plan) {
  const auto heads = path_headings(plan.waypoints);
  std::vector<OrientedRect> out{OrientedRect::make({0.0, 0.0}, kEgoLength, kEgoWidth, 0.0)};
  for (std::size_t i = 0; i < heads.size(); ++i)
    out.push_back(OrientedRect::make(plan.waypoints[i], kEgoLength, kEgoWidth, heads[i]));
  return out;
}

AgentTruth make_agent(AgentClass cls, Vec2 c, Vec2 vel, double length, double width, std::size_t steps, double dt,
                      long stop_step) {
  const double heading = std::hypot(vel.x, vel.y) > 0.0 ? std::atan2(vel.y, vel.x) : 0.0;
  AgentTruth a{OrientedRect::make(c, length, width, heading), cls, {}};
  Vec2 p = c;
  for (std::size_t k = 0; k < steps; ++k) {
    if (stop_step < 0 || static_cast<long>(k) < stop_step) p = p + dt * vel;
    a.future.push_back(OrientedRect::make(p, length, width, heading));
  }
  return a;
}

bool agent_fits(const AgentTruth& a, const std::vector<AgentTruth>& others, const std::vector<OrientedRect>& ego,
                const BevSpec& spec, double dt) {
  const Vec2 past = a.box.center - kPastSeconds * agent_velocity(a, dt);
  const OrientedRect past_box{past, a.box.half_extents, a.box.heading};
  if (!rect_inside_window(spec, a.box) || !rect_inside_window(spec, past_box)) return false;
  for (const auto& f : a.future)
    if (!rect_inside_window(spec, f)) return false;
  for (const auto& o : others) {
    if (rects_overlap(o.box, a.box)) return false;
    for (std::size_t k = 0; k < a.future.size(); ++k)
      if (rects_overlap(o.future[k], a.future[k])) return false;
  }
  if (rects_overlap(ego.front(), a.box)) return false;
  for (std::size_t k = 0; k + 1 < ego.size() && k < a.future.size(); ++k)
    if (rects_overlap(ego[k + 1], a.future[k])) return false;
  return true;
}

void paint_polyline(std::vector<double>& ch, const BevSpec& spec, const std::vector<Vec2>& pts) {
  const std::size_t H = spec.height(), W = spec.width();
  auto mark = [&](Vec2 p) {
    const double cx = std::floor((p.x - spec.x_min) / spec.resolution);
    const double cy = std::floor((p.y - spec.y_min) / spec.resolution);
    if (cx < 0 || cy < 0 || cx >= static_cast<double>(W) || cy >= static_cast<double>(H)) return;
    ch[static_cast<std::size_t>(cy) * W + static_cast<std::size_t>(cx)] = 1.0;
  };
  if (pts.size() == 1) mark(pts[0]);
  const double step = spec.resolution / 4.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const Vec2 a = pts[i - 1], b = pts[i];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const std::size_t n = static_cast<std::size_t>(std::ceil(len / step));
    for (std::size_t k = 0; k <= n; ++k) mark(a + (n == 0 ? 0.0 : static_cast<double>(k) / n) * (b - a));
  }
}

double rect_distance(const OrientedRect& r, Vec2 p) {
  const double c = std::cos(r.heading), s = std::sin(r.heading);
  const Vec2 d = p - r.center;
  const double lx = std::max(std::fabs(c * d.x + s * d.y) - r.half_extents.x, 0.0);
  const double ly = std::max(std::fabs(-s * d.x + c * d.y) - r.half_extents.y, 0.0);
  return std::hypot(lx, ly);
}

ojson pose_json(const OrientedRect& r) { return ojson::array({r.center.x, r.center.y, r.heading}); }

}  // namespace

void WorldConfig::validate() const {
  spec.validate();
  if (horizon == 0 || !(dt > 0.0)) throw std::invalid_argument("world: horizon and dt must be positive");
  if (n_point < 2 || n_map < 5) throw std::invalid_argument("world: need n_point >= 2 and n_map >= 5");
  if (!(speed_min >= 0.0 && speed_max >= speed_min && speed_max <= 20.0))
    throw std::invalid_argument("world: speeds must satisfy 0 <= min <= max <= 20 m/s");
  if (!(kappa_min >= 0.0 && kappa_max >= kappa_min && kappa_max <= 0.2))
    throw std::invalid_argument("world: curvature must satisfy 0 <= min <= max <= 0.2");
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw std::invalid_argument("world: difficulty must be in [0, 1]");
}

std::vector<OrientedRect> Scenario::agent_boxes() const {
  std::vector<OrientedRect> out;
  for (const auto& a : agents) out.push_back(a.box);
  return out;
}

Vec2 arc_point(double kappa, double s) {
  if (std::fabs(kappa) < 1e-12) return {s, 0.0};
  return {std::sin(kappa * s) / kappa, (1.0 - std::cos(kappa * s)) / kappa};
}

Scenario generate_scenario(std::uint64_t seed, Command command, const WorldConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Scenario sc;
  sc.seed = seed;
  sc.command = command;
  const double v = uniform(rng, cfg.speed_min, cfg.speed_max);
  double kappa = 0.0;
  if (command != Command::Straight) {
    kappa = uniform(rng, cfg.kappa_min, cfg.kappa_max) * (command == Command::Left ? 1.0 : -1.0);
  }
  sc.obstacle = command == Command::Straight && uniform(rng, 0.0, 1.0) < 0.5 * cfg.difficulty;
  sc.ego = EgoStatus{{v, 0.0}, 0.0, v * kappa, command};

  const double horizon_s = cfg.dt * static_cast<double>(cfg.horizon);
  sc.gt_plan.dt = cfg.dt;
  for (std::size_t k = 1; k <= cfg.horizon; ++k) {
    const double t = cfg.dt * static_cast<double>(k);
    if (sc.obstacle) {
      const double u = std::min(1.0, t / (0.5 * horizon_s));
      sc.gt_plan.waypoints.push_back({v * t, kLaneWidth * u * u * (3.0 - 2.0 * u)});
    } else {
      sc.gt_plan.waypoints.push_back(arc_point(kappa, v * t));
    }
  }
  for (std::size_t k = 1; k <= cfg.history_steps; ++k) sc.history.push_back({-v * cfg.dt * static_cast<double>(k), 0.0});

  sc.map = MapInstanceSet::empty(cfg.n_map, cfg.n_point);
  const double offsets[4] = {-1.5 * kLaneWidth, -0.5 * kLaneWidth, 0.5 * kLaneWidth, 1.5 * kLaneWidth};
  const MapClass classes[4] = {MapClass::Boundary, MapClass::LaneDivider, MapClass::LaneDivider, MapClass::Boundary};
  std::size_t slot = 0;
  for (int i = 0; i < 4; ++i) {
    const auto pts = lane_line(cfg.spec, kappa, offsets[i], cfg.n_point);
    if (!pts.empty()) set_instance(sc.map, slot++, classes[i], pts);
  }
  const bool crossing = command == Command::Straight && uniform(rng, 0.0, 1.0) < 0.3;
  const double crossing_x = uniform(rng, 4.0, 12.0);
  if (crossing) {
    std::vector<Vec2> pts;
    for (std::size_t j = 0; j < cfg.n_point; ++j) {
      const double u = static_cast<double>(j) / static_cast<double>(cfg.n_point - 1);
      pts.push_back({crossing_x, offsets[0] + u * (offsets[3] - offsets[0])});
    }
    set_instance(sc.map, slot++, MapClass::Crossing, pts);
  }

  const auto ego = ego_footprints(sc.gt_plan);
  if (sc.obstacle) {
    const double x = 0.5 * v * horizon_s + 5.0;
    sc.agents.push_back(make_agent(AgentClass::Vehicle, {x, 0.0}, {}, 4.4, 1.9, cfg.horizon, cfg.dt, -1));
  }
  const std::size_t n_max = 1 + static_cast<std::size_t>(std::lround(cfg.difficulty * static_cast<double>(cfg.max_agents - 1)));
  const std::size_t n_agents = std::uniform_int_distribution<std::size_t>(1, n_max)(rng);
  for (std::size_t i = 0; i < n_agents; ++i) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const bool vehicle = uniform(rng, 0.0, 1.0) < 0.7;
      const long stop = uniform(rng, 0.0, 1.0) < 0.25
                            ? static_cast<long>(std::uniform_int_distribution<std::size_t>(0, cfg.horizon - 1)(rng))
                            : -1;
      AgentTruth a;
      if (vehicle) {
        const double lane = (rng() & 1u) ? kLaneWidth : -kLaneWidth;
        const double dir = lane < 0.0 ? 1.0 : ((rng() & 1u) ? 1.0 : -1.0);
        const double speed = uniform(rng, 0.0, 6.0);
        const double x = uniform(rng, cfg.spec.x_min + 3.0, cfg.spec.x_max - 3.0);
        a = make_agent(AgentClass::Vehicle, {x, lane + uniform(rng, -0.3, 0.3)}, {dir * speed, 0.0},
                       uniform(rng, 3.8, 4.8), uniform(rng, 1.7, 2.0), cfg.horizon, cfg.dt, stop);
      } else {
        const double side = (rng() & 1u) ? 1.0 : -1.0;
        const double x = uniform(rng, cfg.spec.x_min + 1.0, cfg.spec.x_max - 1.0);
        const double speed = uniform(rng, 0.5, 1.5) * ((rng() & 1u) ? 1.0 : -1.0);
        a = make_agent(AgentClass::Pedestrian, {x, side * uniform(rng, 5.8, 6.8)}, {speed, 0.0}, 0.6, 0.6,
                       cfg.horizon, cfg.dt, stop);
      }
      if (agent_fits(a, sc.agents, ego, cfg.spec, cfg.dt)) {
        sc.agents.push_back(std::move(a));
        break;
      }
    }
  }
  sc.obs = rasterize(sc, cfg.spec);
  return sc;
}

Scenario generate_scenario(std::uint64_t seed, double turn_fraction, const WorldConfig& cfg) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  Command c = Command::Straight;
  if (uniform(rng, 0.0, 1.0) < turn_fraction) c = (rng() & 1u) ? Command::Left : Command::Right;
  return generate_scenario(seed, c, cfg);
}

std::vector<Scenario> generate_dataset(std::uint64_t first_seed, std::size_t n, double turn_fraction,
                                       const WorldConfig& cfg) {
  if (!(turn_fraction >= 0.0 && turn_fraction <= 1.0)) throw std::invalid_argument("dataset: turn fraction must be in [0, 1]");
  const auto turns = static_cast<std::size_t>(std::floor(static_cast<double>(n) * turn_fraction + 1e-9));
  std::vector<Command> cmds;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < turns) cmds.push_back(i % 2 == 0 ? Command::Left : Command::Right);
    else cmds.push_back(Command::Straight);
  }
  std::mt19937_64 rng(first_seed ^ 0xD1B54A32D192ED03ull);
  std::shuffle(cmds.begin(), cmds.end(), rng);
  std::vector<Scenario> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scenario(first_seed + i, cmds[i], cfg));
  return out;
}

SensorObservation rasterize(const Scenario& s, const BevSpec& spec) {
  spec.validate();
  const std::size_t H = spec.height(), W = spec.width(), HW = H * W;
  SensorObservation o{kObsChannels, H, W, std::vector<double>(kObsChannels * HW, 0.0)};
  auto channel = [&](std::size_t c) { return o.data.begin() + static_cast<std::ptrdiff_t>(c * HW); };

  std::vector<OrientedRect> now, past;
  for (const auto& a : s.agents) {
    now.push_back(a.box);
    past.push_back({a.box.center - kPastSeconds * agent_velocity(a, s.gt_plan.dt), a.box.half_extents, a.box.heading});
  }
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const Vec2 p = grid_to_world(spec, {static_cast<double>(c), static_cast<double>(r)});
      double dist = kDistanceClip;
      for (std::size_t i = 0; i < now.size(); ++i) {
        if (rect_contains(now[i], p)) channel(kObsAgents)[static_cast<std::ptrdiff_t>(r * W + c)] = 1.0;
        if (rect_contains(past[i], p)) channel(kObsAgentsPast)[static_cast<std::ptrdiff_t>(r * W + c)] = 1.0;
        dist = std::min(dist, rect_distance(now[i], p));
      }
      channel(kObsDistance)[static_cast<std::ptrdiff_t>(r * W + c)] = dist;
    }

  std::vector<double> scratch(HW);
  auto paint = [&](std::size_t ch, const std::vector<Vec2>& pts) {
    std::fill(scratch.begin(), scratch.end(), 0.0);
    paint_polyline(scratch, spec, pts);
    for (std::size_t i = 0; i < HW; ++i) channel(ch)[static_cast<std::ptrdiff_t>(i)] = std::max(channel(ch)[static_cast<std::ptrdiff_t>(i)], scratch[i]);
  };
  for (std::size_t i = 0; i < s.map.n_map; ++i) {
    if (!s.map.valid[i]) continue;
    std::vector<Vec2> pts;
    for (std::size_t j = 0; j < s.map.n_point; ++j) pts.push_back(s.map.point(i, j));
    const std::size_t ch = s.map.classes[i] == MapClass::LaneDivider ? kObsDivider
                           : s.map.classes[i] == MapClass::Boundary  ? kObsBoundary
                                                                     : kObsCrossing;
    paint(ch, pts);
  }
  if (!s.history.empty()) {
    std::vector<Vec2> trail(s.history.rbegin(), s.history.rend());
    trail.push_back({0.0, 0.0});
    paint(kObsEgoTrail, trail);
  }
  return o;
}

// ---- persistence -----------------------------------------------------------

void save_dataset(const std::vector<Scenario>& scenarios, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path.string());
  for (const auto& s : scenarios) {
    ojson j;
    j["schema"] = kDatasetSchema;
    j["seed"] = s.seed;
    j["command"] = command_name(s.command);
    j["obstacle"] = s.obstacle;
    j["ego"] = {{"vx", s.ego.velocity.x},
                {"vy", s.ego.velocity.y},
                {"acceleration", s.ego.acceleration},
                {"yaw_rate", s.ego.yaw_rate}};
    ojson wp = ojson::array();
    for (const Vec2& p : s.gt_plan.waypoints) wp.push_back({p.x, p.y});
    j["gt_plan"] = {{"dt", s.gt_plan.dt}, {"waypoints", wp}};
    ojson agents = ojson::array();
    for (const auto& a : s.agents) {
      ojson fut = ojson::array();
      for (const auto& f : a.future) fut.push_back(pose_json(f));
      agents.push_back({{"class", a.cls == AgentClass::Vehicle ? "vehicle" : "pedestrian"},
                        {"length", 2.0 * a.box.half_extents.x},
                        {"width", 2.0 * a.box.half_extents.y},
                        {"pose", pose_json(a.box)},
                        {"future", fut}});
    }
    j["agents"] = agents;
    ojson classes = ojson::array();
    for (MapClass c : s.map.classes) classes.push_back(static_cast<int>(c));
    j["map"] = {{"n_map", s.map.n_map},
                {"n_point", s.map.n_point},
                {"classes", classes},
                {"valid", s.map.valid},
                {"points", s.map.points}};
    ojson hist = ojson::array();
    for (const Vec2& p : s.history) hist.push_back({p.x, p.y});
    j["history"] = hist;
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

namespace {

OrientedRect pose_from(const ojson& p, double length, double width) {
  return OrientedRect::make({p.at(0).get<double>(), p.at(1).get<double>()}, length, width, p.at(2).get<double>());
}

Scenario scenario_from(const ojson& j, const BevSpec& spec) {
  if (j.at("schema").get<std::string>() != kDatasetSchema) {
    throw std::runtime_error("schema mismatch: expected " + std::string(kDatasetSchema) + ", got " +
                             j.at("schema").get<std::string>());
  }
  Scenario s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.command = parse_command(j.at("command").get<std::string>());
  s.obstacle = j.at("obstacle").get<bool>();
  const auto& e = j.at("ego");
  s.ego = EgoStatus{{e.at("vx").get<double>(), e.at("vy").get<double>()}, e.at("acceleration").get<double>(),
                    e.at("yaw_rate").get<double>(), s.command};
  s.gt_plan.dt = j.at("gt_plan").at("dt").get<double>();
  for (const auto& p : j.at("gt_plan").at("waypoints")) s.gt_plan.waypoints.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  for (const auto& a : j.at("agents")) {
    const std::string cls = a.at("class").get<std::string>();
    if (cls != "vehicle" && cls != "pedestrian") throw std::runtime_error("unknown agent class " + cls);
    const double len = a.at("length").get<double>(), wid = a.at("width").get<double>();
    AgentTruth t{pose_from(a.at("pose"), len, wid), cls == "vehicle" ? AgentClass::Vehicle : AgentClass::Pedestrian, {}};
    for (const auto& f : a.at("future")) t.future.push_back(pose_from(f, len, wid));
    s.agents.push_back(std::move(t));
  }
  const auto& m = j.at("map");
  s.map = MapInstanceSet::empty(m.at("n_map").get<std::size_t>(), m.at("n_point").get<std::size_t>());
  const auto classes = m.at("classes").get<std::vector<int>>();
  s.map.valid = m.at("valid").get<std::vector<std::uint8_t>>();
  s.map.points = m.at("points").get<std::vector<double>>();
  if (classes.size() != s.map.n_map || s.map.valid.size() != s.map.n_map ||
      s.map.points.size() != s.map.n_map * s.map.n_point * 2) {
    throw std::runtime_error("map arrays do not match n_map x n_point");
  }
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || classes[i] >= static_cast<int>(kNumMapClasses)) throw std::runtime_error("unknown map class");
    s.map.classes[i] = static_cast<MapClass>(classes[i]);
  }
  for (const auto& p : j.at("history")) s.history.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  s.obs = rasterize(s, spec);
  return s;
}

}  // namespace

std::vector<Scenario> load_dataset(const std::filesystem::path& path, const BevSpec& spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::vector<Scenario> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(scenario_from(ojson::parse(line), spec));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- ego perturbation ------------------------------------------------------

std::string_view perturb_name(PerturbMode m) {
  switch (m) {
    case PerturbMode::None: return "none";
    case PerturbMode::Zero: return "x0.0";
    case PerturbMode::Half: return "x0.5";
    case PerturbMode::OneAndHalf: return "x1.5";
    case PerturbMode::Abs100: return "abs100";
  }
  return "?";
}

PerturbMode parse_perturb(std::string_view s) {
  for (PerturbMode m : kPerturbModes)
    if (perturb_name(m) == s) return m;
  throw std::invalid_argument("unknown perturbation mode '" + std::string(s) + "'");
}

EgoStatus perturb_ego(const EgoStatus& ego, PerturbMode mode) {
  EgoStatus out = ego;
  switch (mode) {
    case PerturbMode::None: break;
    case PerturbMode::Zero: out.velocity = 0.0 * ego.velocity; break;
    case PerturbMode::Half: out.velocity = 0.5 * ego.velocity; break;
    case PerturbMode::OneAndHalf: out.velocity = 1.5 * ego.velocity; break;
    case PerturbMode::Abs100: {
      const double n = std::hypot(ego.velocity.x, ego.velocity.y);
      out.velocity = n > 0.0 ? (100.0 / n) * ego.velocity : Vec2{100.0, 0.0};
      break;
    }
  }
  return out;
}

}  // namespace dbp
