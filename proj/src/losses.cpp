#include "dbp/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dbp {

namespace {

Tensor zero_scalar() { return Tensor::scalar(0.0); }

void check_pair(const char* op, const BevGrid& s, const BevGrid& t) {
  if (!(s.spec == t.spec)) throw std::invalid_argument(std::string(op) + ": grids use different BEV specs");
  if (s.features.shape() != t.features.shape()) throw ShapeError(op, s.features.shape(), t.features.shape());
}

// N x C unit-norm rows.
Tensor normalize_rows(const Tensor& x) {
  const Tensor n = sqrt(sum(square(x), 1) + 1e-12);
  return x / reshape(n, {x.dim(0), 1});
}

Tensor one_hot(std::size_t rows, std::size_t cols, const std::vector<std::size_t>& idx) {
  std::vector<double> v(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) v[i * cols + idx[i]] = 1.0;
  return Tensor::from({rows, cols}, std::move(v));
}

}  // namespace

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"alpha", alpha}, {"beta", beta},   {"gamma", gamma},
                                                {"delta", delta}, {"lambda", lambda}, {"det", det},
                                                {"map", map},     {"mot", mot},     {"plan", plan},
                                                {"aux", aux},     {"eps", eps},     {"background", background}};
  for (const auto& [name, v] : all) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument(std::string("loss weight ") + name + " must be >= 0");
  }
}

// ---- distillation ----------------------------------------------------------

std::vector<std::uint8_t> foreground_cells(const BevSpec& spec, const std::vector<OrientedRect>& boxes) {
  const std::size_t H = spec.height(), W = spec.width();
  std::vector<std::uint8_t> fg(H * W, 0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const Vec2 p = grid_to_world(spec, {static_cast<double>(c), static_cast<double>(r)});
      for (const auto& b : boxes)
        if (rect_contains(b, p)) {
          fg[r * W + c] = 1;
          break;
        }
    }
  return fg;
}

std::vector<Vec2> agent_keypoints(const BevSpec& spec, const std::vector<OrientedRect>& boxes) {
  const double max_x = static_cast<double>(spec.width() - 1), max_y = static_cast<double>(spec.height() - 1);
  std::vector<Vec2> out;
  for (const auto& b : boxes) {
    std::vector<Vec2> pts{b.center};
    for (const Vec2& c : rect_polygon(b)) pts.push_back(c);
    for (const Vec2& p : pts) {
      const Vec2 g = world_to_grid(spec, p);
      out.push_back({std::clamp(g.x, 0.0, max_x), std::clamp(g.y, 0.0, max_y)});
    }
  }
  return out;
}

Tensor distill_df(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes,
                  double background) {
  check_pair("distill_df", student, teacher);
  const std::size_t H = student.spec.height(), W = student.spec.width();
  const auto fg = foreground_cells(student.spec, boxes);
  std::vector<double> w(H * W);
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = fg[i] ? 1.0 : background);
  if (total <= 0.0) return zero_scalar();
  const Tensor diff = student.features - teacher.features.detach();
  return sum(square(diff) * Tensor::from({1, H, W}, std::move(w))) * (1.0 / total);
}

Tensor distill_ik(const BevGrid& student, const BevGrid& teacher, const std::vector<Vec2>& keypoints) {
  check_pair("distill_ik", student, teacher);
  if (keypoints.size() < 2) return zero_scalar();
  std::vector<double> pv;
  for (const Vec2& k : keypoints) {
    pv.push_back(k.x);
    pv.push_back(k.y);
  }
  const Tensor pts = Tensor::from({keypoints.size(), 2}, std::move(pv));
  const Tensor s = normalize_rows(grid_sample(student.features, pts));
  const Tensor t = normalize_rows(grid_sample(teacher.features.detach(), pts));
  return mean(abs(matmul(s, transpose(s)) - matmul(t, transpose(t))));
}

Tensor distill_ic(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes) {
  check_pair("distill_ic", student, teacher);
  const auto fg = foreground_cells(student.spec, boxes);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < fg.size(); ++i)
    if (fg[i]) rows.push_back(i);
  if (rows.empty()) return zero_scalar();
  const std::size_t C = student.channels(), HW = fg.size();
  auto gram = [&](const Tensor& f) {
    // n x C foreground features; columns normalized so G is a cosine matrix.
    const Tensor x = take_rows(transpose(reshape(f, {C, HW})), rows);
    const Tensor xt = normalize_rows(transpose(x));
    return matmul(xt, transpose(xt));
  };
  return mean(abs(gram(student.features) - gram(teacher.features.detach())));
}

DistillParts distill_total(const BevGrid& student, const BevGrid& teacher, const std::vector<OrientedRect>& boxes,
                           const LossWeights& w) {
  const BevGrid t(teacher.spec, teacher.features.detach());
  DistillParts p;
  p.df = distill_df(student, t, boxes, w.background);
  p.ik = distill_ik(student, t, agent_keypoints(student.spec, boxes));
  p.ic = distill_ic(student, t, boxes);
  p.total = w.alpha * p.df + w.beta * p.ik + w.gamma * p.ic;
  return p;
}

// ---- autoregressive mapping ------------------------------------------------

std::vector<OrientedRect> perception_boxes(const std::vector<Vec2>& waypoints, const BevSpec& spec) {
  const auto heads = path_headings(waypoints);
  std::vector<OrientedRect> out;
  for (std::size_t i = 0; i < waypoints.size(); ++i)
    out.push_back(OrientedRect::make(waypoints[i], spec.length_m(), spec.width_m(), heads[i]));
  return out;
}

std::vector<Vec2> to_points(const Tensor& traj) {
  if (traj.rank() != 2 || traj.dim(1) != 2) throw ShapeError("to_points: expected T x 2, got " + shape_str(traj.shape()));
  std::vector<Vec2> out;
  for (std::size_t i = 0; i < traj.dim(0); ++i) out.push_back({traj[2 * i], traj[2 * i + 1]});
  return out;
}

Tensor autoregressive_map_loss(const Tensor& pred_traj, const Trajectory& gt_traj, const Tensor& pred_map,
                               const MapInstanceSet& gt_map, const BevSpec& spec, double eps) {
  const auto pred_pts = to_points(pred_traj);
  const std::size_t T = pred_pts.size();
  if (T != gt_traj.waypoints.size() || T == 0) {
    throw ShapeError("autoregressive_map_loss: trajectory lengths " + std::to_string(T) + " vs " +
                     std::to_string(gt_traj.waypoints.size()));
  }
  const Shape map_shape{gt_map.n_map, gt_map.n_point, 2};
  if (pred_map.shape() != map_shape) throw ShapeError("autoregressive_map_loss", pred_map.shape(), map_shape);

  const auto pb = perception_boxes(pred_pts, spec), gb = perception_boxes(gt_traj.waypoints, spec);
  // The per-step masked means collapse into one weighted L1 sum.
  std::vector<double> weight(gt_map.n_map * gt_map.n_point * 2, 0.0);
  bool any = false;
  for (std::size_t t = 0; t < T; ++t) {
    const PointMask m = mask_points(gt_map, rect_intersection_region(pb[t], gb[t]));
    const double coords = 2.0 * static_cast<double>(m.count());
    if (coords == 0.0) continue;
    const double w = 1.0 / ((coords + eps) * static_cast<double>(T));
    for (std::size_t i = 0; i < m.values.size(); ++i)
      if (m.values[i]) {
        weight[2 * i] += w;
        weight[2 * i + 1] += w;
        any = true;
      }
  }
  if (!any) return zero_scalar();
  const Tensor gt = Tensor::from(map_shape, gt_map.points);
  return sum(abs(pred_map - gt) * Tensor::from(map_shape, std::move(weight)));
}

Tensor autoregressive_gwd_loss(const Tensor& pred_traj, const Trajectory& gt_traj, const BevSpec& spec) {
  const auto pred_pts = to_points(pred_traj);
  const std::size_t T = pred_pts.size();
  if (T != gt_traj.waypoints.size() || T == 0) {
    throw ShapeError("autoregressive_gwd_loss: trajectory lengths " + std::to_string(T) + " vs " +
                     std::to_string(gt_traj.waypoints.size()));
  }
  const auto gb = perception_boxes(gt_traj.waypoints, spec);
  const Tensor hl = Tensor::from({1}, {spec.length_m() / 2.0}), hw = Tensor::from({1}, {spec.width_m() / 2.0});
  Tensor cos_h = Tensor::from({1}, {1.0}), sin_h = Tensor::from({1}, {0.0});
  Tensor px = Tensor::from({1}, {0.0}), py = Tensor::from({1}, {0.0});
  Tensor acc;
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor row = reshape(slice(pred_traj, 0, t, t + 1), {2});
    const Tensor x = slice(row, 0, 0, 1), y = slice(row, 0, 1, 2);
    const Tensor dx = x - px, dy = y - py;
    if (std::hypot(dx[0], dy[0]) >= 1e-6) {
      const Tensor n = sqrt(square(dx) + square(dy));
      cos_h = dx / n;
      sin_h = dy / n;
    }
    const Tensor term = log(gwd(BoxTensor{x, y, hl, hw, cos_h, sin_h}, box_constant(gb[t])) + 1.0);
    acc = acc.defined() ? acc + term : term;
    px = x;
    py = y;
  }
  return acc * (1.0 / static_cast<double>(T));
}

// ---- matching and supervised losses ----------------------------------------

std::vector<long> hungarian_match(const std::vector<double>& cost, std::size_t n, std::size_t m) {
  if (cost.size() != n * m) throw std::invalid_argument("hungarian_match: cost size does not match n x m");
  for (double c : cost)
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian_match: non-finite cost");
  std::vector<long> result(n, -1);
  if (n == 0 || m == 0) return result;
  const bool flip = n > m;
  const std::size_t R = flip ? m : n, C = flip ? n : m;
  auto at = [&](std::size_t r, std::size_t c) { return flip ? cost[c * m + r] : cost[r * m + c]; };

  // Shortest augmenting path with potentials, 1-based with column 0 as the sentinel.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(R + 1, 0.0), v(C + 1, 0.0);
  std::vector<std::size_t> p(C + 1, 0), way(C + 1, 0);
  for (std::size_t i = 1; i <= R; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(C + 1, inf);
    std::vector<char> used(C + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= C; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= C; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= C; ++j) {
    if (p[j] == 0) continue;
    if (flip) result[j - 1] = static_cast<long>(p[j] - 1);
    else result[p[j] - 1] = static_cast<long>(j - 1);
  }
  return result;
}

double assignment_cost(const std::vector<double>& cost, std::size_t m, const std::vector<long>& assign) {
  double s = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i)
    if (assign[i] >= 0) s += cost[i * m + static_cast<std::size_t>(assign[i])];
  return s;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " + std::to_string(targets.size()) +
                     " targets");
  }
  for (std::size_t t : targets)
    if (t >= logits.dim(1)) throw std::out_of_range("cross_entropy: target class out of range");
  if (targets.empty()) return zero_scalar();
  const Tensor picked = log_softmax(logits, 1) * one_hot(logits.dim(0), logits.dim(1), targets);
  return sum(picked) * (-1.0 / static_cast<double>(targets.size()));
}

PerceptionLosses perception_losses(const AgentPredictions& agents, const MapPredictions& maps,
                                   const std::vector<AgentTruth>& gt_agents, const MapInstanceSet& gt_map) {
  PerceptionLosses out;

  // Agents.
  const std::size_t na = agents.boxes.dim(0), T = agents.motion.dim(1);
  const std::size_t no_agent = kNumAgentClasses;
  const std::size_t ng = gt_agents.size();
  {
    const Tensor prob = softmax(agents.logits, 1);
    std::vector<double> cost(ng * na);
    for (std::size_t g = 0; g < ng; ++g)
      for (std::size_t p = 0; p < na; ++p) {
        const auto& b = gt_agents[g].box;
        cost[g * na + p] = std::fabs(agents.boxes[p * 5] - b.center.x) + std::fabs(agents.boxes[p * 5 + 1] - b.center.y) -
                           prob[p * (no_agent + 1) + static_cast<std::size_t>(gt_agents[g].cls)];
      }
    out.agent_match = hungarian_match(cost, ng, na);
  }
  std::vector<std::size_t> agent_cls(na, no_agent);
  Tensor reg = zero_scalar(), mot = zero_scalar();
  if (ng > 0) {
    std::vector<std::size_t> rows;
    std::vector<double> box_t, mot_t;
    for (std::size_t g = 0; g < ng; ++g) {
      const std::size_t p = static_cast<std::size_t>(out.agent_match[g]);
      if (out.agent_match[g] < 0) continue;  // more ground truth than queries
      rows.push_back(p);
      const auto& a = gt_agents[g];
      agent_cls[p] = static_cast<std::size_t>(a.cls);
      const double ph = agents.boxes[p * 5 + 4];
      box_t.insert(box_t.end(), {a.box.center.x, a.box.center.y, 2.0 * a.box.half_extents.x,
                                 2.0 * a.box.half_extents.y, ph + normalize_angle(a.box.heading - ph)});
      for (std::size_t k = 0; k < T; ++k) {
        const OrientedRect& f = k < a.future.size() ? a.future[k] : (a.future.empty() ? a.box : a.future.back());
        mot_t.push_back(f.center.x - a.box.center.x);
        mot_t.push_back(f.center.y - a.box.center.y);
      }
    }
    const double n = static_cast<double>(rows.size());
    if (!rows.empty()) {
      reg = sum(abs(take_rows(agents.boxes, rows) - Tensor::from({rows.size(), 5}, box_t))) * (1.0 / n);
      mot = sum(abs(take_rows(agents.motion, rows) - Tensor::from({rows.size(), T, 2}, mot_t))) *
            (1.0 / (n * static_cast<double>(T)));
    }
  }
  out.det = reg + cross_entropy(agents.logits, agent_cls);
  out.mot = mot;

  // Map instances.
  const std::size_t nm = maps.points.dim(0), np = maps.points.dim(1);
  if (np != gt_map.n_point) throw ShapeError("perception_losses: map point counts differ");
  const std::size_t no_map = kNumMapClasses;
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < gt_map.n_map; ++i)
    if (gt_map.valid[i]) slots.push_back(i);
  out.map_match.assign(gt_map.n_map, -1);
  std::vector<std::size_t> map_cls(nm, no_map);
  Tensor map_reg = zero_scalar();
  if (!slots.empty()) {
    const Tensor prob = softmax(maps.logits, 1);
    std::vector<double> cost(slots.size() * nm);
    for (std::size_t s = 0; s < slots.size(); ++s)
      for (std::size_t p = 0; p < nm; ++p) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < np; ++j) {
          const Vec2 g = gt_map.point(slots[s], j);
          l1 += std::fabs(maps.points[(p * np + j) * 2] - g.x) + std::fabs(maps.points[(p * np + j) * 2 + 1] - g.y);
        }
        cost[s * nm + p] = l1 / static_cast<double>(np) -
                           prob[p * (no_map + 1) + static_cast<std::size_t>(gt_map.classes[slots[s]])];
      }
    const auto match = hungarian_match(cost, slots.size(), nm);
    std::vector<std::size_t> rows;
    std::vector<double> target;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (match[s] < 0) continue;
      const std::size_t p = static_cast<std::size_t>(match[s]);
      out.map_match[slots[s]] = match[s];
      map_cls[p] = static_cast<std::size_t>(gt_map.classes[slots[s]]);
      rows.push_back(p);
      const auto first = gt_map.points.begin() + static_cast<std::ptrdiff_t>(slots[s] * np * 2);
      target.insert(target.end(), first, first + static_cast<std::ptrdiff_t>(np * 2));
    }
    if (!rows.empty()) {
      map_reg = sum(abs(take_rows(maps.points, rows) - Tensor::from({rows.size(), np, 2}, std::move(target)))) *
                (1.0 / (static_cast<double>(rows.size()) * static_cast<double>(np)));
    }
  }
  out.map = map_reg + cross_entropy(maps.logits, map_cls);
  return out;
}

Tensor aligned_map_points(const MapPredictions& maps, const std::vector<long>& map_match) {
  std::vector<std::size_t> rows;
  for (long m : map_match) rows.push_back(m < 0 ? 0 : static_cast<std::size_t>(m));
  return take_rows(maps.points, rows);
}

PlanningLoss planning_loss(const Tensor& modes, const Tensor& scores, const Trajectory& gt) {
  if (modes.rank() != 3 || modes.dim(2) != 2 || modes.dim(1) != gt.waypoints.size()) {
    throw ShapeError("planning_loss: modes " + shape_str(modes.shape()) + " vs ground truth length " +
                     std::to_string(gt.waypoints.size()));
  }
  const std::size_t M = modes.dim(0), T = modes.dim(1);
  if (scores.numel() != M) throw ShapeError("planning_loss: " + std::to_string(M) + " modes, scores " + shape_str(scores.shape()));
  PlanningLoss out;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < M; ++m) {
    double d = 0.0;
    for (std::size_t k = 0; k < T; ++k)
      d += std::fabs(modes[(m * T + k) * 2] - gt.waypoints[k].x) + std::fabs(modes[(m * T + k) * 2 + 1] - gt.waypoints[k].y);
    if (d < best) {
      best = d;
      out.winner = m;
    }
  }
  std::vector<double> target;
  for (const Vec2& w : gt.waypoints) target.insert(target.end(), {w.x, w.y});
  const Tensor chosen = reshape(take_rows(modes, {out.winner}), {T, 2});
  const Tensor reg = sum(abs(chosen - Tensor::from({T, 2}, std::move(target)))) * (1.0 / static_cast<double>(T));
  out.loss = reg + cross_entropy(reshape(scores, {1, M}), {out.winner});
  return out;
}

Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  const std::pair<const char*, std::pair<const Tensor*, double>> terms[] = {
      {"det", {&parts.det, w.det}},           {"map", {&parts.map, w.map}},
      {"mot", {&parts.mot, w.mot}},           {"plan", {&parts.plan, w.plan}},
      {"distill", {&parts.distill, w.aux}},   {"autoreg", {&parts.autoreg, w.aux}}};
  Tensor acc = zero_scalar();
  for (const auto& [name, tw] : terms) {
    const Tensor& t = *tw.first;
    if (!t.defined()) continue;
    if (t.numel() != 1) throw ShapeError(std::string("total_loss: part ") + name + " is not a scalar");
    if (!std::isfinite(t[0])) throw std::domain_error(std::string("total_loss: non-finite ") + name + " loss");
    acc = acc + reshape(t, {}) * tw.second;
  }
  return acc;
}

}  // namespace dbp
