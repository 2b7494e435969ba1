#include "dbp/gradcheck_suite.hpp"

#include <cmath>
#include <random>

#include "dbp/attention.hpp"
#include "dbp/bev.hpp"
#include "dbp/losses.hpp"
#include "dbp/params.hpp"

namespace dbp {

namespace {

using Rng = std::mt19937_64;

Tensor uniform(Shape s, Rng& rng, double lo, double hi, bool grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = d(rng);
  return Tensor::from(std::move(s), std::move(v), grad);
}

// Uniform in [-hi, hi] with |x| >= gap, away from kinks at zero.
Tensor away_from_zero(Shape s, Rng& rng, double gap, double hi) {
  std::uniform_real_distribution<double> d(gap, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = sign(rng) ? d(rng) : -d(rng);
  return Tensor::from(std::move(s), std::move(v), true);
}

void randomize(Tensor t, Rng& rng, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (double& x : t.mutable_data()) x = d(rng);
}

bool off_lattice(const Tensor& pts, double margin = 1e-3) {
  for (double v : pts.data())
    if (std::fabs(v - std::round(v)) < margin) return false;
  return true;
}

std::vector<Tensor> with_params(std::vector<Tensor> inputs, const ParamStore& ps) {
  for (const auto& [name, t] : ps.entries()) inputs.push_back(t);
  return inputs;
}

using Builder = std::function<Tensor()>;

GradCheckResult check(const Builder& f, const std::vector<Tensor>& inputs, const GradCheckOptions& o) {
  return check_gradients([&](const std::vector<Tensor>&) { return f(); }, inputs, o);
}

// Elementwise unary op at inputs drawn by make.
GradcheckCase unary(std::string name, Tensor (*op)(const Tensor&), std::function<Tensor(Rng&)> make) {
  return {name, [op, make](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            Tensor x = make(rng);
            return check([&] { return random_projection(op(x), 1); }, {x}, o);
          }};
}

GradcheckCase binary(std::string name, Tensor (*op)(const Tensor&, const Tensor&), double lo, double hi) {
  return {name, [op, lo, hi](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            Tensor a = uniform({3, 4}, rng, -2, 2);
            Tensor b = uniform({4}, rng, lo, hi);  // broadcast along rows
            return check([&] { return random_projection(op(a, b), 2); }, {a, b}, o);
          }};
}

BevSpec small_spec() { return {-4.0, 4.0, -2.0, 2.0, 1.0}; }

std::vector<OrientedRect> random_boxes(Rng& rng, std::size_t n, double x, double y) {
  std::uniform_real_distribution<double> cx(-x, x), cy(-y, y), size(0.8, 2.5), head(-3.0, 3.0);
  std::vector<OrientedRect> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(OrientedRect::make({cx(rng), cy(rng)}, size(rng), size(rng), head(rng)));
  return out;
}

Trajectory random_path(Rng& rng, std::size_t T) {
  std::uniform_real_distribution<double> speed(2.0, 4.0), lat(-0.4, 0.4);
  Trajectory t;
  t.dt = 0.5;
  Vec2 p{};
  for (std::size_t k = 0; k < T; ++k) {
    p = {p.x + speed(rng) * 0.5, p.y + lat(rng)};
    t.waypoints.push_back(p);
  }
  return t;
}

Tensor perturbed(const Trajectory& t, Rng& rng, double noise) {
  std::uniform_real_distribution<double> d(-noise, noise);
  std::vector<double> v;
  for (const Vec2& p : t.waypoints) {
    v.push_back(p.x + d(rng));
    v.push_back(p.y + d(rng));
  }
  return Tensor::from({t.waypoints.size(), 2}, std::move(v), true);
}

MapInstanceSet random_map(Rng& rng, std::size_t n_map, std::size_t n_point) {
  std::uniform_real_distribution<double> x(-2.0, 8.0), y(-3.0, 3.0);
  MapInstanceSet m = MapInstanceSet::empty(n_map, n_point);
  for (std::size_t i = 0; i < n_map; ++i) {
    m.valid[i] = i + 1 < n_map;  // last slot invalid
    m.classes[i] = static_cast<MapClass>(i % kNumMapClasses);
    for (std::size_t j = 0; j < n_point; ++j) {
      m.points[(i * n_point + j) * 2] = x(rng);
      m.points[(i * n_point + j) * 2 + 1] = y(rng);
    }
  }
  return m;
}

Tensor map_prediction(const MapInstanceSet& m, Rng& rng, double noise) {
  std::uniform_real_distribution<double> d(-noise, noise);
  std::vector<double> v = m.points;
  for (double& x : v) x += d(rng);
  return Tensor::from({m.n_map, m.n_point, 2}, std::move(v), true);
}

std::vector<GradcheckCase> elementwise_cases() {
  std::vector<GradcheckCase> c;
  c.push_back(binary("add", &add, -2, 2));
  c.push_back(binary("sub", &sub, -2, 2));
  c.push_back(binary("mul", &mul, -2, 2));
  c.push_back(binary("div", &div, 0.5, 2.0));
  c.push_back({"add_scalar", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({5}, rng, -2, 2);
                 return check([&] { return random_projection(add_scalar(x, 0.7), 3); }, {x}, o);
               }});
  c.push_back({"mul_scalar", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({5}, rng, -2, 2);
                 return check([&] { return random_projection(mul_scalar(x, -1.3), 3); }, {x}, o);
               }});
  c.push_back(unary("neg", &neg, [](Rng& r) { return uniform({5}, r, -2, 2); }));
  c.push_back(unary("relu", &relu, [](Rng& r) { return away_from_zero({3, 4}, r, 0.05, 2.0); }));
  c.push_back(unary("exp", &exp, [](Rng& r) { return uniform({3, 4}, r, -2, 2); }));
  c.push_back(unary("log", &log, [](Rng& r) { return uniform({3, 4}, r, 0.5, 3); }));
  c.push_back(unary("sqrt", &sqrt, [](Rng& r) { return uniform({3, 4}, r, 0.5, 3); }));
  c.push_back(unary("tanh", &tanh, [](Rng& r) { return uniform({3, 4}, r, -2, 2); }));
  c.push_back(unary("sin", &sin, [](Rng& r) { return uniform({3, 4}, r, -3, 3); }));
  c.push_back(unary("cos", &cos, [](Rng& r) { return uniform({3, 4}, r, -3, 3); }));
  c.push_back(unary("abs", &abs, [](Rng& r) { return away_from_zero({3, 4}, r, 0.05, 2.0); }));
  c.push_back(unary("square", &square, [](Rng& r) { return uniform({3, 4}, r, -2, 2); }));
  return c;
}

std::vector<GradcheckCase> structural_cases() {
  std::vector<GradcheckCase> c;
  c.push_back({"reshape", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({2, 6}, rng, -1, 1);
                 return check([&] { return random_projection(reshape(x, {3, 4}), 4); }, {x}, o);
               }});
  c.push_back({"permute", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({2, 3, 4}, rng, -1, 1);
                 return check([&] { return random_projection(permute(x, {2, 0, 1}), 4); }, {x}, o);
               }});
  c.push_back({"transpose", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 4}, rng, -1, 1);
                 return check([&] { return random_projection(transpose(x), 4); }, {x}, o);
               }});
  c.push_back({"concat", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor a = uniform({2, 3}, rng, -1, 1), b = uniform({2, 2}, rng, -1, 1);
                 return check([&] { return random_projection(concat({a, b}, 1), 4); }, {a, b}, o);
               }});
  c.push_back({"slice", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 5}, rng, -1, 1);
                 return check([&] { return random_projection(slice(x, 1, 1, 4), 4); }, {x}, o);
               }});
  c.push_back({"take_rows", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({4, 3}, rng, -1, 1);
                 return check([&] { return random_projection(take_rows(x, {2, 0, 2, 3}), 4); }, {x}, o);
               }});
  c.push_back({"sum", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 4}, rng, -1, 1);
                 return check([&] { return square(sum(x)) + random_projection(sum(x, 1), 5); }, {x}, o);
               }});
  c.push_back({"mean", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 4}, rng, -1, 1);
                 return check([&] { return square(mean(x)) + random_projection(mean(x, 0), 5); }, {x}, o);
               }});
  c.push_back({"matmul", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor a = uniform({3, 4}, rng, -1, 1), b = uniform({4, 2}, rng, -1, 1);
                 return check([&] { return random_projection(matmul(a, b), 6); }, {a, b}, o);
               }});
  c.push_back({"bmm", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor a = uniform({2, 3, 4}, rng, -1, 1), b = uniform({2, 4, 2}, rng, -1, 1);
                 return check([&] { return random_projection(bmm(a, b), 6); }, {a, b}, o);
               }});
  c.push_back({"softmax", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 5}, rng, -2, 2);
                 return check([&] { return random_projection(softmax(x, 1), 7); }, {x}, o);
               }});
  c.push_back({"log_softmax", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 5}, rng, -2, 2);
                 return check([&] { return random_projection(log_softmax(x, 0), 7); }, {x}, o);
               }});
  c.push_back({"layer_norm", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({3, 6}, rng, -2, 2);
                 return check([&] { return random_projection(layer_norm(x, 1), 8); }, {x}, o);
               }});
  c.push_back({"conv2d", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor x = uniform({2, 5, 4}, rng, -1, 1), w = uniform({3, 2, 3, 3}, rng, -0.5, 0.5),
                        b = uniform({3}, rng, -0.5, 0.5);
                 return check([&] { return random_projection(conv2d(x, w, b), 9); }, {x, w, b}, o);
               }});
  c.push_back({"bilinear_sample", [](std::uint64_t seed, const GradCheckOptions& o) {
                 for (std::uint64_t attempt = 0;; ++attempt) {
                   Rng rng(seed * 131 + attempt);
                   Tensor g = uniform({3, 5, 6}, rng, -1, 1);
                   // Some points fall in the padded border ring.
                   Tensor p = uniform({7, 2}, rng, -0.8, 5.6);
                   if (!off_lattice(p)) continue;
                   return check([&] { return random_projection(grid_sample(g, p), 10); }, {g, p}, o);
                 }
               }});
  return c;
}

std::vector<GradcheckCase> attention_cases() {
  std::vector<GradcheckCase> c;
  c.push_back({"linear", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 ParamStore ps;
                 const Linear l = Linear::create(ps, "l", 4, 3, rng);
                 Tensor x = uniform({2, 4}, rng, -1, 1);
                 return check([&] { return random_projection(l(x), 11); }, with_params({x}, ps), o);
               }});
  c.push_back({"feed_forward", [](std::uint64_t seed, const GradCheckOptions& o) {
                 for (std::uint64_t attempt = 0;; ++attempt) {
                   Rng rng(seed * 131 + attempt);
                   ParamStore ps;
                   const FeedForward f = FeedForward::create(ps, "f", 4, 6, rng);
                   Tensor x = uniform({2, 4}, rng, -1, 1);
                   const Tensor pre = f.fc1(x);
                   bool generic = true;
                   for (double v : pre.data()) generic = generic && std::fabs(v) > 1e-3;
                   if (!generic) continue;
                   return check([&] { return random_projection(f(x), 11); }, with_params({x}, ps), o);
                 }
               }});
  c.push_back({"mhsa", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 ParamStore ps;
                 const auto m = MultiHeadAttention::create(ps, "sa", 8, 2, rng);
                 Tensor x = uniform({4, 8}, rng, -1, 1);
                 return check([&] { return random_projection(mhsa(m, x), 12); }, with_params({x}, ps), o);
               }});
  c.push_back({"cross_attention", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 ParamStore ps;
                 const auto m = MultiHeadAttention::create(ps, "ca", 8, 4, rng);
                 Tensor q = uniform({3, 8}, rng, -1, 1), kv = uniform({5, 8}, rng, -1, 1);
                 return check([&] { return random_projection(cross_attention(m, q, kv), 12); },
                              with_params({q, kv}, ps), o);
               }});
  auto attention = [](bool path) {
    return [path](std::uint64_t seed, const GradCheckOptions& o) {
      for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(seed * 131 + attempt);
        ParamStore ps;
        PathAttention pa = PathAttention::create(ps, "pa", {6, 3, 2, 0, 2.0}, rng);
        randomize(pa.offset_head.weight, rng, 0.5);
        randomize(pa.offset_head.bias, rng, 0.5);
        randomize(pa.weight_head.weight, rng, 1.0);
        randomize(pa.weight_head.bias, rng, 1.0);
        Tensor q = uniform({2, 6}, rng, -1, 1);
        Tensor grid = uniform({6, 8, 8}, rng, -1, 1);
        Tensor refs = path ? uniform({2, 3, 2}, rng, 1, 6) : uniform({2, 2}, rng, 1, 6);
        const Tensor anchors = path ? refs : reshape(concat({refs, refs, refs}, 1), {2, 3, 2});
        if (!off_lattice(pa.sample_points(q, anchors))) continue;
        const Builder f = [&] {
          return random_projection(path ? pa(q, refs, grid) : pa.deformable(q, refs, grid), 13);
        };
        return check(f, with_params({q, refs, grid}, ps), o);
      }
    };
  };
  c.push_back({"path_attention", attention(true)});
  c.push_back({"deformable_attention", attention(false)});
  return c;
}

std::vector<GradcheckCase> loss_cases() {
  std::vector<GradcheckCase> c;
  c.push_back({"gwd", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 std::uniform_real_distribution<double> pos(-2, 2), half(0.4, 2.0), head(-3.0, 3.0);
                 Tensor a = Tensor::from({5}, {pos(rng), pos(rng), half(rng), half(rng), head(rng)}, true);
                 Tensor b = Tensor::from({5}, {pos(rng), pos(rng), half(rng), half(rng), head(rng)}, true);
                 return check([&] { return gwd(a, b); }, {a, b}, o);
               }});
  auto distill = [](int which) {
    return [which](std::uint64_t seed, const GradCheckOptions& o) {
      Rng rng(seed);
      const BevSpec spec = small_spec();
      Tensor s = uniform({4, spec.height(), spec.width()}, rng, -1, 1);
      const Tensor t = uniform({4, spec.height(), spec.width()}, rng, -1, 1, false);
      const auto boxes = random_boxes(rng, 2, 3.0, 1.5);
      const auto keys = agent_keypoints(spec, boxes);
      const Builder f = [&]() -> Tensor {
        const BevGrid gs(spec, s), gt(spec, t);
        switch (which) {
          case 0: return distill_df(gs, gt, boxes);
          case 1: return distill_ik(gs, gt, keys);
          case 2: return distill_ic(gs, gt, boxes);
          default: return distill_total(gs, gt, boxes, LossWeights{}).total;
        }
      };
      return check(f, {s}, o);
    };
  };
  c.push_back({"distill_df", distill(0)});
  c.push_back({"distill_ik", distill(1)});
  c.push_back({"distill_ic", distill(2)});
  c.push_back({"distill_total", distill(3)});
  c.push_back({"autoregressive_map_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 const BevSpec spec = small_spec();
                 const Trajectory gt = random_path(rng, 3);
                 const MapInstanceSet map = random_map(rng, 4, 5);
                 Tensor traj = perturbed(gt, rng, 0.3);
                 Tensor pred = map_prediction(map, rng, 0.5);
                 return check([&] { return autoregressive_map_loss(traj, gt, pred, map, spec, 1.0); }, {traj, pred}, o);
               }});
  c.push_back({"autoregressive_gwd_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 const Trajectory gt = random_path(rng, 4);
                 Tensor traj = perturbed(gt, rng, 0.4);
                 return check([&] { return autoregressive_gwd_loss(traj, gt, small_spec()); }, {traj}, o);
               }});
  c.push_back({"cross_entropy", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 Tensor logits = uniform({4, 3}, rng, -2, 2);
                 return check([&] { return cross_entropy(logits, {0, 2, 1, 2}); }, {logits}, o);
               }});
  c.push_back({"perception_losses", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 const std::size_t T = 3;
                 std::vector<AgentTruth> agents;
                 for (const auto& b : random_boxes(rng, 2, 6.0, 3.0)) {
                   AgentTruth a{b, AgentClass::Vehicle, {}};
                   for (std::size_t k = 1; k <= T; ++k)
                     a.future.push_back(OrientedRect::make({b.center.x + 0.7 * k, b.center.y}, 2 * b.half_extents.x,
                                                           2 * b.half_extents.y, b.heading));
                   agents.push_back(a);
                 }
                 const MapInstanceSet map = random_map(rng, 3, 4);
                 AgentPredictions ap{uniform({4, 5}, rng, -3, 3), uniform({4, 3}, rng, -1, 1),
                                     uniform({4, T, 2}, rng, -2, 2)};
                 MapPredictions mp{uniform({4, 4, 2}, rng, -3, 6), uniform({4, 4}, rng, -1, 1)};
                 const Builder f = [&] {
                   const auto l = perception_losses(ap, mp, agents, map);
                   return l.det + l.map + l.mot;
                 };
                 return check(f, {ap.boxes, ap.logits, ap.motion, mp.points, mp.logits}, o);
               }});
  c.push_back({"planning_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 const Trajectory gt = random_path(rng, 4);
                 Tensor modes = uniform({3, 4, 2}, rng, -1, 8);
                 Tensor scores = uniform({3}, rng, -1, 1);
                 return check([&] { return planning_loss(modes, scores, gt).loss; }, {modes, scores}, o);
               }});
  c.push_back({"total_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                 Rng rng(seed);
                 std::vector<Tensor> parts;
                 for (int i = 0; i < 6; ++i) parts.push_back(uniform({}, rng, 0.1, 2));
                 LossWeights w;
                 w.aux = 0.7;
                 w.plan = 1.5;
                 const Builder f = [&] {
                   return total_loss({parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]}, w);
                 };
                 return check(f, parts, o);
               }});
  return c;
}

}  // namespace

std::vector<GradcheckCase> default_gradcheck_cases() {
  std::vector<GradcheckCase> all;
  for (auto group : {elementwise_cases(), structural_cases(), attention_cases(), loss_cases()})
    for (auto& c : group) all.push_back(std::move(c));
  return all;
}

bool GradcheckReport::all_passed() const { return failures().empty(); }

std::vector<std::string> GradcheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.passed) out.push_back(e.op);
  return out;
}

GradcheckReport run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed,
                              const GradCheckOptions& opts) {
  GradcheckReport report;
  report.tolerance = opts.tolerance;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const GradCheckResult r = cases[i].run(seed * 1000 + i, opts);
    report.entries.push_back({cases[i].op, r.max_rel_error, r.entries, r.worst, r.passed(opts.tolerance)});
  }
  return report;
}

}  // namespace dbp
