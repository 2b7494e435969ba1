#include <cmath>
#include <random>

#include "doctest.h"
#include "dbp/model.hpp"
#include "dbp/world.hpp"

using namespace dbp;

namespace {

const BevSpec kSpec{-15.0, 15.0, -7.5, 7.5, 1.0};

ModelConfig small_config(AblationFlags flags = {}) {
  ModelConfig c;
  c.spec = kSpec;
  c.flags = flags;
  return c;
}

Tensor random_obs(const ModelConfig& c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(c.obs_channels * c.spec.height() * c.spec.width());
  for (double& x : v) x = u(rng) < 0.2 ? 1.0 : 0.0;
  return Tensor::from({c.obs_channels, c.spec.height(), c.spec.width()}, std::move(v));
}

void fill(Tensor t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

bool same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  for (double x : t.data())
    if (!std::isfinite(x)) return false;
  return true;
}

Vec2 grid_point_to_world(const BevSpec& s, double gx, double gy) { return grid_to_world(s, {gx, gy}); }

const EgoStatus kEgoA{{3.0, 0.0}, 0.2, 0.05, Command::Straight};
const EgoStatus kEgoB{{4.0, 0.0}, 0.2, 0.05, Command::Straight};

}  // namespace

TEST_CASE("encoder without ego injection ignores ego status") {
  const Model m(small_config(), 3);
  const Tensor obs = random_obs(m.config(), 1);
  for (PerturbMode p : kPerturbModes) {
    const auto a = m.encode_bev(obs, kEgoA, false), b = m.encode_bev(obs, perturb_ego(kEgoA, p), false);
    CHECK(same(a.features, b.features));
  }
  CHECK(m.encode_bev(obs, kEgoA, false).features.shape() == Shape{32, 15, 30});
}

TEST_CASE("zero ego projection equals no injection") {
  Model m(small_config(), 3);
  fill(m.encoder.ego_proj.weight, 0.0);
  fill(m.encoder.ego_proj.bias, 0.0);
  const Tensor obs = random_obs(m.config(), 2);
  CHECK(same(m.encode_bev(obs, kEgoA, true).features, m.encode_bev(obs, kEgoA, false).features));
}

TEST_CASE("ego injection responds to velocity") {
  const Model m(small_config(), 3);
  const Tensor obs = random_obs(m.config(), 2);
  CHECK(max_abs_diff(m.encode_bev(obs, kEgoA, true).features, m.encode_bev(obs, kEgoB, true).features) > 0.0);
}

TEST_CASE("encoder rejects a channel mismatch") {
  const Model m(small_config(), 3);
  CHECK_THROWS_AS(m.encode_bev(Tensor::zeros({6, 15, 30}), kEgoA, false), ShapeError);
}

TEST_CASE("scene decoder with zero heads returns the head biases") {
  Model m(small_config(), 5);
  for (Linear* l : {&m.decoder.box, &m.decoder.motion, &m.decoder.map_points}) fill(l->weight, 0.0);
  const auto& cfg = m.config();
  const BevGrid zero(cfg.spec, Tensor::zeros({cfg.channels, cfg.spec.height(), cfg.spec.width()}));
  const auto d = m.scene_decoder(zero);
  REQUIRE(d.agents.boxes.shape() == Shape{cfg.n_agent, 5});
  REQUIRE(d.maps.points.shape() == Shape{cfg.n_map, cfg.n_point, 2});
  REQUIRE(d.agents.motion.shape() == Shape{cfg.n_agent, cfg.horizon, 2});
  CHECK(d.agents.logits.shape() == Shape{cfg.n_agent, kNumAgentClasses + 1});
  CHECK(d.maps.logits.shape() == Shape{cfg.n_map, kNumMapClasses + 1});
  for (std::size_t i = 0; i < cfg.n_agent; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(d.agents.boxes[i * 5 + j] == m.decoder.box.bias[j]);
  for (std::size_t i = 0; i < cfg.n_map; ++i)
    for (std::size_t j = 0; j < cfg.n_point * 2; ++j)
      CHECK(d.maps.points[i * cfg.n_point * 2 + j] == m.decoder.map_points.bias[j]);
  // Motion is the running sum of the bias displacements.
  for (std::size_t d2 = 0; d2 < 2; ++d2) {
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg.horizon; ++k) {
      acc += m.decoder.motion.bias[k * 2 + d2];
      CHECK(d.agents.motion[k * 2 + d2] == doctest::Approx(acc).epsilon(1e-14));
    }
  }
}

TEST_CASE("forward passes are bit-identical across seeded runs") {
  const Model a(small_config(), 11), b(small_config(), 11);
  CHECK(a.params().fingerprint() == b.params().fingerprint());
  const Tensor obs = random_obs(a.config(), 4);
  const auto fa = a.forward(obs, kEgoA, Command::Left), fb = b.forward(obs, kEgoA, Command::Left);
  CHECK(same(fa.agents.boxes, fb.agents.boxes));
  CHECK(same(fa.maps.points, fb.maps.points));
  CHECK(same(fa.plan.trajectories, fb.plan.trajectories));
  CHECK(same(fa.plan.scores, fb.plan.scores));
  const auto fc = a.forward(obs, kEgoA, Command::Left);
  CHECK(same(fa.e_fusion, fc.e_fusion));
  const Model c(small_config(), 12);
  CHECK(a.params().fingerprint() != c.params().fingerprint());
}

TEST_CASE("scene branch produces finite trajectories with either attention") {
  const Tensor obs = random_obs(small_config(), 6);
  Tensor with_path;
  for (bool path : {true, false}) {
    AblationFlags f;
    f.path_attention = path;
    const Model m(small_config(f), 8);
    const auto b = m.encode_bev(obs, kEgoA, false);
    const auto d = m.scene_decoder(b);
    const auto out = m.scene_branch_plan(b, d.agent_queries, d.map_queries, Command::Right);
    const auto& cfg = m.config();
    CHECK(out.trajectories.shape() == Shape{cfg.n_mode, cfg.horizon, 2});
    CHECK(out.scores.shape() == Shape{cfg.n_mode});
    CHECK(out.queries.shape() == Shape{cfg.n_mode, cfg.channels});
    CHECK(out.reference_points.size() == cfg.interaction_layers);
    CHECK(all_finite(out.trajectories));
    CHECK(all_finite(out.scores));
    if (path) {
      with_path = out.trajectories;
    } else {
      CHECK(max_abs_diff(with_path, out.trajectories) > 0.0);
    }
  }
}

TEST_CASE("ego branch starts from the constant-velocity rollout") {
  const Model m(small_config(), 9);
  const Tensor obs = random_obs(m.config(), 7);
  const double xs[] = {2.5, 5.0, 7.5, 10.0, 12.5, 15.0};
  for (double v : {5.0, 0.0}) {
    const EgoStatus ego{{v, 0.0}, 0.0, 0.0, Command::Straight};
    const auto b = m.encode_bev(obs, ego, true);
    const auto out = m.ego_branch_plan(b, ego, Command::Straight);
    const Tensor& ref = out.reference_points.front();
    REQUIRE(ref.shape() == Shape{3, 6, 2});
    for (std::size_t mode = 0; mode < 3; ++mode)
      for (std::size_t k = 0; k < 6; ++k) {
        const Vec2 w = grid_point_to_world(kSpec, ref[(mode * 6 + k) * 2], ref[(mode * 6 + k) * 2 + 1]);
        CHECK(w.x == doctest::Approx(v == 0.0 ? 0.0 : xs[k]).epsilon(1e-12));
        CHECK(w.y == doctest::Approx(0.0));
      }
    CHECK(all_finite(out.trajectories));
    CHECK(out.trajectories.shape() == Shape{3, 6, 2});
  }
  const Tensor cv = constant_velocity_rollout({{2.0, -1.0}, 0.0, 0.0, Command::Left}, 6, 0.5);
  CHECK(cv[10] == doctest::Approx(6.0));
  CHECK(cv[11] == doctest::Approx(-3.0));
}

TEST_CASE("scene-aware initialization pools the scene BEV") {
  Model m(small_config(), 10);
  const std::size_t C = m.config().channels;
  std::vector<double> eye(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) eye[i * C + i] = 1.0;
  std::copy(eye.begin(), eye.end(), m.fusion.pooled.weight.mutable_data().begin());
  fill(m.fusion.pooled.bias, 0.0);

  const BevSpec tiny{0.0, 2.0, 0.0, 2.0, 1.0};
  std::vector<double> v;
  for (std::size_t c = 0; c < C; ++c)
    for (double x : {1.0, 2.0, 3.0, 4.0}) v.push_back(x);
  const Tensor init = m.scene_aware_init(BevGrid(tiny, Tensor::from({C, 2, 2}, v)));
  const Tensor& emb = m.fusion.modality_embed;
  REQUIRE(init.shape() == Shape{3, C});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < C; ++c) CHECK(init[r * C + c] - emb[r * C + c] == doctest::Approx(2.5).epsilon(1e-14));

  const Tensor constant = m.scene_aware_init(BevGrid(kSpec, Tensor::full({C, 15, 30}, -0.75)));
  for (std::size_t c = 0; c < C; ++c) CHECK(constant[c] - emb[c] == doctest::Approx(-0.75).epsilon(1e-12));
  // Rows differ only by their modality embeddings.
  for (std::size_t c = 0; c < C; ++c)
    CHECK(constant[C + c] - constant[c] == doctest::Approx(emb[C + c] - emb[c]).epsilon(1e-12));

  AblationFlags f;
  f.scene_aware_init = false;
  const Model off(small_config(f), 10);
  CHECK(same(off.scene_aware_init(BevGrid(kSpec, Tensor::full({C, 15, 30}, 3.0))), off.fusion.modality_embed));
}

TEST_CASE("fusion context layout and the zero-attention case") {
  Model m(small_config(), 13);
  const std::size_t C = m.config().channels, N = m.config().n_mode;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  auto rand = [&](Shape s) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& x : t.mutable_data()) x = g(rng);
    return t;
  };
  const Tensor ewoes = rand({N, C}), ewes = rand({N, C}), ef = rand({N, C});
  auto& layer = m.fusion.layers[0];
  for (Linear* l : {&layer.self_attn.v, &layer.self_attn.out}) {
    fill(l->weight, 0.0);
    fill(l->bias, 0.0);
  }
  const Tensor ctx = m.fusion_context(0, ewoes, ewes);
  REQUIRE(ctx.shape() == Shape{2 * N, C});
  const Tensor top = layer_norm(layer.proj_woes(ewoes), 1), bottom = layer_norm(layer.proj_wes(ewes), 1);
  for (std::size_t i = 0; i < N * C; ++i) {
    CHECK(ctx[i] == doctest::Approx(top[i]).epsilon(1e-12));
    CHECK(ctx[N * C + i] == doctest::Approx(bottom[i]).epsilon(1e-12));
  }

  for (Linear* l : {&layer.cross_attn.v, &layer.cross_attn.out}) {
    fill(l->weight, 0.0);
    fill(l->bias, 0.0);
  }
  const Tensor out = m.fusion_layer(0, ef, ewoes, ewes);
  const Tensor expect = ef + layer.ffn(layer_norm(ef, 1));
  REQUIRE(out.shape() == Shape{N, C});
  for (std::size_t i = 0; i < N * C; ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  CHECK(m.fusion_layer(1, out, ewoes, ewes).shape() == Shape{N, C});
}

TEST_CASE("plan decoding") {
  Model m(small_config(), 14);
  const std::size_t C = m.config().channels;
  const Tensor ef = Tensor::full({3, C}, 0.3);
  auto& h = m.fusion.head;
  for (Linear* l : {&h.displacement, &h.score}) {
    fill(l->weight, 0.0);
    fill(l->bias, 0.0);
  }
  auto p = m.decode_plan(ef, Command::Left);
  for (double x : p.trajectories.data()) CHECK(x == 0.0);
  CHECK(p.scores[0] == p.scores[1]);
  CHECK(p.scores[1] == p.scores[2]);
  CHECK(p.selected == 0);

  for (std::size_t k = 0; k < 6; ++k) {
    h.displacement.bias.mutable_data()[2 * k] = 1.25;
    h.displacement.bias.mutable_data()[2 * k + 1] = -0.5;
  }
  p = m.decode_plan(ef, Command::Left);
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(p.trajectory.waypoints[k].x == doctest::Approx(1.25 * (k + 1)).epsilon(1e-14));
    CHECK(p.trajectory.waypoints[k].y == doctest::Approx(-0.5 * (k + 1)).epsilon(1e-14));
  }
  CHECK(p.trajectory.dt == 0.5);

  const Model fresh(small_config(), 15);
  const auto out = fresh.forward(random_obs(fresh.config(), 3), kEgoA, Command::Straight);
  CHECK(all_finite(out.plan.scores));
  const Tensor sm = softmax(out.plan.scores, 0);
  double s = 0.0;
  for (double x : sm.data()) s += x;
  CHECK(std::fabs(s - 1.0) <= 1e-12);
}

TEST_CASE("mode selection breaks ties by lowest index") {
  CHECK(select_mode(Tensor::from({3}, {0.5, 0.5, 0.1})) == 0);
  CHECK(select_mode(Tensor::from({3}, {0.1, 0.7, 0.7})) == 1);
  CHECK(select_mode(Tensor::from({3}, {0.1, 0.2, 0.7})) == 2);
}

TEST_CASE("prefix waypoints") {
  const Tensor d = Tensor::from({1, 6}, {1, 2, 3, 4, 5, 6});
  const Tensor w = prefix_waypoints(d, 3);
  CHECK(w.shape() == Shape{1, 3, 2});
  const double expect[] = {1, 2, 4, 6, 9, 12};
  for (std::size_t i = 0; i < 6; ++i) CHECK(w[i] == expect[i]);
  CHECK_THROWS_AS(prefix_waypoints(d, 2), ShapeError);
}

TEST_CASE("configuration errors") {
  AblationFlags f;
  f.dual_branch = false;
  f.scene_aware_init = false;
  f.autoregressive_map = false;
  f.distill = true;
  CHECK_THROWS_AS(Model(small_config(f), 1), std::invalid_argument);
  ModelConfig c = small_config();
  c.channels = 30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.attention_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(small_config(ladder_flags(0)).validate());
}

TEST_CASE("ablation ladder") {
  const AblationFlags id1 = ladder_flags(0);
  CHECK_FALSE(id1.dual_branch);
  CHECK_FALSE(id1.distill);
  CHECK_FALSE(id1.scene_aware_init);
  CHECK_FALSE(id1.autoregressive_map);
  CHECK(id1.ego_enhancement);
  CHECK(ladder_flags(4) == AblationFlags{});
  CHECK(flags_label(ladder_flags(0)) == "baseline");
  CHECK(flags_label(ladder_flags(2)) == "D+B");
  CHECK(flags_label(ladder_flags(4)) == "D+B+S+A");
  CHECK_THROWS_AS(ladder_flags(5), std::out_of_range);
}

TEST_CASE("single-branch baseline reacts to ego perturbation") {
  const Model m(small_config(ladder_flags(0)), 16);
  const Tensor obs = random_obs(m.config(), 5);
  const auto a = m.forward(obs, kEgoA, Command::Straight);
  CHECK_FALSE(a.b_wes.has_value());
  CHECK_FALSE(a.ego.has_value());
  CHECK(same(a.plan.trajectories, a.scene.trajectories));
  const auto b = m.forward(obs, perturb_ego(kEgoA, PerturbMode::Abs100), Command::Straight);
  CHECK(max_abs_diff(a.plan.trajectories, b.plan.trajectories) > 0.0);
  CHECK(m.teacher_parameter_names().empty());
}

TEST_CASE("full model activates both branches") {
  const Model m(small_config(), 17);
  const auto out = m.forward(random_obs(m.config(), 8), kEgoA, Command::Left);
  CHECK(out.b_wes.has_value());
  CHECK(out.ego.has_value());
  CHECK(out.e_fusion.shape() == Shape{3, 32});
  const auto names = m.teacher_parameter_names();
  CHECK_FALSE(names.empty());
  for (const auto& n : names) CHECK((n.rfind("ego.", 0) == 0 || n.rfind("encoder.ego_proj.", 0) == 0));
}

TEST_CASE("severed ego branch makes the plan invariant to ego status") {
  const Model m(small_config(), 18);
  const Tensor obs = random_obs(m.config(), 9);
  ForwardOptions opt;
  opt.sever_ego_branch = true;
  const auto base = m.forward(obs, kEgoA, Command::Right, opt);
  CHECK_FALSE(base.ego.has_value());
  for (PerturbMode p : kPerturbModes) {
    const auto out = m.forward(obs, perturb_ego(kEgoA, p), Command::Right, opt);
    CHECK(same(out.plan.trajectories, base.plan.trajectories));
    CHECK(same(out.plan.scores, base.plan.scores));
  }
  // Without severing, the ego branch moves the plan.
  const auto a = m.forward(obs, kEgoA, Command::Right), b = m.forward(obs, kEgoB, Command::Right);
  CHECK(max_abs_diff(a.plan.trajectories, b.plan.trajectories) > 0.0);
}

TEST_CASE("model runs on generated scenarios") {
  WorldConfig wc;
  wc.spec = kSpec;
  const Model m(small_config(), 19);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Scenario s = generate_scenario(seed, 0.5, wc);
    const Trajectory t = m.plan(s.obs.tensor(), s.ego, s.command);
    CHECK(t.waypoints.size() == 6);
    for (const Vec2& p : t.waypoints) CHECK((std::isfinite(p.x) && std::isfinite(p.y)));
  }
}
