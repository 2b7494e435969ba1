#include "dbp/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <tuple>

namespace dbp {

namespace {

Tensor conv_weight(ParamStore& ps, const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng) {
  return ps.uniform(name, {out, in, 3, 3}, 1.0 / std::sqrt(static_cast<double>(in * 9)), rng);
}

Tensor embedding(ParamStore& ps, const std::string& name, std::size_t rows, std::size_t C, std::mt19937_64& rng) {
  return ps.uniform(name, {rows, C}, 1.0, rng);
}

Tensor row(const Tensor& table, std::size_t i) { return take_rows(table, {i}); }

// Fixed 2-D sinusoidal code per cell, HW x C.
Tensor positional_code(const BevSpec& spec, std::size_t C) {
  const std::size_t H = spec.height(), W = spec.width(), q = C / 4;
  std::vector<double> v(H * W * C, 0.0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(W);
      const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(H);
      double* out = v.data() + (r * W + c) * C;
      for (std::size_t f = 0; f < q; ++f) {
        const double freq = std::numbers::pi * std::pow(2.0, static_cast<double>(f) * 4.0 / static_cast<double>(q));
        out[4 * f] = std::sin(freq * x);
        out[4 * f + 1] = std::cos(freq * x);
        out[4 * f + 2] = std::sin(freq * y);
        out[4 * f + 3] = std::cos(freq * y);
      }
    }
  return Tensor::from({H * W, C}, std::move(v));
}

Tensor flatten_tokens(const BevGrid& b) {
  const std::size_t C = b.channels(), HW = b.features.dim(1) * b.features.dim(2);
  return transpose(reshape(b.features, {C, HW}));
}

}  // namespace

AblationFlags ladder_flags(std::size_t rung) {
  if (rung > 4) throw std::out_of_range("ablation ladder has rungs 0..4");
  AblationFlags f;
  f.dual_branch = rung >= 1;
  f.distill = rung >= 2;
  f.scene_aware_init = rung >= 3;
  f.autoregressive_map = rung >= 4;
  f.ego_enhancement = rung == 0;
  f.path_attention = true;
  return f;
}

std::string flags_label(const AblationFlags& f) {
  std::string s;
  auto add = [&s](bool on, const char* k) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += k;
  };
  add(f.dual_branch, "D");
  add(f.distill, "B");
  add(f.scene_aware_init, "S");
  add(f.autoregressive_map, "A");
  return s.empty() ? "baseline" : s;
}

void ModelConfig::validate() const {
  spec.validate();
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("model config: " + msg);
  };
  need(obs_channels > 0 && stem_channels > 0 && channels > 0, "channel counts must be positive");
  need(channels % 4 == 0, "channels must be a multiple of 4");
  need(attention_heads > 0 && channels % attention_heads == 0, "channels must divide by attention_heads");
  need(n_agent > 0 && n_map > 0 && n_point >= 2 && n_mode > 0, "query counts must be positive");
  need(horizon > 0 && dt > 0.0 && samples > 0, "horizon, dt and samples must be positive");
  need(decoder_layers > 0 && interaction_layers > 0, "decoder and interaction layers must be positive");
  need(!flags.dual_branch || fusion_layers > 0, "fusion needs at least one layer");
  need(!flags.distill || flags.dual_branch, "distillation requires dual_branch");
  need(!flags.scene_aware_init || flags.dual_branch, "scene_aware_init requires dual_branch");
  need(max_offset >= 0.0, "max_offset must be non-negative");
}

Tensor ego_features(const EgoStatus& ego) {
  return Tensor::from({1, 4}, {ego.velocity.x / 10.0, ego.velocity.y / 10.0, ego.acceleration / 2.0, ego.yaw_rate});
}

Tensor constant_velocity_rollout(const EgoStatus& ego, std::size_t horizon, double dt) {
  std::vector<double> v;
  for (std::size_t k = 1; k <= horizon; ++k) {
    const double t = dt * static_cast<double>(k);
    v.push_back(ego.velocity.x * t);
    v.push_back(ego.velocity.y * t);
  }
  return Tensor::from({horizon, 2}, std::move(v));
}

Tensor prefix_waypoints(const Tensor& displacements, std::size_t horizon) {
  const std::size_t n = displacements.dim(0), w = horizon * 2;
  if (displacements.rank() != 2 || displacements.dim(1) != w) {
    throw ShapeError("prefix_waypoints: expected n x " + std::to_string(w) + ", got " + shape_str(displacements.shape()));
  }
  std::vector<double> p(w * w, 0.0);
  for (std::size_t j = 0; j < horizon; ++j)
    for (std::size_t k = j; k < horizon; ++k)
      for (std::size_t d = 0; d < 2; ++d) p[(j * 2 + d) * w + k * 2 + d] = 1.0;
  return reshape(matmul(displacements, Tensor::from({w, w}, std::move(p))), {n, horizon, 2});
}

Tensor world_to_grid(const BevSpec& spec, const Tensor& pts) {
  const double inv = 1.0 / spec.resolution;
  return pts * inv + Tensor::from({2}, {-spec.x_min * inv - 0.5, -spec.y_min * inv - 0.5});
}

TrajectoryHead TrajectoryHead::create(ParamStore& ps, const std::string& name, std::size_t C, std::size_t T,
                                      std::mt19937_64& rng, bool with_command) {
  TrajectoryHead h;
  if (with_command) h.command_embed = embedding(ps, name + ".command", kNumCommands, C, rng);
  h.displacement = Linear::create(ps, name + ".displacement", C, T * 2, rng);
  h.score = Linear::create(ps, name + ".score", C, 1, rng);
  h.horizon = T;
  return h;
}

std::pair<Tensor, Tensor> TrajectoryHead::operator()(const Tensor& queries, Command cmd) const {
  const Tensor q = command_embed.defined() ? queries + row(command_embed, static_cast<std::size_t>(cmd)) : queries;
  const Tensor traj = prefix_waypoints(displacement(q), horizon);
  return {traj, reshape(score(q), {queries.dim(0)})};
}

std::size_t select_mode(const Tensor& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.numel(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

Trajectory mode_trajectory(const Tensor& trajectories, std::size_t mode, double dt) {
  const std::size_t T = trajectories.dim(1);
  Trajectory t;
  t.dt = dt;
  for (std::size_t k = 0; k < T; ++k) t.waypoints.push_back({trajectories[(mode * T + k) * 2], trajectories[(mode * T + k) * 2 + 1]});
  return t;
}

// ---- construction ----------------------------------------------------------

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  ParamStore& ps = params_;
  const std::size_t C = cfg.channels, S = cfg.stem_channels, T = cfg.horizon, N = cfg.n_mode;
  const bool dual = cfg.flags.dual_branch;

  encoder.stem1_w = conv_weight(ps, "encoder.stem1.weight", S, cfg.obs_channels, rng);
  encoder.stem1_b = ps.zeros("encoder.stem1.bias", {S});
  encoder.stem2_w = conv_weight(ps, "encoder.stem2.weight", S, S, rng);
  encoder.stem2_b = ps.zeros("encoder.stem2.bias", {S});
  encoder.final_w = conv_weight(ps, "encoder.final.weight", C, S, rng);
  encoder.final_b = ps.zeros("encoder.final.bias", {C});
  if (dual || cfg.flags.ego_enhancement) encoder.ego_proj = Linear::create(ps, "encoder.ego_proj", 4, S, rng);

  decoder.agent_queries = embedding(ps, "decoder.agent_queries", cfg.n_agent, C, rng);
  decoder.map_queries = embedding(ps, "decoder.map_queries", cfg.n_map, C, rng);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    decoder.layers.push_back({MultiHeadAttention::create(ps, p + ".cross", C, cfg.attention_heads, rng),
                              FeedForward::create(ps, p + ".ffn", C, cfg.ffn_hidden, rng)});
  }
  decoder.box = Linear::create(ps, "decoder.box", C, 5, rng);
  decoder.agent_cls = Linear::create(ps, "decoder.agent_cls", C, kNumAgentClasses + 1, rng);
  decoder.motion = Linear::create(ps, "decoder.motion", C, T * 2, rng);
  decoder.map_points = Linear::create(ps, "decoder.map_points", C, cfg.n_point * 2, rng);
  decoder.map_cls = Linear::create(ps, "decoder.map_cls", C, kNumMapClasses + 1, rng);
  decoder.positional = positional_code(cfg.spec, C);

  const PathAttentionConfig pa{C, T, cfg.samples, 0, cfg.max_offset};
  auto interaction = [&](const std::string& p, bool with_context) {
    InteractionLayer il;
    if (with_context) {
      il.agent_attn = MultiHeadAttention::create(ps, p + ".agent_attn", C, cfg.attention_heads, rng);
      il.map_attn = MultiHeadAttention::create(ps, p + ".map_attn", C, cfg.attention_heads, rng);
    }
    il.reference = Linear::create(ps, p + ".reference", C, T * 2, rng);
    il.path = PathAttention::create(ps, p + ".path", pa, rng);
    il.ffn = FeedForward::create(ps, p + ".ffn", C, cfg.ffn_hidden, rng);
    return il;
  };

  scene.mode_embed = embedding(ps, "scene.mode_embed", N, C, rng);
  scene.command_embed = embedding(ps, "scene.command_embed", kNumCommands, C, rng);
  for (std::size_t l = 0; l < cfg.interaction_layers; ++l) scene.layers.push_back(interaction("scene.layer" + std::to_string(l), true));
  scene.head = TrajectoryHead::create(ps, "scene.head", C, T, rng, false);

  if (dual) {
    ego.mode_embed = embedding(ps, "ego.mode_embed", N, C, rng);
    ego.command_embed = embedding(ps, "ego.command_embed", kNumCommands, C, rng);
    ego.ego_embed = Linear::create(ps, "ego.ego_embed", 4, C, rng);
    ego.delta = Linear::create(ps, "ego.delta", C, T * 2, rng, Init::Zero);
    for (std::size_t l = 0; l < cfg.interaction_layers; ++l) ego.layers.push_back(interaction("ego.layer" + std::to_string(l), false));
    ego.head = TrajectoryHead::create(ps, "ego.head", C, T, rng, false);

    fusion.pooled = Linear::create(ps, "fusion.pooled", C, C, rng);
    fusion.modality_embed = embedding(ps, "fusion.modality_embed", N, C, rng);
    for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
      const std::string p = "fusion.layer" + std::to_string(l);
      fusion.layers.push_back({Linear::create(ps, p + ".proj_woes", C, C, rng),
                               Linear::create(ps, p + ".proj_wes", C, C, rng),
                               MultiHeadAttention::create(ps, p + ".self_attn", C, cfg.attention_heads, rng),
                               MultiHeadAttention::create(ps, p + ".cross_attn", C, cfg.attention_heads, rng),
                               FeedForward::create(ps, p + ".ffn", C, cfg.ffn_hidden, rng)});
    }
    fusion.head = TrajectoryHead::create(ps, "fusion.head", C, T, rng, true);
  }
}

std::vector<std::string> Model::teacher_parameter_names() const {
  std::vector<std::string> out;
  if (!cfg_.flags.dual_branch) return out;
  for (const auto& [name, t] : params_.entries())
    if (name.rfind("encoder.ego_proj.", 0) == 0 || name.rfind("ego.", 0) == 0) out.push_back(name);
  return out;
}

// ---- encoder ---------------------------------------------------------------

Tensor Model::shared_stem(const Tensor& obs) const {
  const Shape want{cfg_.obs_channels, cfg_.spec.height(), cfg_.spec.width()};
  if (obs.shape() != want) throw ShapeError("encode_bev", obs.shape(), want);
  const Tensor h = relu(conv2d(obs, encoder.stem1_w, encoder.stem1_b));
  return relu(conv2d(h, encoder.stem2_w, encoder.stem2_b));
}

BevGrid Model::finish_bev(const Tensor& stem, const EgoStatus& ego, bool with_ego) const {
  Tensor h = stem;
  if (with_ego) {
    if (!encoder.ego_proj.weight.defined()) throw std::logic_error("encode_bev: model has no ego projection");
    h = h + reshape(encoder.ego_proj(ego_features(ego)), {cfg_.stem_channels, 1, 1});
  }
  return BevGrid(cfg_.spec, conv2d(h, encoder.final_w, encoder.final_b));
}

BevGrid Model::encode_bev(const Tensor& obs, const EgoStatus& ego, bool with_ego) const {
  return finish_bev(shared_stem(obs), ego, with_ego);
}

// ---- scene decoder ---------------------------------------------------------

Model::SceneDecoding Model::scene_decoder(const BevGrid& b) const {
  const std::size_t na = cfg_.n_agent, nm = cfg_.n_map, T = cfg_.horizon;
  const Tensor tokens = flatten_tokens(b) + decoder.positional;
  Tensor q = concat({decoder.agent_queries, decoder.map_queries}, 0);
  for (const auto& layer : decoder.layers) {
    q = layer_norm(q + cross_attention(layer.cross, q, tokens), 1);
    q = layer_norm(q + layer.ffn(q), 1);
  }
  SceneDecoding out;
  out.agent_queries = slice(q, 0, 0, na);
  out.map_queries = slice(q, 0, na, na + nm);
  out.agents.boxes = decoder.box(out.agent_queries);
  out.agents.logits = decoder.agent_cls(out.agent_queries);
  out.agents.motion = prefix_waypoints(decoder.motion(out.agent_queries), T);
  out.maps.points = reshape(decoder.map_points(out.map_queries), {nm, cfg_.n_point, 2});
  out.maps.logits = decoder.map_cls(out.map_queries);
  return out;
}

// ---- planning branches -----------------------------------------------------

Tensor Model::interact(const InteractionLayer& layer, const Tensor& q, const Tensor& refs_world, const BevGrid& b) const {
  const Tensor refs = world_to_grid(cfg_.spec, refs_world);  // N x T x 2
  Tensor att;
  if (cfg_.flags.path_attention) {
    att = layer.path(q, refs, b.features);
  } else {
    att = layer.path.deformable(q, mean(refs, 1), b.features);
  }
  const Tensor h = layer_norm(q + att, 1);
  return layer_norm(h + layer.ffn(h), 1);
}

BranchOutput Model::scene_branch_plan(const BevGrid& b_woes, const Tensor& agent_q, const Tensor& map_q,
                                      Command cmd) const {
  BranchOutput out;
  Tensor q = scene.mode_embed + row(scene.command_embed, static_cast<std::size_t>(cmd));
  for (const auto& layer : scene.layers) {
    q = layer_norm(q + cross_attention(layer.agent_attn, q, agent_q), 1);
    q = layer_norm(q + cross_attention(layer.map_attn, q, map_q), 1);
    const Tensor prelim = prefix_waypoints(layer.reference(q), cfg_.horizon);
    out.reference_points.push_back(world_to_grid(cfg_.spec, prelim));
    q = interact(layer, q, prelim, b_woes);
  }
  out.queries = q;
  std::tie(out.trajectories, out.scores) = scene.head(q, cmd);
  return out;
}

BranchOutput Model::ego_branch_plan(const BevGrid& b_wes, const EgoStatus& ego_status, Command cmd) const {
  if (!cfg_.flags.dual_branch) throw std::logic_error("ego_branch_plan: single-branch model");
  const std::size_t T = cfg_.horizon;
  BranchOutput out;
  const Tensor base = constant_velocity_rollout(ego_status, T, cfg_.dt);  // T x 2
  const Tensor feat = ego.ego_embed(ego_features(ego_status));        // 1 x C
  Tensor q = ego.mode_embed + row(ego.command_embed, static_cast<std::size_t>(cmd)) + feat;
  for (std::size_t l = 0; l < ego.layers.size(); ++l) {
    const auto& layer = ego.layers[l];
    const Tensor residual = l == 0 ? reshape(ego.delta(feat), {1, T, 2}) + Tensor::zeros({cfg_.n_mode, T, 2})
                                   : prefix_waypoints(layer.reference(q), T);
    const Tensor refs = residual + base;
    out.reference_points.push_back(world_to_grid(cfg_.spec, refs));
    q = interact(layer, q, refs, b_wes);
  }
  out.queries = q;
  auto [traj, scores] = ego.head(q, cmd);
  out.trajectories = traj + base;
  out.scores = scores;
  return out;
}

// ---- fusion ----------------------------------------------------------------

Tensor Model::scene_aware_init(const BevGrid& b_woes) const {
  if (!cfg_.flags.dual_branch) throw std::logic_error("scene_aware_init: single-branch model");
  const std::size_t C = cfg_.channels;
  if (!cfg_.flags.scene_aware_init) return fusion.modality_embed + Tensor::zeros({1, C});
  const Tensor pooled = reshape(mean(reshape(b_woes.features, {C, b_woes.features.numel() / C}), 1), {1, C});
  return fusion.modality_embed + fusion.pooled(pooled);
}

Tensor Model::fusion_context(std::size_t layer, const Tensor& e_woes, const Tensor& e_wes) const {
  const FusionLayer& f = fusion.layers.at(layer);
  const Tensor multi = concat({f.proj_woes(e_woes), f.proj_wes(e_wes)}, 0);  // 2N x C
  return layer_norm(multi + mhsa(f.self_attn, multi), 1);
}

Tensor Model::fusion_layer(std::size_t layer, const Tensor& e_fusion, const Tensor& e_woes, const Tensor& e_wes) const {
  const FusionLayer& f = fusion.layers.at(layer);
  const Tensor ctx = fusion_context(layer, e_woes, e_wes);
  Tensor e = e_fusion + cross_attention(f.cross_attn, layer_norm(e_fusion, 1), ctx);
  return e + f.ffn(layer_norm(e, 1));
}

PlanOutput Model::decode_plan(const Tensor& e_fusion, Command cmd) const {
  PlanOutput p;
  std::tie(p.trajectories, p.scores) = fusion.head(e_fusion, cmd);
  p.selected = select_mode(p.scores);
  p.trajectory = mode_trajectory(p.trajectories, p.selected, cfg_.dt);
  return p;
}

// ---- full pass -------------------------------------------------------------

ForwardOutputs Model::forward(const Tensor& obs, const EgoStatus& ego_status, Command cmd,
                              const ForwardOptions& opt) const {
  ForwardOutputs out;
  const Tensor stem = shared_stem(obs);
  out.b_woes = finish_bev(stem, ego_status, cfg_.flags.ego_enhancement);
  auto sd = scene_decoder(*out.b_woes);
  out.agents = sd.agents;
  out.maps = sd.maps;
  out.agent_queries = sd.agent_queries;
  out.map_queries = sd.map_queries;
  out.scene = scene_branch_plan(*out.b_woes, sd.agent_queries, sd.map_queries, cmd);

  if (!cfg_.flags.dual_branch) {
    out.plan.trajectories = out.scene.trajectories;
    out.plan.scores = out.scene.scores;
    out.plan.selected = select_mode(out.scene.scores);
    out.plan.trajectory = mode_trajectory(out.scene.trajectories, out.plan.selected, cfg_.dt);
    return out;
  }

  Tensor e_wes;
  if (opt.sever_ego_branch) {
    e_wes = Tensor::zeros({cfg_.n_mode, cfg_.channels});
  } else {
    out.b_wes = finish_bev(stem, ego_status, true);
    out.ego = ego_branch_plan(*out.b_wes, ego_status, cmd);
    e_wes = out.ego->queries;
  }
  Tensor e = scene_aware_init(*out.b_woes);
  for (std::size_t l = 0; l < fusion.layers.size(); ++l) e = fusion_layer(l, e, out.scene.queries, e_wes);
  out.e_fusion = e;
  out.plan = decode_plan(e, cmd);
  return out;
}

Trajectory Model::plan(const Tensor& obs, const EgoStatus& ego_status, Command cmd, const ForwardOptions& opt) const {
  NoGradGuard guard;
  return forward(obs, ego_status, cmd, opt).plan.trajectory;
}

}  // namespace dbp
