#pragma once

// Dual-branch planner.
//
//   obs ──stem──┬─(no ego)────final── B_woes ─ scene decoder ─ A, M
//               │                         │                     │
//               │                         └──── scene branch ◄──┘ ─ E_woes
//               └─(+ ego embed)─final── B_wes ── ego branch ──────── E_wes
//
//   E_fusion = init(B_woes) ─ fusion layers(E_woes, E_wes) ─ decode_plan
//
// With dual_branch off only the scene path exists and its own trajectory
// head produces the plan.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dbp/attention.hpp"
#include "dbp/bev.hpp"
#include "dbp/losses.hpp"
#include "dbp/params.hpp"
#include "dbp/scene_types.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

struct AblationFlags {
  bool dual_branch = true;
  bool distill = true;
  bool scene_aware_init = true;
  bool autoregressive_map = true;
  bool ego_enhancement = false;  // ego embedding injected into the scene-branch BEV
  bool path_attention = true;    // false: deformable baseline with one anchor
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

// Rung i (0-based) of the incremental ladder: {}, {D}, {D,B}, {D,B,S}, {D,B,S,A}.
// The single-branch rung keeps ego enhancement; the others drop it.
AblationFlags ladder_flags(std::size_t rung);
std::string flags_label(const AblationFlags& f);  // e.g. "D+B+S"

struct ModelConfig {
  std::size_t obs_channels = 7;
  std::size_t stem_channels = 16;
  std::size_t channels = 32;  // C
  std::size_t n_agent = 8;
  std::size_t n_map = 8;
  std::size_t n_point = 20;
  std::size_t n_mode = 3;
  std::size_t horizon = 6;  // T, also the path-attention head count
  double dt = 0.5;
  std::size_t samples = 4;  // K
  double max_offset = 4.0;  // grid cells
  std::size_t decoder_layers = 2;
  std::size_t interaction_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t ffn_hidden = 64;
  BevSpec spec;
  AblationFlags flags;

  // Throws std::invalid_argument on inconsistent sizes or flags
  // (distillation requires the dual-branch layout).
  void validate() const;
};

// Normalized ego features [vx/10, vy/10, a/2, yaw_rate] as a 1 x 4 tensor.
Tensor ego_features(const EgoStatus& ego);

// Constant-velocity rollout, T x 2.
Tensor constant_velocity_rollout(const EgoStatus& ego, std::size_t horizon, double dt);

// Per-step displacements n x (T*2) -> cumulative waypoints n x T x 2.
Tensor prefix_waypoints(const Tensor& displacements, std::size_t horizon);

// World meters (any leading shape, last axis 2) -> continuous grid points.
Tensor world_to_grid(const BevSpec& spec, const Tensor& pts);

struct TrajectoryHead {
  Tensor command_embed;  // 3 x C, undefined when the head ignores the command
  Linear displacement;   // C -> T*2
  Linear score;          // C -> 1
  std::size_t horizon = 0;

  static TrajectoryHead create(ParamStore& ps, const std::string& name, std::size_t C, std::size_t T,
                               std::mt19937_64& rng, bool with_command);
  // queries: N x C. Returns N x T x 2 waypoints and N scores.
  std::pair<Tensor, Tensor> operator()(const Tensor& queries, Command cmd) const;
};

struct BranchOutput {
  Tensor queries;       // N_mode x C after the last interaction layer
  Tensor trajectories;  // N_mode x T x 2
  Tensor scores;        // N_mode
  std::vector<Tensor> reference_points;  // per layer, N_mode x T x 2 grid points
};

struct PlanOutput {
  Tensor trajectories;  // N_mode x T x 2
  Tensor scores;        // N_mode
  std::size_t selected = 0;
  Trajectory trajectory;  // the selected mode
};

struct ForwardOptions {
  bool sever_ego_branch = false;  // feed zeros for E_wes into fusion
};

struct ForwardOutputs {
  std::optional<BevGrid> b_woes;
  std::optional<BevGrid> b_wes;
  AgentPredictions agents;
  MapPredictions maps;
  Tensor agent_queries, map_queries;
  BranchOutput scene;
  std::optional<BranchOutput> ego;
  Tensor e_fusion;
  PlanOutput plan;
};

// Selects argmax score, lowest index on ties.
std::size_t select_mode(const Tensor& scores);
Trajectory mode_trajectory(const Tensor& trajectories, std::size_t mode, double dt);

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  // Parameters that only the ego-enhanced path touches.
  std::vector<std::string> teacher_parameter_names() const;

  BevGrid encode_bev(const Tensor& obs, const EgoStatus& ego, bool with_ego) const;

  struct SceneDecoding {
    AgentPredictions agents;
    MapPredictions maps;
    Tensor agent_queries, map_queries;
  };
  SceneDecoding scene_decoder(const BevGrid& b) const;
  BranchOutput scene_branch_plan(const BevGrid& b_woes, const Tensor& agent_q, const Tensor& map_q,
                                 Command cmd) const;
  BranchOutput ego_branch_plan(const BevGrid& b_wes, const EgoStatus& ego, Command cmd) const;
  Tensor scene_aware_init(const BevGrid& b_woes) const;
  // E'_multi of one fusion layer: rows [0, N_mode) scene context, then ego context.
  Tensor fusion_context(std::size_t layer, const Tensor& e_woes, const Tensor& e_wes) const;
  Tensor fusion_layer(std::size_t layer, const Tensor& e_fusion, const Tensor& e_woes, const Tensor& e_wes) const;
  PlanOutput decode_plan(const Tensor& e_fusion, Command cmd) const;

  ForwardOutputs forward(const Tensor& obs, const EgoStatus& ego, Command cmd, const ForwardOptions& opt = {}) const;
  // Inference convenience: no tape, selected trajectory only.
  Trajectory plan(const Tensor& obs, const EgoStatus& ego, Command cmd, const ForwardOptions& opt = {}) const;

  // Components, exposed for tests.
  struct Encoder {
    Tensor stem1_w, stem1_b, stem2_w, stem2_b, final_w, final_b;
    Linear ego_proj;  // 4 -> stem channels
  } encoder;

  struct DecoderLayer {
    MultiHeadAttention cross;
    FeedForward ffn;
  };
  struct SceneDecoder {
    Tensor agent_queries, map_queries;
    std::vector<DecoderLayer> layers;
    Linear box, agent_cls, motion, map_points, map_cls;
    Tensor positional;  // HW x C, constant
  } decoder;

  struct InteractionLayer {
    MultiHeadAttention agent_attn, map_attn;  // scene branch only
    Linear reference;                         // C -> T*2 displacements
    PathAttention path;
    FeedForward ffn;
  };
  struct SceneBranch {
    Tensor mode_embed;
    Tensor command_embed;
    std::vector<InteractionLayer> layers;
    TrajectoryHead head;
  } scene;

  struct EgoBranch {
    Tensor mode_embed;
    Tensor command_embed;
    Linear ego_embed;  // 4 -> C
    Linear delta;      // C -> T*2, zero-initialized
    std::vector<InteractionLayer> layers;
    TrajectoryHead head;  // residual over the constant-velocity rollout
  } ego;

  struct FusionLayer {
    Linear proj_woes, proj_wes;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
  };
  struct Fusion {
    Linear pooled;         // C -> C
    Tensor modality_embed; // N_mode x C
    std::vector<FusionLayer> layers;
    TrajectoryHead head;
  } fusion;

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Tensor shared_stem(const Tensor& obs) const;
  BevGrid finish_bev(const Tensor& stem, const EgoStatus& ego, bool with_ego) const;
  Tensor interact(const InteractionLayer& layer, const Tensor& q, const Tensor& refs_world, const BevGrid& b) const;
};

}  // namespace dbp
