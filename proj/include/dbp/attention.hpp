#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "dbp/params.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

enum class Init { Default, Zero };

// y = x W + b with x: n x in, W: in x out. Default init is U(-1/sqrt(in), 1/sqrt(in)).
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                       std::mt19937_64& rng, Init init = Init::Default);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

// Two-layer ReLU MLP with residual-friendly output width.
struct FeedForward {
  Linear fc1, fc2;
  static FeedForward create(ParamStore& ps, const std::string& name, std::size_t width, std::size_t hidden,
                            std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Scaled dot-product multi-head attention with q/k/v/output projections.
class MultiHeadAttention {
 public:
  // Throws std::invalid_argument when channels is not divisible by heads.
  static MultiHeadAttention create(ParamStore& ps, const std::string& name, std::size_t channels, std::size_t heads,
                                   std::mt19937_64& rng);

  // queries: m x C, keys_values: n x C -> m x C.
  Tensor operator()(const Tensor& queries, const Tensor& keys_values) const;
  // Attention probabilities, heads x m x n.
  Tensor attention_weights(const Tensor& queries, const Tensor& keys_values) const;

  std::size_t heads() const { return heads_; }
  std::size_t channels() const { return channels_; }
  Linear q, k, v, out;

 private:
  std::size_t channels_ = 0;
  std::size_t heads_ = 1;
};

inline Tensor mhsa(const MultiHeadAttention& attn, const Tensor& x) { return attn(x, x); }
inline Tensor cross_attention(const MultiHeadAttention& attn, const Tensor& q, const Tensor& kv) { return attn(q, kv); }

struct PathAttentionConfig {
  std::size_t channels = 32;      // C
  std::size_t heads = 6;          // T, one head per reference point
  std::size_t samples = 4;        // K per head
  std::size_t head_channels = 0;  // C_T; 0 selects C/T when divisible, else C
  double max_offset = 4.0;        // grid cells, bound of tanh-scaled offsets

  std::size_t resolved_head_channels() const;
};

// Trajectory-guided sampling attention. Each head t owns reference point t,
// predicts K offsets (tanh-bounded, in grid cells) and K softmax weights from
// the query, samples the BEV bilinearly at the offset points and projects
// through a per-head value map W'_t (C -> C_T) and output map W_t (C_T -> C);
// head outputs are summed.
class PathAttention {
 public:
  static PathAttention create(ParamStore& ps, const std::string& name, const PathAttentionConfig& cfg,
                              std::mt19937_64& rng);

  // queries: N x C, refs: N x T x 2 grid points, grid: C x H x W -> N x C.
  Tensor operator()(const Tensor& queries, const Tensor& refs, const Tensor& grid) const;

  // Deformable-attention baseline: every head anchors at the same point.
  // ref: N x 2 grid points.
  Tensor deformable(const Tensor& queries, const Tensor& ref, const Tensor& grid) const;

  Tensor weights(const Tensor& queries) const;  // N x T x K, rows sum to 1
  Tensor offsets(const Tensor& queries) const;  // N x T x K x 2
  Tensor sample_points(const Tensor& queries, const Tensor& refs) const;  // N x T x K x 2

  const PathAttentionConfig& config() const { return cfg_; }
  Linear offset_head;  // C -> T*K*2, zero-initialized
  Linear weight_head;  // C -> T*K, zero-initialized
  Tensor value_proj;   // T x C x C_T (W'_t transposed)
  Tensor output_proj;  // T x C_T x C (W_t transposed)

 private:
  PathAttentionConfig cfg_;
};

}  // namespace dbp
