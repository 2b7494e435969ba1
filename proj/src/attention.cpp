#include "dbp/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace dbp {

Linear Linear::create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                      std::mt19937_64& rng, Init init) {
  if (init == Init::Zero) return {ps.zeros(name + ".weight", {in, out}), ps.zeros(name + ".bias", {out})};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = ps.uniform(name + ".weight", {in, out}, bound, rng);
  Tensor b = ps.uniform(name + ".bias", {out}, bound, rng);
  return {w, b};
}

Tensor Linear::operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

FeedForward FeedForward::create(ParamStore& ps, const std::string& name, std::size_t width, std::size_t hidden,
                                std::mt19937_64& rng) {
  return {Linear::create(ps, name + ".fc1", width, hidden, rng), Linear::create(ps, name + ".fc2", hidden, width, rng)};
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& ps, const std::string& name, std::size_t channels,
                                              std::size_t heads, std::mt19937_64& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw std::invalid_argument("MultiHeadAttention '" + name + "': channels " + std::to_string(channels) +
                                " not divisible by heads " + std::to_string(heads));
  }
  MultiHeadAttention m;
  m.q = Linear::create(ps, name + ".q", channels, channels, rng);
  m.k = Linear::create(ps, name + ".k", channels, channels, rng);
  m.v = Linear::create(ps, name + ".v", channels, channels, rng);
  m.out = Linear::create(ps, name + ".out", channels, channels, rng);
  m.channels_ = channels;
  m.heads_ = heads;
  return m;
}

Tensor MultiHeadAttention::attention_weights(const Tensor& queries, const Tensor& keys_values) const {
  if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(1) != channels_ ||
      keys_values.dim(1) != channels_) {
    throw ShapeError("attention", queries.shape(), keys_values.shape());
  }
  const std::size_t m = queries.dim(0), n = keys_values.dim(0), d = channels_ / heads_;
  const Tensor qh = permute(reshape(q(queries), {m, heads_, d}), {1, 0, 2});      // h x m x d
  const Tensor kh = permute(reshape(k(keys_values), {n, heads_, d}), {1, 2, 0});  // h x d x n
  return softmax(bmm(qh, kh) * (1.0 / std::sqrt(static_cast<double>(d))), 2);
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys_values) const {
  const std::size_t m = queries.dim(0), n = keys_values.dim(0), d = channels_ / heads_;
  const Tensor attn = attention_weights(queries, keys_values);
  const Tensor vh = permute(reshape(v(keys_values), {n, heads_, d}), {1, 0, 2});  // h x n x d
  const Tensor ctx = reshape(permute(bmm(attn, vh), {1, 0, 2}), {m, channels_});
  return out(ctx);
}

std::size_t PathAttentionConfig::resolved_head_channels() const {
  if (head_channels) return head_channels;
  return heads && channels % heads == 0 ? channels / heads : channels;
}

PathAttention PathAttention::create(ParamStore& ps, const std::string& name, const PathAttentionConfig& cfg,
                                    std::mt19937_64& rng) {
  if (cfg.channels == 0 || cfg.heads == 0 || cfg.samples == 0) {
    throw std::invalid_argument("PathAttention '" + name + "': channels, heads and samples must be positive");
  }
  PathAttention p;
  p.cfg_ = cfg;
  const std::size_t c = cfg.channels, t = cfg.heads, k = cfg.samples, ct = cfg.resolved_head_channels();
  p.offset_head = Linear::create(ps, name + ".offset", c, t * k * 2, rng, Init::Zero);
  p.weight_head = Linear::create(ps, name + ".weight", c, t * k, rng, Init::Zero);
  p.value_proj = ps.uniform(name + ".value", {t, c, ct}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  p.output_proj = ps.uniform(name + ".output", {t, ct, c}, 1.0 / std::sqrt(static_cast<double>(ct)), rng);
  return p;
}

Tensor PathAttention::weights(const Tensor& queries) const {
  const std::size_t n = queries.dim(0);
  return softmax(reshape(weight_head(queries), {n, cfg_.heads, cfg_.samples}), 2);
}

Tensor PathAttention::offsets(const Tensor& queries) const {
  const std::size_t n = queries.dim(0);
  return reshape(tanh(offset_head(queries)) * cfg_.max_offset, {n, cfg_.heads, cfg_.samples, 2});
}

Tensor PathAttention::sample_points(const Tensor& queries, const Tensor& refs) const {
  const std::size_t n = queries.dim(0);
  if (refs.rank() != 3 || refs.dim(0) != n || refs.dim(2) != 2 || refs.dim(1) != cfg_.heads) {
    throw ShapeError("path_attention: reference points vs heads", refs.shape(), {n, cfg_.heads, 2});
  }
  return reshape(refs, {n, cfg_.heads, 1, 2}) + offsets(queries);
}

Tensor PathAttention::operator()(const Tensor& queries, const Tensor& refs, const Tensor& grid) const {
  if (queries.rank() != 2 || queries.dim(1) != cfg_.channels) {
    throw ShapeError("path_attention: queries", queries.shape(), {0, cfg_.channels});
  }
  if (grid.rank() != 3 || grid.dim(0) != cfg_.channels) {
    throw ShapeError("path_attention: grid", grid.shape(), {cfg_.channels, 0, 0});
  }
  const std::size_t n = queries.dim(0), t = cfg_.heads, k = cfg_.samples, c = cfg_.channels;
  const Tensor pts = sample_points(queries, refs);
  const Tensor sampled = reshape(grid_sample(grid, reshape(pts, {n * t * k, 2})), {n, t, k, c});
  const Tensor a = reshape(weights(queries), {n, t, k, 1});
  // W'_t is linear, so weighting before projecting equals projecting each sample.
  const Tensor agg = permute(sum(sampled * a, 2), {1, 0, 2});  // T x N x C
  const Tensor heads = bmm(bmm(agg, value_proj), output_proj);  // T x N x C
  return sum(heads, 0);
}

Tensor PathAttention::deformable(const Tensor& queries, const Tensor& ref, const Tensor& grid) const {
  const std::size_t n = queries.dim(0);
  if (ref.rank() != 2 || ref.dim(0) != n || ref.dim(1) != 2) {
    throw ShapeError("deformable_attention: reference point", ref.shape(), {n, 2});
  }
  const Tensor refs = reshape(ref, {n, 1, 2}) + Tensor::zeros({n, cfg_.heads, 2});
  return (*this)(queries, refs, grid);
}

}  // namespace dbp
