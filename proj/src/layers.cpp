#include "himtm/layers.hpp"

#include <cmath>

#include "himtm/errors.hpp"

namespace himtm {

Linear::Linear(std::size_t in, std::size_t out, ParameterStore& store, std::mt19937_64& rng,
               const std::string& prefix) {
  weight_ = store.add_parameter(prefix + ".weight", init::truncated_normal({in, out}, 0.02, rng));
  bias_ = store.add_parameter(prefix + ".bias", Tensor::zeros({out}));
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight_), bias_); }

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t heads,
                                       ParameterStore& store, std::mt19937_64& rng,
                                       const std::string& prefix)
    : d_model_(d_model), heads_(heads) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  q_ = Linear(d_model, d_model, store, rng, prefix + ".q");
  k_ = Linear(d_model, d_model, store, rng, prefix + ".k");
  v_ = Linear(d_model, d_model, store, rng, prefix + ".v");
  o_ = Linear(d_model, d_model, store, rng, prefix + ".o");
}

// [batch, n, d] -> [batch, heads, n, d_k]
Tensor MultiHeadAttention::split_heads(const Tensor& x) const {
  const std::size_t batch = x.size(0);
  const std::size_t n = x.size(1);
  return permute(reshape(x, {batch, n, heads_, d_model_ / heads_}), {0, 2, 1, 3});
}

AttentionOutput MultiHeadAttention::forward(const Tensor& query, const Tensor& key_value,
                                            const ForwardContext& ctx) const {
  if (query.dim() != 3 || key_value.dim() != 3 || query.size(2) != d_model_ ||
      key_value.size(2) != d_model_ || query.size(0) != key_value.size(0)) {
    throw ShapeError("attention: query " + to_string(query.shape()) + " and key/value " +
                     to_string(key_value.shape()) + " incompatible with d_model " +
                     std::to_string(d_model_));
  }
  const std::size_t batch = query.size(0);
  const std::size_t nq = query.size(1);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_model_ / heads_));

  Tensor q = split_heads(q_.forward(query));
  Tensor k = split_heads(k_.forward(key_value));
  Tensor v = split_heads(v_.forward(key_value));
  Tensor weights = softmax_rows(scale(matmul(q, transpose_last2(k)), inv_sqrt_dk));
  Tensor mixed = matmul(dropout(weights, ctx.dropout, ctx.mode, ctx.rng), v);
  Tensor merged = reshape(permute(mixed, {0, 2, 1, 3}), {batch, nq, d_model_});
  return {o_.forward(merged), weights};
}

BatchNorm::BatchNorm(std::size_t channels, ParameterStore& store, const std::string& prefix) {
  gamma_ = store.add_parameter(prefix + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = store.add_parameter(prefix + ".beta", Tensor::zeros({channels}));
  stats_.running_mean = store.add_buffer(prefix + ".running_mean", Tensor::zeros({channels}));
  stats_.running_var = store.add_buffer(prefix + ".running_var", Tensor::full({channels}, 1.0));
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) const {
  return batch_norm(x, gamma_, beta_, stats_, mode);
}

TransformerBlock::TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t d_ff,
                                   ParameterStore& store, std::mt19937_64& rng,
                                   const std::string& prefix)
    : attn_(d_model, heads, store, rng, prefix + ".attn"),
      norm1_(d_model, store, prefix + ".norm1"),
      ff1_(d_model, d_ff, store, rng, prefix + ".ff1"),
      ff2_(d_ff, d_model, store, rng, prefix + ".ff2"),
      norm2_(d_model, store, prefix + ".norm2") {}

Tensor TransformerBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
  return forward_cross(x, x, ctx);
}

Tensor TransformerBlock::forward_cross(const Tensor& query, const Tensor& key_value,
                                       const ForwardContext& ctx) const {
  Tensor attended = attn_.forward(query, key_value, ctx).output;
  Tensor y1 = norm1_.forward(add(query, attended), ctx.mode);
  Tensor ff = ff2_.forward(gelu(ff1_.forward(y1)));
  ff = dropout(ff, ctx.dropout, ctx.mode, ctx.rng);
  return norm2_.forward(add(y1, ff), ctx.mode);
}

}  // namespace himtm
