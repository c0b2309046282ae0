#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "himtm/ops.hpp"
#include "himtm/params.hpp"

namespace himtm {

struct ForwardContext {
  Mode mode = Mode::kEval;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
};

/// y = x W + b, W: [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, ParameterStore& store, std::mt19937_64& rng,
         const std::string& prefix);

  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

struct AttentionOutput {
  Tensor output;   // [batch, nq, d_model]
  Tensor weights;  // [batch, heads, nq, nk], rows sum to 1 (before dropout)
};

/// Concat(head_1..head_h) W^O with head_i = Softmax(Q_i K_i^T / sqrt(d_k)) V_i.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t heads, ParameterStore& store,
                     std::mt19937_64& rng, const std::string& prefix);

  /// query: [batch, nq, d_model]; key_value: [batch, nk, d_model].
  AttentionOutput forward(const Tensor& query, const Tensor& key_value,
                          const ForwardContext& ctx) const;

  std::size_t heads() const { return heads_; }
  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& o() const { return o_; }

 private:
  Tensor split_heads(const Tensor& x) const;

  std::size_t d_model_ = 0;
  std::size_t heads_ = 0;
  Linear q_, k_, v_, o_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::size_t channels, ParameterStore& store, const std::string& prefix);

  Tensor forward(const Tensor& x, Mode mode) const;
  const Tensor& gamma() const { return gamma_; }
  const Tensor& beta() const { return beta_; }
  BatchNormStats& stats() const { return stats_; }

 private:
  Tensor gamma_;
  Tensor beta_;
  mutable BatchNormStats stats_;
};

/// Post-norm encoder layer:
///   Y1 = BN(X + MSA(X, X, X)),  Y = BN(Y1 + FFN(Y1)),  FFN = Linear -> GELU -> Linear.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t d_ff,
                   ParameterStore& store, std::mt19937_64& rng, const std::string& prefix);

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  /// Same layer with queries attending to a separate key/value sequence.
  Tensor forward_cross(const Tensor& query, const Tensor& key_value,
                       const ForwardContext& ctx) const;

  const MultiHeadAttention& attention() const { return attn_; }

 private:
  MultiHeadAttention attn_;
  BatchNorm norm1_;
  Linear ff1_, ff2_;
  BatchNorm norm2_;
};

}  // namespace himtm
