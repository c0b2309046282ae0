#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "himtm/layers.hpp"
#include "himtm/patching.hpp"

namespace himtm {

struct EncoderConfig {
  std::vector<std::size_t> layers_per_hierarchy{2, 2, 2};
  std::size_t heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 256;
  double dropout = 0.1;

  std::size_t hierarchies() const { return layers_per_hierarchy.size(); }
  void validate() const;
};

/// One feature set per hierarchy; levels[l] is [batch, tokens_l, d_model] and
/// tokens_{l+1} == tokens_l / 2.
struct MultiScaleFeatures {
  std::vector<Tensor> levels;

  std::size_t size() const { return levels.size(); }
  const Tensor& operator[](std::size_t level) const { return levels.at(level); }
};

/// Merges adjacent token pairs: out[j] = concat(z[2j], z[2j+1]) M + b.
/// z: [batch, n, d] with n even; merge maps 2d -> d.
Tensor merge_adjacent(const Tensor& z, const Linear& merge);

struct Hierarchy {
  std::vector<TransformerBlock> blocks;
  Linear merge;  // unset on the top hierarchy
  bool has_merge = false;
};

/// Hierarchical multi-scale transformer: each hierarchy runs its transformer
/// blocks, records its output, then merges adjacent tokens for the next one.
class HmtEncoder {
 public:
  HmtEncoder(const PatchSpec& patch, const EncoderConfig& config, std::size_t max_positions,
             ParameterStore& store, std::mt19937_64& rng, const std::string& prefix = "encoder");

  Tensor embed(const Tensor& tokens, std::span<const std::size_t> positions) const;
  MultiScaleFeatures encode(const Tensor& z0, const ForwardContext& ctx) const;
  MultiScaleFeatures forward(const Tensor& tokens, std::span<const std::size_t> positions,
                             const ForwardContext& ctx) const;

  const EncoderConfig& config() const { return config_; }
  const PatchEmbedding& embedding() const { return embedding_; }
  const std::vector<Hierarchy>& hierarchies() const { return hierarchies_; }

 private:
  EncoderConfig config_;
  PatchEmbedding embedding_;
  std::vector<Hierarchy> hierarchies_;
};

}  // namespace himtm
