#include "himtm/encoder.hpp"

#include "himtm/errors.hpp"

namespace himtm {

void EncoderConfig::validate() const {
  if (layers_per_hierarchy.empty()) throw ConfigError("encoder needs at least one hierarchy");
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

Tensor merge_adjacent(const Tensor& z, const Linear& merge) {
  if (z.dim() != 3) throw ShapeError("merge: expected [batch, n, d], got " + to_string(z.shape()));
  const std::size_t n = z.size(1);
  if (n % 2 != 0) {
    throw ContractError("merge: token count " + std::to_string(n) +
                        " is odd; masking must keep coarse patches whole");
  }
  // Row-major [b, n, d] viewed as [b, n/2, 2d] concatenates each adjacent pair.
  return merge.forward(reshape(z, {z.size(0), n / 2, 2 * z.size(2)}));
}

HmtEncoder::HmtEncoder(const PatchSpec& patch, const EncoderConfig& config,
                       std::size_t max_positions, ParameterStore& store, std::mt19937_64& rng,
                       const std::string& prefix)
    : config_(config),
      embedding_(patch.sub_len, config.d_model, max_positions, store, rng, prefix + ".embed") {
  config_.validate();
  patch.validate();
  if (patch.hierarchies != config_.hierarchies()) {
    throw ConfigError("patch geometry has " + std::to_string(patch.hierarchies) +
                      " hierarchies, encoder has " + std::to_string(config_.hierarchies()));
  }
  const std::size_t levels = config_.hierarchies();
  hierarchies_.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string base = prefix + ".h" + std::to_string(l + 1);
    for (std::size_t b = 0; b < config_.layers_per_hierarchy[l]; ++b) {
      hierarchies_[l].blocks.emplace_back(config_.d_model, config_.heads, config_.d_ff, store,
                                          rng, base + ".block" + std::to_string(b));
    }
    if (l + 1 < levels) {
      hierarchies_[l].merge = Linear(2 * config_.d_model, config_.d_model, store, rng,
                                     base + ".merge");
      hierarchies_[l].has_merge = true;
    }
  }
}

Tensor HmtEncoder::embed(const Tensor& tokens, std::span<const std::size_t> positions) const {
  return embedding_.forward(tokens, positions);
}

MultiScaleFeatures HmtEncoder::encode(const Tensor& z0, const ForwardContext& ctx) const {
  if (z0.dim() != 3 || z0.size(2) != config_.d_model) {
    throw ShapeError("encode: expected [batch, n, " + std::to_string(config_.d_model) +
                     "], got " + to_string(z0.shape()));
  }
  const std::size_t factor = std::size_t{1} << (hierarchies_.size() - 1);
  if (z0.size(1) == 0 || z0.size(1) % factor != 0) {
    throw ContractError("encode: " + std::to_string(z0.size(1)) +
                        " tokens not divisible by 2^(L-1) = " + std::to_string(factor));
  }
  MultiScaleFeatures out;
  Tensor z = z0;
  for (const Hierarchy& h : hierarchies_) {
    for (const TransformerBlock& block : h.blocks) z = block.forward(z, ctx);
    out.levels.push_back(z);
    if (h.has_merge) z = merge_adjacent(z, h.merge);
  }
  return out;
}

MultiScaleFeatures HmtEncoder::forward(const Tensor& tokens,
                                       std::span<const std::size_t> positions,
                                       const ForwardContext& ctx) const {
  return encode(embed(tokens, positions), ctx);
}

}  // namespace himtm
