#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "himtm/params.hpp"
#include "himtm/tensor.hpp"

namespace himtm {

/// Hierarchical patch geometry. A coarse patch of `patch_len` timesteps is cut
/// into `n_sub` non-overlapping sub-patches of `sub_len`; each hierarchy merge
/// halves the token count, so n_sub == 2^(hierarchies-1).
struct PatchSpec {
  std::size_t patch_len = 24;  // P
  std::size_t stride = 24;     // S
  std::size_t sub_len = 6;     // SP
  std::size_t n_sub = 4;
  std::size_t hierarchies = 3;  // L

  void validate() const;
  // floor((lookback - P) / S) + 1; throws DataError when lookback < P.
  std::size_t coarse_count(std::size_t lookback) const;
  // Timesteps covered by one token at hierarchy `level` (1-based): SP * 2^(level-1).
  std::size_t segment_len(std::size_t level) const;
  // Tokens per coarse patch at hierarchy `level`: n_sub / 2^(level-1).
  std::size_t tokens_per_coarse(std::size_t level) const;
};

struct MaskPlan {
  std::size_t n_coarse = 0;
  std::vector<std::size_t> masked;  // sorted coarse indices
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> visible() const;
  bool is_masked(std::size_t coarse) const;
};

/// Number of coarse patches hidden for a ratio: round half-up of ratio * n_coarse.
std::size_t mask_count(std::size_t n_coarse, double ratio);

/// Uniformly random subset (without replacement) of coarse patches, reproducible per seed.
MaskPlan make_mask_plan(std::size_t n_coarse, double ratio, std::uint64_t seed);

struct PatchSet {
  std::size_t n_coarse = 0;
  std::size_t n_sub = 0;
  std::size_t sub_len = 0;
  std::size_t channel_id = 0;
  std::vector<double> fine_tokens;  // [n_coarse * n_sub, sub_len], row-major

  std::size_t fine_count() const { return n_coarse * n_sub; }
  std::size_t coarse_of(std::size_t fine) const { return fine / n_sub; }
  std::span<const double> token(std::size_t fine) const;
};

/// Cuts one channel's look-back window into coarse patches and their fine
/// sub-patches. Trailing timesteps that do not fill a coarse patch are dropped.
PatchSet segment_series(std::span<const double> window, const PatchSpec& spec,
                        std::size_t channel_id = 0);

/// Fine tokens grouped by visibility, each tagged with its absolute fine position.
struct TokenSplit {
  std::vector<double> visible_tokens;  // [visible_positions.size(), sub_len]
  std::vector<std::size_t> visible_positions;
  std::vector<double> masked_tokens;  // [masked_positions.size(), sub_len]
  std::vector<std::size_t> masked_positions;
};

TokenSplit split_visible_masked(const PatchSet& patches, const MaskPlan& plan);

/// Reconstruction targets at hierarchy `level`: each masked coarse patch yields
/// tokens_per_coarse(level) segments of segment_len(level) raw values, laid
/// out row-major as [segments, segment_len].
std::vector<double> targets_at_hierarchy(const PatchSet& patches, const MaskPlan& plan,
                                         const PatchSpec& spec, std::size_t level);

/// Slot indices (on the full scale-`level` token grid) of the masked tokens, in order.
std::vector<std::size_t> masked_slots(const MaskPlan& plan, const PatchSpec& spec,
                                      std::size_t level);

/// Per-token linear map of each sub-patch to d_model features (a 1D convolution
/// with kernel = stride = sub_len) plus a learnable positional table indexed by
/// absolute fine position. The positional table starts at zero.
class PatchEmbedding {
 public:
  PatchEmbedding(std::size_t sub_len, std::size_t d_model, std::size_t max_positions,
                 ParameterStore& store, std::mt19937_64& rng, const std::string& prefix);

  /// tokens: [batch, n, sub_len]; positions: batch * n absolute fine indices.
  Tensor forward(const Tensor& tokens, std::span<const std::size_t> positions) const;

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  const Tensor& positional() const { return positional_; }
  std::size_t max_positions() const { return max_positions_; }

 private:
  std::size_t sub_len_;
  std::size_t d_model_;
  std::size_t max_positions_;
  Tensor weight_;      // [sub_len, d_model]
  Tensor bias_;        // [d_model]
  Tensor positional_;  // [max_positions, d_model]
};

}  // namespace himtm
