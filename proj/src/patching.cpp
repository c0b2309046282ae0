#include "himtm/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "himtm/errors.hpp"
#include "himtm/ops.hpp"

namespace himtm {

void PatchSpec::validate() const {
  if (patch_len == 0 || stride == 0 || sub_len == 0 || n_sub == 0 || hierarchies == 0) {
    throw ConfigError("patch geometry values must be positive");
  }
  if (sub_len * n_sub != patch_len) {
    throw ConfigError("sub-patches must tile a coarse patch: sub_len " + std::to_string(sub_len) +
                      " * n_sub " + std::to_string(n_sub) + " != patch_len " +
                      std::to_string(patch_len));
  }
  if (hierarchies > 16 || n_sub != (std::size_t{1} << (hierarchies - 1))) {
    throw ConfigError("n_sub " + std::to_string(n_sub) + " must equal 2^(hierarchies-1) for " +
                      std::to_string(hierarchies) + " hierarchies");
  }
}

std::size_t PatchSpec::coarse_count(std::size_t lookback) const {
  if (lookback < patch_len) {
    throw DataError("input too short: look-back " + std::to_string(lookback) +
                    " < patch length " + std::to_string(patch_len));
  }
  return (lookback - patch_len) / stride + 1;
}

std::size_t PatchSpec::segment_len(std::size_t level) const {
  if (level == 0 || level > hierarchies) throw ContractError("hierarchy level out of range");
  return sub_len << (level - 1);
}

std::size_t PatchSpec::tokens_per_coarse(std::size_t level) const {
  if (level == 0 || level > hierarchies) throw ContractError("hierarchy level out of range");
  return n_sub >> (level - 1);
}

std::vector<std::size_t> MaskPlan::visible() const {
  std::vector<std::size_t> out;
  out.reserve(n_coarse - masked.size());
  for (std::size_t i = 0; i < n_coarse; ++i)
    if (!is_masked(i)) out.push_back(i);
  return out;
}

bool MaskPlan::is_masked(std::size_t coarse) const {
  return std::binary_search(masked.begin(), masked.end(), coarse);
}

std::size_t mask_count(std::size_t n_coarse, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_coarse) + 0.5));
  return std::min(k, n_coarse);
}

MaskPlan make_mask_plan(std::size_t n_coarse, double ratio, std::uint64_t seed) {
  MaskPlan plan;
  plan.n_coarse = n_coarse;
  plan.ratio = ratio;
  plan.seed = seed;
  const std::size_t k = mask_count(n_coarse, ratio);
  std::vector<std::size_t> order(n_coarse);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_coarse - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  plan.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

std::span<const double> PatchSet::token(std::size_t fine) const {
  return std::span<const double>(fine_tokens).subspan(fine * sub_len, sub_len);
}

PatchSet segment_series(std::span<const double> window, const PatchSpec& spec,
                        std::size_t channel_id) {
  spec.validate();
  PatchSet set;
  set.n_coarse = spec.coarse_count(window.size());
  set.n_sub = spec.n_sub;
  set.sub_len = spec.sub_len;
  set.channel_id = channel_id;
  set.fine_tokens.reserve(set.n_coarse * spec.patch_len);
  for (std::size_t c = 0; c < set.n_coarse; ++c) {
    auto first = window.begin() + static_cast<std::ptrdiff_t>(c * spec.stride);
    set.fine_tokens.insert(set.fine_tokens.end(), first,
                           first + static_cast<std::ptrdiff_t>(spec.patch_len));
  }
  return set;
}

TokenSplit split_visible_masked(const PatchSet& patches, const MaskPlan& plan) {
  if (plan.n_coarse != patches.n_coarse) {
    throw ContractError("mask plan covers " + std::to_string(plan.n_coarse) +
                        " coarse patches, patch set has " + std::to_string(patches.n_coarse));
  }
  TokenSplit split;
  for (std::size_t i = 0; i < patches.fine_count(); ++i) {
    auto tok = patches.token(i);
    if (plan.is_masked(patches.coarse_of(i))) {
      split.masked_tokens.insert(split.masked_tokens.end(), tok.begin(), tok.end());
      split.masked_positions.push_back(i);
    } else {
      split.visible_tokens.insert(split.visible_tokens.end(), tok.begin(), tok.end());
      split.visible_positions.push_back(i);
    }
  }
  return split;
}

std::vector<double> targets_at_hierarchy(const PatchSet& patches, const MaskPlan& plan,
                                         const PatchSpec& spec, std::size_t level) {
  const std::size_t seg = spec.segment_len(level);
  const std::size_t per_coarse = spec.tokens_per_coarse(level);
  const std::size_t fine_per_seg = seg / spec.sub_len;
  std::vector<double> out;
  out.reserve(plan.masked.size() * spec.patch_len);
  for (std::size_t c : plan.masked) {
    for (std::size_t g = 0; g < per_coarse; ++g) {
      for (std::size_t f = 0; f < fine_per_seg; ++f) {
        auto tok = patches.token(c * patches.n_sub + g * fine_per_seg + f);
        out.insert(out.end(), tok.begin(), tok.end());
      }
    }
  }
  return out;
}

std::vector<std::size_t> masked_slots(const MaskPlan& plan, const PatchSpec& spec,
                                      std::size_t level) {
  const std::size_t per_coarse = spec.tokens_per_coarse(level);
  std::vector<std::size_t> out;
  out.reserve(plan.masked.size() * per_coarse);
  for (std::size_t c : plan.masked)
    for (std::size_t g = 0; g < per_coarse; ++g) out.push_back(c * per_coarse + g);
  return out;
}

PatchEmbedding::PatchEmbedding(std::size_t sub_len, std::size_t d_model,
                               std::size_t max_positions, ParameterStore& store,
                               std::mt19937_64& rng, const std::string& prefix)
    : sub_len_(sub_len), d_model_(d_model), max_positions_(max_positions) {
  weight_ = store.add_parameter(prefix + ".conv.weight",
                                init::truncated_normal({sub_len, d_model}, 0.02, rng));
  bias_ = store.add_parameter(prefix + ".conv.bias", Tensor::zeros({d_model}));
  positional_ = store.add_parameter(prefix + ".pos", Tensor::zeros({max_positions, d_model}));
}

Tensor PatchEmbedding::forward(const Tensor& tokens, std::span<const std::size_t> positions) const {
  if (tokens.dim() != 3 || tokens.size(2) != sub_len_) {
    throw ShapeError("patch_embed: tokens must be [batch, n, " + std::to_string(sub_len_) +
                     "], got " + to_string(tokens.shape()));
  }
  const std::size_t batch = tokens.size(0);
  const std::size_t n = tokens.size(1);
  if (positions.size() != batch * n) {
    throw ContractError("patch_embed: " + std::to_string(positions.size()) +
                        " positions for " + std::to_string(batch * n) + " tokens");
  }
  for (std::size_t p : positions) {
    if (p >= max_positions_) {
      throw ConfigError("positional index " + std::to_string(p) + " outside table of " +
                        std::to_string(max_positions_) + " positions");
    }
  }
  Tensor projected = add(matmul(tokens, weight_), bias_);
  Tensor pos = reshape(gather_rows(positional_, positions), {batch, n, d_model_});
  return add(projected, pos);
}

}  // namespace himtm
