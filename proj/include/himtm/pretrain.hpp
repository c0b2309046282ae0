#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "himtm/encoder.hpp"
#include "himtm/optim.hpp"
#include "himtm/patching.hpp"

namespace himtm {

enum class DistillMetric { kSmoothL1, kCosine };

struct PretrainConfig {
  double mask_ratio = 0.5;
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  bool use_hsd = true;  // false forces alpha = 0
  bool use_ded = true;  // false swaps the cross-attention decoder for pooled linear heads
  DistillMetric distill_metric = DistillMetric::kSmoothL1;
  bool detach_decoder_input = false;
  double loss_threshold = 1.0;
  std::size_t window_stride = 1;

  double effective_alpha() const { return use_hsd ? alpha : 0.0; }
  void validate() const;
};

/// One mini-batch of single-channel windows, patched and split by per-window mask plans.
/// Every window masks the same number of coarse patches so the halves stack.
struct MaskedBatch {
  std::size_t batch = 0;
  Tensor visible_tokens;  // [batch, n_visible, sub_len]
  std::vector<std::size_t> visible_positions;
  Tensor masked_tokens;  // [batch, n_masked, sub_len]
  std::vector<std::size_t> masked_positions;
  std::vector<std::vector<std::size_t>> masked_slots;  // per level, batch * m_l
  std::vector<Tensor> targets;                         // per level, [batch, m_l, seg_l]
  std::vector<MaskPlan> plans;

  std::size_t masked_per_sample(std::size_t level) const;
};

MaskedBatch make_masked_batch(std::span<const std::span<const double>> windows,
                              const PatchSpec& spec, double mask_ratio, std::mt19937_64& rng);

/// Same as above with explicit plans (one per window).
MaskedBatch make_masked_batch(std::span<const std::span<const double>> windows,
                              const PatchSpec& spec, std::vector<MaskPlan> plans);

struct DecoderOutput {
  std::vector<Tensor> features;         // predicted masked features, per level [batch, m_l, d]
  std::vector<Tensor> reconstructions;  // per level [batch, m_l, seg_l]
};

/// Decoder for one hierarchy: learnable per-slot queries cross-attend to the
/// student's features (predicting the masked features), then a self-attention
/// block and a linear head reconstruct the raw segments.
class HierarchyDecoder {
 public:
  HierarchyDecoder(std::size_t n_slots, std::size_t segment_len, const EncoderConfig& enc,
                   bool use_ded, ParameterStore& store, std::mt19937_64& rng,
                   const std::string& prefix);

  /// visible: [batch, v, d]; slots: batch * m slot indices.
  std::pair<Tensor, Tensor> forward(const Tensor& visible, std::span<const std::size_t> slots,
                                    std::size_t m, const ForwardContext& ctx) const;

  const Tensor& queries() const { return queries_; }

 private:
  bool use_ded_;
  std::size_t d_model_;
  Tensor queries_;  // [n_slots, d]
  TransformerBlock cross_;
  TransformerBlock self_;
  Linear head_;
};

struct LossReport {
  std::vector<double> distill;  // L_D per hierarchy
  std::vector<double> recon;    // L_R per hierarchy
  double distill_total = 0.0;
  double recon_total = 0.0;
  double weighted_total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t epoch = 0;
  std::size_t step = 0;
};

struct PretrainLoss {
  Tensor total;
  LossReport report;
};

enum class TeacherMode {
  kOnTape,     // teacher runs with the tape recording, outputs cut by stop_gradient
  kOutOfTape,  // teacher runs with recording disabled
};

std::vector<Tensor> hsd_loss(const MultiScaleFeatures& teacher, const std::vector<Tensor>& predicted,
                             DistillMetric metric, double threshold = 1.0);
std::vector<Tensor> recon_loss(const std::vector<Tensor>& targets,
                               const std::vector<Tensor>& reconstructions, double threshold = 1.0);

class PretrainModel {
 public:
  PretrainModel(const PatchSpec& patch, const EncoderConfig& enc, const PretrainConfig& cfg,
                std::size_t lookback, ParameterStore& store, std::mt19937_64& rng);

  MultiScaleFeatures student_forward(const MaskedBatch& batch, const ForwardContext& ctx) const;
  /// Shared-weight encoder on the masked tokens; eval-mode BatchNorm, detached outputs.
  MultiScaleFeatures teacher_forward(const MaskedBatch& batch,
                                     TeacherMode mode = TeacherMode::kOnTape) const;
  DecoderOutput decode(const MultiScaleFeatures& student, const MaskedBatch& batch,
                       const ForwardContext& ctx) const;

  /// alpha * sum L_D + beta * sum L_R. `fixed_teacher` replaces the teacher pass.
  PretrainLoss loss(const MaskedBatch& batch, const ForwardContext& ctx,
                    TeacherMode mode = TeacherMode::kOnTape,
                    const MultiScaleFeatures* fixed_teacher = nullptr) const;

  const HmtEncoder& encoder() const { return encoder_; }
  const std::vector<HierarchyDecoder>& decoders() const { return decoders_; }
  const PatchSpec& patch() const { return patch_; }
  const PretrainConfig& config() const { return cfg_; }

 private:
  PatchSpec patch_;
  PretrainConfig cfg_;
  HmtEncoder encoder_;
  std::vector<HierarchyDecoder> decoders_;
};

struct PretrainResult {
  std::vector<LossReport> epochs;  // per-epoch means
};

/// Mini-batch Adam pre-training over look-back windows. Randomness (shuffle,
/// masks, dropout) derives from `seed`. Aborts with NumericError on a
/// non-finite loss, naming the epoch and step.
PretrainResult pretrain_run(const PretrainModel& model, ParameterStore& store,
                            std::span<const std::span<const double>> windows,
                            const PretrainConfig& cfg, std::uint64_t seed,
                            double dropout,
                            const std::function<void(const LossReport&)>& on_epoch = {});

}  // namespace himtm
