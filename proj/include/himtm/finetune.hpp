#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "himtm/encoder.hpp"
#include "himtm/optim.hpp"
#include "himtm/patching.hpp"

namespace himtm {

enum class FinetuneMode { kFull, kLinearProbe };
enum class Aggregation { kMean, kLearned };

struct FinetuneConfig {
  std::size_t horizon = 96;
  double lr = 1e-4;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  FinetuneMode mode = FinetuneMode::kFull;
  bool use_csa = true;
  Aggregation aggregation = Aggregation::kMean;
  double loss_threshold = 1.0;
  std::size_t window_stride = 1;

  void validate() const;
};

/// Cross-scale attention: tokens of every hierarchy, tagged with a learnable
/// per-scale embedding, are concatenated into one sequence, passed through one
/// transformer block, and split back into per-hierarchy sets.
class CrossScaleAttention {
 public:
  CrossScaleAttention(std::size_t levels, const EncoderConfig& enc, ParameterStore& store,
                      std::mt19937_64& rng, const std::string& prefix);

  MultiScaleFeatures forward(const MultiScaleFeatures& z, const ForwardContext& ctx) const;
  const Tensor& scale_tags() const { return tags_; }

 private:
  std::size_t d_model_;
  Tensor tags_;  // [levels, d_model]
  TransformerBlock block_;
};

struct ForecastOutput {
  Tensor forecast;                // [batch, horizon]
  std::vector<Tensor> per_scale;  // [batch, horizon] per hierarchy
};

/// Pre-trainable encoder + optional cross-scale attention + per-scale
/// flatten-linear heads, aggregated into one horizon forecast.
class ForecastModel {
 public:
  ForecastModel(const PatchSpec& patch, const EncoderConfig& enc, const FinetuneConfig& cfg,
                std::size_t lookback, ParameterStore& store, std::mt19937_64& rng);

  /// Per-hierarchy tokens -> forecast. Applies CSA when enabled.
  ForecastOutput head(const MultiScaleFeatures& features, const ForwardContext& ctx) const;
  /// tokens: [batch, n_fine, sub_len], all positions visible.
  ForecastOutput forward(const Tensor& tokens, const ForwardContext& encoder_ctx,
                         const ForwardContext& head_ctx) const;

  const HmtEncoder& encoder() const { return encoder_; }
  const std::vector<Linear>& heads() const { return heads_; }
  const FinetuneConfig& config() const { return cfg_; }
  const PatchSpec& patch() const { return patch_; }
  std::size_t fine_tokens() const { return positions_.size(); }

 private:
  PatchSpec patch_;
  FinetuneConfig cfg_;
  HmtEncoder encoder_;
  std::optional<CrossScaleAttention> csa_;
  std::vector<Linear> heads_;
  Tensor aggregation_logits_;  // [levels], only for Aggregation::kLearned
  std::vector<std::size_t> positions_;
};

/// One supervised example: channel `channel`, look-back starting at `start`.
struct WindowRef {
  std::size_t channel = 0;
  std::size_t start = 0;
};

/// Standardized channels plus the windows of each split.
struct ForecastData {
  const std::vector<std::vector<double>>* channels = nullptr;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::vector<WindowRef> train, val, test;
};

struct ForecastBatch {
  Tensor tokens;  // [batch, n_fine, sub_len]
  Tensor target;  // [batch, horizon]
};

ForecastBatch make_forecast_batch(const ForecastData& data, std::span<const WindowRef> windows,
                                  const PatchSpec& spec);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
};

/// MSE / MAE over flat equal-length prediction and truth arrays.
Metrics forecast_metrics(std::span<const double> pred, std::span<const double> truth);

struct EvalResult {
  Metrics metrics;
  double loss = 0.0;
  std::size_t windows = 0;
};

struct ForecastRecord {
  std::size_t window_start = 0;
  std::size_t channel = 0;
  std::vector<double> y_true;
  std::vector<double> y_pred;
};

/// Eval-mode metrics over a window list. Throws DataError when it is empty.
EvalResult evaluate(const ForecastModel& model, const ForecastData& data,
                    std::span<const WindowRef> windows, std::size_t batch_size = 64,
                    std::vector<ForecastRecord>* records = nullptr);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double mse = 0.0;
  double mae = 0.0;
  double loss = 0.0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> history;  // train + val rows per epoch, then one test row
  std::size_t best_epoch = 0;
  EvalResult test;
};

/// Supervised fine-tuning with smooth-L1 loss. linear_probe freezes the encoder
/// (eval mode, not optimized). The parameters of the best validation epoch are
/// restored into `store` before the test evaluation.
FinetuneResult finetune_run(const ForecastModel& model, ParameterStore& store,
                            const ForecastData& data, const FinetuneConfig& cfg,
                            std::uint64_t seed, double dropout,
                            const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace himtm
