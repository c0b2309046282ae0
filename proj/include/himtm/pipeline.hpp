#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "himtm/checkpoint.hpp"
#include "himtm/config.hpp"
#include "himtm/data.hpp"
#include "himtm/finetune.hpp"
#include "himtm/pretrain.hpp"

namespace himtm {

using ProgressFn = std::function<void(const std::string&)>;

/// Loaded (or generated), split, standardized data with the windows of every split.
struct PreparedData {
  MultiSeries raw;
  Standardized standardized;
  SplitBounds bounds;
  std::vector<std::span<const double>> pretrain_windows;  // look-back only, train split
  std::vector<std::size_t> pretrain_starts;               // parallel to pretrain_windows
  ForecastData forecast;                                  // points into standardized.series
};

/// PreparedData holds spans into itself; keep it where it was constructed.
void prepare_data(const RunConfig& cfg, PreparedData& out);

/// Index-range audit: every window lies fully inside its own split. Throws ContractError.
void audit_windows(const PreparedData& data, const RunConfig& cfg);

/// eval.naive_period, or the longest synthetic period, or 24.
std::size_t naive_period(const RunConfig& cfg);

/// Repeat-last-period forecast: y_hat[h] = x[lookback - p + (h mod p)].
EvalResult naive_baseline(const ForecastData& data, std::span<const WindowRef> windows,
                          std::size_t period, double loss_threshold = 1.0);

/// Throws ConfigError naming both values when a checkpoint's geometry
/// (look-back, patching, encoder shape, and for fine-tuned checkpoints the head) disagrees.
void check_geometry(const Checkpoint& ckpt, const RunConfig& cfg);

struct PretrainArtifacts {
  std::string checkpoint;
  std::string loss_csv;
  PretrainResult result;
};

/// Writes <out_dir>/pretrain.ckpt and <out_dir>/pretrain_loss.csv.
PretrainArtifacts run_pretrain(const RunConfig& cfg, const std::string& out_dir,
                               const ProgressFn& progress = {});

struct FinetuneArtifacts {
  std::string checkpoint;
  std::string metrics_csv;
  FinetuneResult result;
  EvalResult naive;
};

/// Fine-tunes from `from_checkpoint` (encoder weights only), or from random
/// initialization when it is empty. Writes <out_dir>/finetune.ckpt and <out_dir>/metrics.csv.
FinetuneArtifacts run_finetune(const RunConfig& cfg, const std::string& out_dir,
                               const std::string& from_checkpoint,
                               const ProgressFn& progress = {});

struct EvalArtifacts {
  EvalResult val;
  EvalResult test;
  EvalResult naive;
};

/// Evaluates a fine-tuned checkpoint and writes an epoch,split,mse,mae,loss file.
EvalArtifacts run_eval(const RunConfig& cfg, const std::string& checkpoint,
                       const std::string& out_csv);

/// Per-window test forecasts: window_start,channel,h,y_true,y_pred (standardized units).
std::size_t run_forecast(const RunConfig& cfg, const std::string& checkpoint,
                         const std::string& out_csv);

struct PipelineResult {
  FinetuneArtifacts finetune;
  EvalArtifacts eval;
};

/// pretrain (unless skipped) + finetune + eval inside out_dir.
PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir,
                            bool pretrain = true, const ProgressFn& progress = {});

/// Applies one sweep value: mask_ratio, lookback, patch_len, depth ("2-2-2"), or width (d_model).
RunConfig sweep_variant(const RunConfig& cfg, const std::string& param, const std::string& value);

struct SummaryRow {
  std::string label;
  std::string value;
  std::size_t best_epoch = 0;
  Metrics test;
  double test_loss = 0.0;
  double naive_mse = 0.0;
};

/// One pipeline per value; writes <out_dir>/sweep.csv.
std::vector<SummaryRow> run_sweep(const RunConfig& cfg, const std::string& param,
                                  const std::vector<std::string>& values,
                                  const std::string& out_dir, const ProgressFn& progress = {});

/// Drops one component: hsd, ded, hmt, or csa.
RunConfig ablation_variant(const RunConfig& cfg, const std::string& drop);

/// One pipeline per variant (plus "full" when requested); writes <out_dir>/ablation.csv.
std::vector<SummaryRow> run_ablation(const RunConfig& cfg, const std::vector<std::string>& drops,
                                     bool include_full, const std::string& out_dir,
                                     const ProgressFn& progress = {});

}  // namespace himtm
