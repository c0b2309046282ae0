#include "himtm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "himtm/errors.hpp"
#include "himtm/optim.hpp"
#include "himtm/rng.hpp"

namespace himtm {

void PretrainConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("pretrain mask ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
  }
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss weights alpha and beta must be >= 0");
  if (batch_size == 0) throw ConfigError("pretrain batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretrain learning rate must be positive");
  if (!(loss_threshold > 0.0)) throw ConfigError("smooth L1 threshold must be positive");
  if (window_stride == 0) throw ConfigError("window stride must be positive");
}

std::size_t MaskedBatch::masked_per_sample(std::size_t level) const {
  return batch == 0 ? 0 : masked_slots.at(level).size() / batch;
}

MaskedBatch make_masked_batch(std::span<const std::span<const double>> windows,
                              const PatchSpec& spec, double mask_ratio, std::mt19937_64& rng) {
  std::vector<MaskPlan> plans;
  plans.reserve(windows.size());
  for (const auto& w : windows) {
    plans.push_back(make_mask_plan(spec.coarse_count(w.size()), mask_ratio, rng()));
  }
  return make_masked_batch(windows, spec, std::move(plans));
}

MaskedBatch make_masked_batch(std::span<const std::span<const double>> windows,
                              const PatchSpec& spec, std::vector<MaskPlan> plans) {
  if (windows.empty()) throw ContractError("make_masked_batch: empty batch");
  if (plans.size() != windows.size()) throw ContractError("make_masked_batch: one plan per window");
  MaskedBatch b;
  b.batch = windows.size();
  const std::size_t levels = spec.hierarchies;
  b.masked_slots.resize(levels);
  std::vector<std::vector<double>> targets(levels);
  std::vector<double> visible, masked;
  std::size_t n_visible = 0, n_masked = 0;

  for (std::size_t i = 0; i < windows.size(); ++i) {
    PatchSet patches = segment_series(windows[i], spec);
    const MaskPlan& plan = plans[i];
    TokenSplit split = split_visible_masked(patches, plan);
    if (split.visible_positions.empty()) {
      throw ConfigError("mask ratio " + std::to_string(plan.ratio) + " leaves no visible patches");
    }
    if (split.masked_positions.empty()) {
      throw ConfigError("mask ratio " + std::to_string(plan.ratio) + " masks no patches");
    }
    if (i == 0) {
      n_visible = split.visible_positions.size();
      n_masked = split.masked_positions.size();
    } else if (split.visible_positions.size() != n_visible) {
      throw ContractError("make_masked_batch: windows disagree on the masked patch count");
    }
    visible.insert(visible.end(), split.visible_tokens.begin(), split.visible_tokens.end());
    masked.insert(masked.end(), split.masked_tokens.begin(), split.masked_tokens.end());
    b.visible_positions.insert(b.visible_positions.end(), split.visible_positions.begin(),
                               split.visible_positions.end());
    b.masked_positions.insert(b.masked_positions.end(), split.masked_positions.begin(),
                              split.masked_positions.end());
    for (std::size_t l = 0; l < levels; ++l) {
      auto t = targets_at_hierarchy(patches, plan, spec, l + 1);
      targets[l].insert(targets[l].end(), t.begin(), t.end());
      auto s = masked_slots(plan, spec, l + 1);
      b.masked_slots[l].insert(b.masked_slots[l].end(), s.begin(), s.end());
    }
  }
  b.visible_tokens = Tensor::from_vector({b.batch, n_visible, spec.sub_len}, std::move(visible));
  b.masked_tokens = Tensor::from_vector({b.batch, n_masked, spec.sub_len}, std::move(masked));
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t seg = spec.segment_len(l + 1);
    const std::size_t m = b.masked_slots[l].size() / b.batch;
    b.targets.push_back(Tensor::from_vector({b.batch, m, seg}, std::move(targets[l])));
  }
  b.plans = std::move(plans);
  return b;
}

HierarchyDecoder::HierarchyDecoder(std::size_t n_slots, std::size_t segment_len,
                                   const EncoderConfig& enc, bool use_ded, ParameterStore& store,
                                   std::mt19937_64& rng, const std::string& prefix)
    : use_ded_(use_ded), d_model_(enc.d_model) {
  queries_ = store.add_parameter(prefix + ".queries", init::normal({n_slots, enc.d_model}, 0.02, rng));
  if (use_ded_) {
    cross_ = TransformerBlock(enc.d_model, enc.heads, enc.d_ff, store, rng, prefix + ".cross");
    self_ = TransformerBlock(enc.d_model, enc.heads, enc.d_ff, store, rng, prefix + ".self");
  }
  head_ = Linear(enc.d_model, segment_len, store, rng, prefix + ".head");
}

std::pair<Tensor, Tensor> HierarchyDecoder::forward(const Tensor& visible,
                                                    std::span<const std::size_t> slots,
                                                    std::size_t m,
                                                    const ForwardContext& ctx) const {
  const std::size_t batch = visible.size(0);
  if (slots.size() != batch * m) throw ContractError("decoder: slot count does not match batch");
  for (std::size_t s : slots) {
    if (s >= queries_.size(0)) {
      throw ConfigError("masked slot " + std::to_string(s) + " outside query table of " +
                        std::to_string(queries_.size(0)));
    }
  }
  Tensor q = reshape(gather_rows(queries_, slots), {batch, m, d_model_});
  if (!use_ded_) {
    Tensor pooled = mean_axis(visible, 1);  // [batch, 1, d]
    Tensor spread = matmul(Tensor::full({m, 1}, 1.0), pooled);
    Tensor features = add(spread, q);
    return {features, head_.forward(features)};
  }
  Tensor features = cross_.forward_cross(q, visible, ctx);
  Tensor refined = self_.forward(features, ctx);
  return {features, head_.forward(refined)};
}

std::vector<Tensor> hsd_loss(const MultiScaleFeatures& teacher, const std::vector<Tensor>& predicted,
                             DistillMetric metric, double threshold) {
  if (teacher.size() != predicted.size()) {
    throw ContractError("hsd_loss: " + std::to_string(teacher.size()) + " teacher levels vs " +
                        std::to_string(predicted.size()) + " predicted");
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < predicted.size(); ++l) {
    if (teacher[l].shape() != predicted[l].shape()) {
      throw ContractError("hsd_loss: level " + std::to_string(l + 1) + " shapes " +
                          to_string(teacher[l].shape()) + " vs " + to_string(predicted[l].shape()));
    }
    out.push_back(metric == DistillMetric::kCosine ? cosine_distance(predicted[l], teacher[l])
                                                   : smooth_l1(predicted[l], teacher[l], threshold));
  }
  return out;
}

std::vector<Tensor> recon_loss(const std::vector<Tensor>& targets,
                               const std::vector<Tensor>& reconstructions, double threshold) {
  if (targets.size() != reconstructions.size()) {
    throw ContractError("recon_loss: level count mismatch");
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < targets.size(); ++l) {
    if (targets[l].shape() != reconstructions[l].shape()) {
      throw ContractError("recon_loss: level " + std::to_string(l + 1) + " shapes " +
                          to_string(targets[l].shape()) + " vs " +
                          to_string(reconstructions[l].shape()));
    }
    out.push_back(smooth_l1(reconstructions[l], targets[l], threshold));
  }
  return out;
}

PretrainModel::PretrainModel(const PatchSpec& patch, const EncoderConfig& enc,
                             const PretrainConfig& cfg, std::size_t lookback,
                             ParameterStore& store, std::mt19937_64& rng)
    : patch_(patch),
      cfg_(cfg),
      encoder_(patch, enc, patch.coarse_count(lookback) * patch.n_sub, store, rng) {
  cfg_.validate();
  const std::size_t n_coarse = patch.coarse_count(lookback);
  for (std::size_t l = 1; l <= patch.hierarchies; ++l) {
    decoders_.emplace_back(n_coarse * patch.tokens_per_coarse(l), patch.segment_len(l), enc,
                           cfg_.use_ded, store, rng, "decoder.h" + std::to_string(l));
  }
}

MultiScaleFeatures PretrainModel::student_forward(const MaskedBatch& batch,
                                                  const ForwardContext& ctx) const {
  if (batch.visible_positions.empty()) throw ConfigError("student: no visible tokens");
  return encoder_.forward(batch.visible_tokens, batch.visible_positions, ctx);
}

MultiScaleFeatures PretrainModel::teacher_forward(const MaskedBatch& batch,
                                                  TeacherMode mode) const {
  const ForwardContext eval_ctx{Mode::kEval, 0.0, nullptr};
  MultiScaleFeatures raw;
  if (mode == TeacherMode::kOutOfTape) {
    NoGradGuard no_grad;
    raw = encoder_.forward(batch.masked_tokens, batch.masked_positions, eval_ctx);
  } else {
    raw = encoder_.forward(batch.masked_tokens, batch.masked_positions, eval_ctx);
  }
  MultiScaleFeatures out;
  for (const Tensor& z : raw.levels) out.levels.push_back(stop_gradient(z));
  return out;
}

DecoderOutput PretrainModel::decode(const MultiScaleFeatures& student, const MaskedBatch& batch,
                                    const ForwardContext& ctx) const {
  DecoderOutput out;
  for (std::size_t l = 0; l < decoders_.size(); ++l) {
    auto [features, recon] =
        decoders_[l].forward(student[l], batch.masked_slots[l], batch.masked_per_sample(l), ctx);
    out.features.push_back(features);
    out.reconstructions.push_back(recon);
  }
  return out;
}

PretrainLoss PretrainModel::loss(const MaskedBatch& batch, const ForwardContext& ctx,
                                 TeacherMode mode, const MultiScaleFeatures* fixed_teacher) const {
  MultiScaleFeatures student = student_forward(batch, ctx);
  if (cfg_.detach_decoder_input) {
    for (Tensor& z : student.levels) z = stop_gradient(z);
  }
  MultiScaleFeatures teacher = fixed_teacher ? *fixed_teacher : teacher_forward(batch, mode);
  DecoderOutput dec = decode(student, batch, ctx);
  std::vector<Tensor> d = hsd_loss(teacher, dec.features, cfg_.distill_metric, cfg_.loss_threshold);
  std::vector<Tensor> r = recon_loss(batch.targets, dec.reconstructions, cfg_.loss_threshold);

  Tensor sum_d = d.front();
  Tensor sum_r = r.front();
  for (std::size_t l = 1; l < d.size(); ++l) {
    sum_d = add(sum_d, d[l]);
    sum_r = add(sum_r, r[l]);
  }
  const double alpha = cfg_.effective_alpha();
  const double beta = cfg_.beta;
  Tensor total = scale(sum_r, beta);
  if (alpha != 0.0) total = add(scale(sum_d, alpha), total);

  PretrainLoss out{total, {}};
  LossReport& rep = out.report;
  for (const Tensor& t : d) rep.distill.push_back(t.item());
  for (const Tensor& t : r) rep.recon.push_back(t.item());
  rep.distill_total = sum_d.item();
  rep.recon_total = sum_r.item();
  rep.weighted_total = total.item();
  rep.alpha = alpha;
  rep.beta = beta;
  return out;
}

PretrainResult pretrain_run(const PretrainModel& model, ParameterStore& store,
                            std::span<const std::span<const double>> windows,
                            const PretrainConfig& cfg, std::uint64_t seed, double dropout,
                            const std::function<void(const LossReport&)>& on_epoch) {
  cfg.validate();
  if (windows.empty()) throw ConfigError("pre-training needs at least one window");
  Adam adam(store.parameters(), AdamOptions{.lr = cfg.lr});
  std::mt19937_64 shuffle_rng(derive_seed(seed, "pretrain.shuffle"));
  std::mt19937_64 mask_rng(derive_seed(seed, "pretrain.mask"));
  std::mt19937_64 dropout_rng(derive_seed(seed, "pretrain.dropout"));
  const ForwardContext ctx{Mode::kTrain, dropout, &dropout_rng};

  PretrainResult result;
  std::vector<std::size_t> order(windows.size());
  std::size_t step = 0;
  const std::size_t total_steps =
      cfg.epochs * ((windows.size() + cfg.batch_size - 1) / cfg.batch_size);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossReport mean;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<std::span<const double>> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(windows[order[i]]);
      MaskedBatch batch = make_masked_batch(chunk, model.patch(), cfg.mask_ratio, mask_rng);
      PretrainLoss loss = model.loss(batch, ctx);
      adam.set_lr(scheduled_lr(cfg.lr, cfg.lr_schedule, step, total_steps));
      ++step;
      if (!std::isfinite(loss.report.weighted_total)) {
        throw NumericError("pre-training loss is not finite at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step));
      }
      store.zero_grad();
      backward(loss.total);
      adam.step();

      const LossReport& r = loss.report;
      if (batches == 0) {
        mean = r;
      } else {
        for (std::size_t l = 0; l < r.distill.size(); ++l) {
          mean.distill[l] += r.distill[l];
          mean.recon[l] += r.recon[l];
        }
        mean.distill_total += r.distill_total;
        mean.recon_total += r.recon_total;
        mean.weighted_total += r.weighted_total;
      }
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    for (std::size_t l = 0; l < mean.distill.size(); ++l) {
      mean.distill[l] *= inv;
      mean.recon[l] *= inv;
    }
    mean.distill_total *= inv;
    mean.recon_total *= inv;
    mean.weighted_total *= inv;
    mean.epoch = epoch;
    mean.step = step;
    result.epochs.push_back(mean);
    if (on_epoch) on_epoch(mean);
  }
  store.zero_grad();
  return result;
}

}  // namespace himtm
