#include "himtm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "himtm/errors.hpp"
#include "himtm/optim.hpp"
#include "himtm/rng.hpp"

namespace himtm {

void FinetuneConfig::validate() const {
  if (horizon == 0) throw ConfigError("forecast horizon must be >= 1");
  if (batch_size == 0) throw ConfigError("fine-tune batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("fine-tune learning rate must be positive");
  if (!(loss_threshold > 0.0)) throw ConfigError("smooth L1 threshold must be positive");
  if (window_stride == 0) throw ConfigError("window stride must be positive");
}

CrossScaleAttention::CrossScaleAttention(std::size_t levels, const EncoderConfig& enc,
                                         ParameterStore& store, std::mt19937_64& rng,
                                         const std::string& prefix)
    : d_model_(enc.d_model),
      tags_(store.add_parameter(prefix + ".scale_tags",
                                init::truncated_normal({levels, enc.d_model}, 0.02, rng))),
      block_(enc.d_model, enc.heads, enc.d_ff, store, rng, prefix + ".block") {}

MultiScaleFeatures CrossScaleAttention::forward(const MultiScaleFeatures& z,
                                                const ForwardContext& ctx) const {
  if (z.size() != tags_.size(0)) {
    throw ContractError("cross-scale attention built for " + std::to_string(tags_.size(0)) +
                        " scales, got " + std::to_string(z.size()));
  }
  std::vector<Tensor> tagged;
  for (std::size_t l = 0; l < z.size(); ++l) {
    tagged.push_back(add(z[l], reshape(slice(tags_, 0, l, l + 1), {d_model_})));
  }
  Tensor mixed = block_.forward(concat(tagged, 1), ctx);
  MultiScaleFeatures out;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < z.size(); ++l) {
    const std::size_t n = z[l].size(1);
    out.levels.push_back(slice(mixed, 1, offset, offset + n));
    offset += n;
  }
  return out;
}

ForecastModel::ForecastModel(const PatchSpec& patch, const EncoderConfig& enc,
                             const FinetuneConfig& cfg, std::size_t lookback,
                             ParameterStore& store, std::mt19937_64& rng)
    : patch_(patch),
      cfg_(cfg),
      encoder_(patch, enc, patch.coarse_count(lookback) * patch.n_sub, store, rng) {
  cfg_.validate();
  const std::size_t n_fine = patch.coarse_count(lookback) * patch.n_sub;
  positions_.resize(n_fine);
  std::iota(positions_.begin(), positions_.end(), 0);
  const std::size_t levels = enc.hierarchies();
  if (cfg_.use_csa) csa_.emplace(levels, enc, store, rng, "csa");
  for (std::size_t l = 0; l < levels; ++l) {
    heads_.emplace_back((n_fine >> l) * enc.d_model, cfg_.horizon, store, rng,
                        "head.h" + std::to_string(l + 1));
  }
  if (cfg_.aggregation == Aggregation::kLearned) {
    aggregation_logits_ = store.add_parameter("head.aggregation", Tensor::zeros({levels}));
  }
}

ForecastOutput ForecastModel::head(const MultiScaleFeatures& features,
                                   const ForwardContext& ctx) const {
  if (features.size() != heads_.size()) {
    throw ContractError("forecast: expected " + std::to_string(heads_.size()) + " scales, got " +
                        std::to_string(features.size()));
  }
  MultiScaleFeatures z = csa_ ? csa_->forward(features, ctx) : features;
  ForecastOutput out;
  for (std::size_t l = 0; l < z.size(); ++l) {
    const Tensor& level = z[l];
    const std::size_t width = level.size(1) * level.size(2);
    if (width != heads_[l].weight().size(0)) {
      throw ConfigError("forecast head " + std::to_string(l + 1) + " expects width " +
                        std::to_string(heads_[l].weight().size(0)) + ", got " +
                        std::to_string(width));
    }
    out.per_scale.push_back(heads_[l].forward(reshape(level, {level.size(0), width})));
  }
  const std::size_t levels = out.per_scale.size();
  if (cfg_.aggregation == Aggregation::kMean) {
    Tensor total = out.per_scale.front();
    for (std::size_t l = 1; l < levels; ++l) total = add(total, out.per_scale[l]);
    out.forecast = scale(total, 1.0 / static_cast<double>(levels));
  } else {
    const std::size_t batch = out.per_scale.front().size(0);
    std::vector<Tensor> columns;
    for (const Tensor& y : out.per_scale) columns.push_back(reshape(y, {batch, cfg_.horizon, 1}));
    Tensor weights = reshape(softmax_rows(aggregation_logits_), {levels, 1});
    out.forecast = reshape(matmul(concat(columns, 2), weights), {batch, cfg_.horizon});
  }
  return out;
}

ForecastOutput ForecastModel::forward(const Tensor& tokens, const ForwardContext& encoder_ctx,
                                      const ForwardContext& head_ctx) const {
  if (tokens.dim() != 3 || tokens.size(1) != positions_.size()) {
    throw ShapeError("forecast: expected [batch, " + std::to_string(positions_.size()) +
                     ", sub_len] tokens, got " + to_string(tokens.shape()));
  }
  const std::size_t batch = tokens.size(0);
  std::vector<std::size_t> positions;
  positions.reserve(batch * positions_.size());
  for (std::size_t b = 0; b < batch; ++b)
    positions.insert(positions.end(), positions_.begin(), positions_.end());
  return head(encoder_.forward(tokens, positions, encoder_ctx), head_ctx);
}

ForecastBatch make_forecast_batch(const ForecastData& data, std::span<const WindowRef> windows,
                                  const PatchSpec& spec) {
  if (!data.channels) throw ContractError("forecast data has no series");
  std::vector<double> tokens, target;
  std::size_t n_fine = 0;
  for (const WindowRef& w : windows) {
    const std::vector<double>& series = data.channels->at(w.channel);
    if (w.start + data.lookback + data.horizon > series.size()) {
      throw ContractError("window at " + std::to_string(w.start) + " runs past the series end");
    }
    std::span<const double> x(series.data() + w.start, data.lookback);
    PatchSet patches = segment_series(x, spec, w.channel);
    n_fine = patches.fine_count();
    tokens.insert(tokens.end(), patches.fine_tokens.begin(), patches.fine_tokens.end());
    auto y = series.begin() + static_cast<std::ptrdiff_t>(w.start + data.lookback);
    target.insert(target.end(), y, y + static_cast<std::ptrdiff_t>(data.horizon));
  }
  ForecastBatch b;
  b.tokens = Tensor::from_vector({windows.size(), n_fine, spec.sub_len}, std::move(tokens));
  b.target = Tensor::from_vector({windows.size(), data.horizon}, std::move(target));
  return b;
}

Metrics forecast_metrics(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("metrics: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " targets");
  }
  if (pred.empty()) throw DataError("metrics over an empty set");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    se += d * d;
    ae += std::abs(d);
  }
  const double n = static_cast<double>(pred.size());
  return {se / n, ae / n};
}

EvalResult evaluate(const ForecastModel& model, const ForecastData& data,
                    std::span<const WindowRef> windows, std::size_t batch_size,
                    std::vector<ForecastRecord>* records) {
  if (windows.empty()) throw DataError("evaluation split has no windows");
  NoGradGuard no_grad;
  const ForwardContext eval_ctx{Mode::kEval, 0.0, nullptr};
  std::vector<double> pred, truth;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < windows.size(); begin += batch_size) {
    const std::size_t end = std::min(windows.size(), begin + batch_size);
    auto chunk = windows.subspan(begin, end - begin);
    ForecastBatch b = make_forecast_batch(data, chunk, model.patch());
    Tensor y = model.forward(b.tokens, eval_ctx, eval_ctx).forecast;
    loss_sum += smooth_l1(y, b.target, model.config().loss_threshold).item() *
                static_cast<double>(y.numel());
    pred.insert(pred.end(), y.data().begin(), y.data().end());
    truth.insert(truth.end(), b.target.data().begin(), b.target.data().end());
    if (records) {
      const std::size_t h = data.horizon;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        ForecastRecord r;
        r.window_start = chunk[i].start;
        r.channel = chunk[i].channel;
        r.y_true.assign(b.target.data().begin() + i * h, b.target.data().begin() + (i + 1) * h);
        r.y_pred.assign(y.data().begin() + i * h, y.data().begin() + (i + 1) * h);
        records->push_back(std::move(r));
      }
    }
  }
  EvalResult r;
  r.metrics = forecast_metrics(pred, truth);
  r.loss = loss_sum / static_cast<double>(pred.size());
  r.windows = windows.size();
  return r;
}

FinetuneResult finetune_run(const ForecastModel& model, ParameterStore& store,
                            const ForecastData& data, const FinetuneConfig& cfg,
                            std::uint64_t seed, double dropout,
                            const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("fine-tuning needs at least one training window");
  const bool probe = cfg.mode == FinetuneMode::kLinearProbe;
  Adam adam(probe ? store.parameters_without_prefix("encoder.") : store.parameters(),
            AdamOptions{.lr = cfg.lr});
  std::mt19937_64 shuffle_rng(derive_seed(seed, "finetune.shuffle"));
  std::mt19937_64 dropout_rng(derive_seed(seed, "finetune.dropout"));
  const ForwardContext train_ctx{Mode::kTrain, dropout, &dropout_rng};
  const ForwardContext eval_ctx{Mode::kEval, 0.0, nullptr};

  auto emit = [&](FinetuneResult& res, EpochMetrics row) {
    res.history.push_back(row);
    if (on_epoch) on_epoch(row);
  };

  FinetuneResult result;
  std::optional<ParameterSnapshot> best;
  double best_mse = std::numeric_limits<double>::infinity();
  std::vector<WindowRef> order = data.train;
  const std::size_t total_steps =
      cfg.epochs * ((order.size() + cfg.batch_size - 1) / cfg.batch_size);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double se = 0.0, ae = 0.0, loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      ForecastBatch b = make_forecast_batch(
          data, std::span<const WindowRef>(order).subspan(begin, end - begin), model.patch());
      ForecastOutput out;
      if (probe) {
        MultiScaleFeatures features;
        {
          NoGradGuard no_grad;
          std::vector<std::size_t> positions;
          const std::size_t n = model.fine_tokens();
          for (std::size_t i = 0; i < end - begin; ++i)
            for (std::size_t p = 0; p < n; ++p) positions.push_back(p);
          features = model.encoder().forward(b.tokens, positions, eval_ctx);
        }
        out = model.head(features, train_ctx);
      } else {
        out = model.forward(b.tokens, train_ctx, train_ctx);
      }
      Tensor loss = smooth_l1(out.forecast, b.target, cfg.loss_threshold);
      if (!std::isfinite(loss.item())) {
        throw NumericError("fine-tuning loss is not finite at epoch " + std::to_string(epoch));
      }
      store.zero_grad();
      backward(loss);
      adam.set_lr(scheduled_lr(cfg.lr, cfg.lr_schedule, step++, total_steps));
      adam.step();
      auto p = out.forecast.data();
      auto t = b.target.data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - t[i];
        se += d * d;
        ae += std::abs(d);
      }
      loss_sum += loss.item() * static_cast<double>(p.size());
      count += p.size();
    }
    const double n = static_cast<double>(count);
    emit(result, {epoch, "train", se / n, ae / n, loss_sum / n});

    if (!data.val.empty()) {
      EvalResult val = evaluate(model, data, data.val, cfg.batch_size);
      emit(result, {epoch, "val", val.metrics.mse, val.metrics.mae, val.loss});
      if (val.metrics.mse < best_mse) {
        best_mse = val.metrics.mse;
        best.emplace(store);
        result.best_epoch = epoch;
      }
    } else {
      best.emplace(store);
      result.best_epoch = epoch;
    }
  }
  store.zero_grad();
  if (best) best->restore(store);
  if (!data.test.empty()) {
    result.test = evaluate(model, data, data.test, cfg.batch_size);
    emit(result, {result.best_epoch, "test", result.test.metrics.mse, result.test.metrics.mae,
                  result.test.loss});
  }
  return result;
}

}  // namespace himtm
