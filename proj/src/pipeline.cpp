#include "himtm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "himtm/errors.hpp"
#include "himtm/rng.hpp"

namespace himtm {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_artifact(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

std::string rng_state(const RunConfig& cfg) {
  return "root_seed=" + std::to_string(cfg.seed) +
         " streams=init,pretrain.shuffle,pretrain.mask,pretrain.dropout,finetune.shuffle,"
         "finetune.dropout";
}

std::map<std::string, std::string> config_map(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

void write_metric_row(std::ostream& os, std::size_t epoch, const std::string& split,
                      double mse, double mae, double loss) {
  os << epoch << ',' << split << ',' << fmt(mse) << ',' << fmt(mae) << ',' << fmt(loss) << '\n';
}

void say(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

}  // namespace

void prepare_data(const RunConfig& cfg, PreparedData& out) {
  cfg.validate();
  if (cfg.data.source == "csv") {
    out.raw = load_csv(cfg.data.path, CsvOptions{cfg.data.timestamp_column, cfg.data.columns});
  } else {
    out.raw = synth_generate(cfg.data.synth);
  }
  out.bounds = chronological_split(out.raw.length(), cfg.data.split);
  out.standardized = standardize(out.raw, out.bounds.train_end);
  if (out.standardized.series.channels.empty()) {
    throw DataError("no channel has non-zero variance on the train split");
  }

  const auto& channels = out.standardized.series.channels;
  out.pretrain_windows.clear();
  out.pretrain_starts.clear();
  for (const auto& ch : channels) {
    for (std::size_t s : window_starts(0, out.bounds.train_end, cfg.lookback, 0,
                                       cfg.pretrain.window_stride)) {
      out.pretrain_windows.push_back(std::span<const double>(ch).subspan(s, cfg.lookback));
      out.pretrain_starts.push_back(s);
    }
  }

  ForecastData& fd = out.forecast;
  fd = ForecastData{};
  fd.channels = &channels;
  fd.lookback = cfg.lookback;
  fd.horizon = cfg.finetune.horizon;
  auto fill = [&](Split split, std::vector<WindowRef>& dst) {
    const auto [begin, end] = out.bounds.range(split);
    const auto starts = window_starts(begin, end, cfg.lookback, cfg.finetune.horizon,
                                      cfg.finetune.window_stride);
    for (std::size_t c = 0; c < channels.size(); ++c)
      for (std::size_t s : starts) dst.push_back({c, s});
  };
  fill(Split::kTrain, fd.train);
  fill(Split::kVal, fd.val);
  fill(Split::kTest, fd.test);
  audit_windows(out, cfg);
}

void audit_windows(const PreparedData& data, const RunConfig& cfg) {
  const std::size_t span = cfg.lookback + cfg.finetune.horizon;
  auto check = [&](const std::vector<WindowRef>& windows, Split split, const char* name) {
    const auto [begin, end] = data.bounds.range(split);
    for (const auto& w : windows) {
      if (w.start < begin || w.start + span > end) {
        throw ContractError(std::string(name) + " window at " + std::to_string(w.start) +
                            " leaves its split [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ")");
      }
    }
  };
  check(data.forecast.train, Split::kTrain, "train");
  check(data.forecast.val, Split::kVal, "val");
  check(data.forecast.test, Split::kTest, "test");
  for (std::size_t s : data.pretrain_starts) {
    if (s + cfg.lookback > data.bounds.train_end) {
      throw ContractError("pre-training window at " + std::to_string(s) +
                          " leaves the train split [0, " + std::to_string(data.bounds.train_end) +
                          ")");
    }
  }
}

std::size_t naive_period(const RunConfig& cfg) {
  if (cfg.naive_period > 0) return cfg.naive_period;
  if (cfg.data.source == "synthetic" && !cfg.data.synth.sinusoids.empty()) {
    double longest = 0.0;
    for (const auto& s : cfg.data.synth.sinusoids) longest = std::max(longest, s.period);
    const auto p = static_cast<std::size_t>(std::llround(longest));
    if (p >= 1 && p <= cfg.lookback) return p;
  }
  return std::min<std::size_t>(24, cfg.lookback);
}

EvalResult naive_baseline(const ForecastData& data, std::span<const WindowRef> windows,
                          std::size_t period, double loss_threshold) {
  if (windows.empty()) throw DataError("naive baseline: no windows to evaluate");
  if (period == 0 || period > data.lookback) {
    throw ConfigError("naive period " + std::to_string(period) + " must be in [1, lookback " +
                      std::to_string(data.lookback) + "]");
  }
  std::vector<double> pred, truth;
  for (const auto& w : windows) {
    const auto& ch = (*data.channels)[w.channel];
    const std::size_t origin = w.start + data.lookback;
    for (std::size_t h = 0; h < data.horizon; ++h) {
      pred.push_back(ch[origin - period + (h % period)]);
      truth.push_back(ch[origin + h]);
    }
  }
  EvalResult r;
  r.metrics = forecast_metrics(pred, truth);
  r.windows = windows.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = std::abs(pred[i] - truth[i]);
    loss += a < loss_threshold ? 0.5 * a * a / loss_threshold : a - 0.5 * loss_threshold;
  }
  r.loss = loss / static_cast<double>(pred.size());
  return r;
}

void check_geometry(const Checkpoint& ckpt, const RunConfig& cfg) {
  const auto saved = config_map(ckpt.config_echo);
  const auto current = config_map(to_text(cfg));
  std::vector<std::string> keys = {"lookback",      "patch.len",       "patch.stride",
                                   "patch.sub_len", "encoder.layers",  "encoder.heads",
                                   "encoder.d_model", "encoder.d_ff"};
  if (ckpt.kind == "finetune") {
    keys.insert(keys.end(), {"finetune.horizon", "finetune.csa", "finetune.aggregation"});
  }
  for (const auto& key : keys) {
    auto it = saved.find(key);
    if (it == saved.end()) throw ConfigError("checkpoint config has no '" + key + "'");
    const std::string& want = current.at(key);
    if (it->second != want) {
      throw ConfigError("checkpoint " + key + " = " + it->second + " does not match config " +
                        key + " = " + want);
    }
  }
}

PretrainArtifacts run_pretrain(const RunConfig& cfg, const std::string& out_dir,
                               const ProgressFn& progress) {
  PreparedData data;
  prepare_data(cfg, data);
  if (data.pretrain_windows.empty()) {
    throw DataError("train split is too short for one look-back window of " +
                    std::to_string(cfg.lookback));
  }
  ParameterStore store;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, "init"));
  PretrainModel model(cfg.patch, cfg.encoder, cfg.pretrain, cfg.lookback, store, init_rng);

  PretrainArtifacts art;
  art.loss_csv = join_path(out_dir, "pretrain_loss.csv");
  art.checkpoint = join_path(out_dir, "pretrain.ckpt");
  art.result = pretrain_run(model, store, data.pretrain_windows, cfg.pretrain, cfg.seed,
                            cfg.encoder.dropout, [&](const LossReport& r) {
                              say(progress, "pretrain epoch " + std::to_string(r.epoch) +
                                                " loss " + fmt(r.weighted_total));
                            });

  std::ofstream os = open_artifact(art.loss_csv);
  os << config_echo_comment(cfg);
  os << "epoch,distill,recon,total";
  for (std::size_t l = 1; l <= cfg.patch.hierarchies; ++l) os << ",distill_h" << l;
  for (std::size_t l = 1; l <= cfg.patch.hierarchies; ++l) os << ",recon_h" << l;
  os << '\n';
  for (const auto& r : art.result.epochs) {
    os << r.epoch << ',' << fmt(r.distill_total) << ',' << fmt(r.recon_total) << ','
       << fmt(r.weighted_total);
    for (double v : r.distill) os << ',' << fmt(v);
    for (double v : r.recon) os << ',' << fmt(v);
    os << '\n';
  }
  if (!os) throw DataError("failed writing " + art.loss_csv);
  save_checkpoint(art.checkpoint, make_checkpoint(store, "pretrain", to_text(cfg), rng_state(cfg)));
  return art;
}

FinetuneArtifacts run_finetune(const RunConfig& cfg, const std::string& out_dir,
                               const std::string& from_checkpoint, const ProgressFn& progress) {
  PreparedData data;
  prepare_data(cfg, data);
  ParameterStore store;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, "init"));
  ForecastModel model(cfg.patch, cfg.encoder, cfg.finetune, cfg.lookback, store, init_rng);
  if (!from_checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(from_checkpoint);
    check_geometry(ckpt, cfg);
    if (restore_checkpoint(ckpt, store, "encoder.") == 0) {
      throw ConfigError("checkpoint " + from_checkpoint + " holds no encoder weights");
    }
  }

  FinetuneArtifacts art;
  art.metrics_csv = join_path(out_dir, "metrics.csv");
  art.checkpoint = join_path(out_dir, "finetune.ckpt");
  art.result = finetune_run(model, store, data.forecast, cfg.finetune, cfg.seed,
                            cfg.encoder.dropout, [&](const EpochMetrics& m) {
                              say(progress, "finetune epoch " + std::to_string(m.epoch) + " " +
                                                m.split + " mse " + fmt(m.mse));
                            });
  art.naive = naive_baseline(data.forecast, data.forecast.test, naive_period(cfg),
                             cfg.finetune.loss_threshold);

  std::ofstream os = open_artifact(art.metrics_csv);
  os << config_echo_comment(cfg);
  os << "epoch,split,mse,mae,loss\n";
  for (const auto& m : art.result.history) write_metric_row(os, m.epoch, m.split, m.mse, m.mae, m.loss);
  write_metric_row(os, 0, "naive_test", art.naive.metrics.mse, art.naive.metrics.mae, art.naive.loss);
  if (!os) throw DataError("failed writing " + art.metrics_csv);
  save_checkpoint(art.checkpoint, make_checkpoint(store, "finetune", to_text(cfg), rng_state(cfg)));
  return art;
}

namespace {

struct LoadedForecaster {
  ParameterStore store;
  std::unique_ptr<ForecastModel> model;
};

void load_forecaster(const RunConfig& cfg, const std::string& checkpoint, LoadedForecaster& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (ckpt.kind != "finetune") {
    throw ConfigError("checkpoint " + checkpoint + " is a " + ckpt.kind +
                      " checkpoint; a fine-tuned one is required");
  }
  check_geometry(ckpt, cfg);
  std::mt19937_64 init_rng(derive_seed(cfg.seed, "init"));
  out.model = std::make_unique<ForecastModel>(cfg.patch, cfg.encoder, cfg.finetune, cfg.lookback,
                                              out.store, init_rng);
  restore_checkpoint(ckpt, out.store);
}

}  // namespace

EvalArtifacts run_eval(const RunConfig& cfg, const std::string& checkpoint,
                       const std::string& out_csv) {
  PreparedData data;
  prepare_data(cfg, data);
  LoadedForecaster f;
  load_forecaster(cfg, checkpoint, f);
  EvalArtifacts art;
  art.val = evaluate(*f.model, data.forecast, data.forecast.val, cfg.finetune.batch_size);
  art.test = evaluate(*f.model, data.forecast, data.forecast.test, cfg.finetune.batch_size);
  art.naive = naive_baseline(data.forecast, data.forecast.test, naive_period(cfg),
                             cfg.finetune.loss_threshold);
  std::ofstream os = open_artifact(out_csv);
  os << config_echo_comment(cfg);
  os << "epoch,split,mse,mae,loss\n";
  write_metric_row(os, 0, "val", art.val.metrics.mse, art.val.metrics.mae, art.val.loss);
  write_metric_row(os, 0, "test", art.test.metrics.mse, art.test.metrics.mae, art.test.loss);
  write_metric_row(os, 0, "naive_test", art.naive.metrics.mse, art.naive.metrics.mae, art.naive.loss);
  if (!os) throw DataError("failed writing " + out_csv);
  return art;
}

std::size_t run_forecast(const RunConfig& cfg, const std::string& checkpoint,
                         const std::string& out_csv) {
  PreparedData data;
  prepare_data(cfg, data);
  LoadedForecaster f;
  load_forecaster(cfg, checkpoint, f);
  std::vector<ForecastRecord> records;
  evaluate(*f.model, data.forecast, data.forecast.test, cfg.finetune.batch_size, &records);
  std::ofstream os = open_artifact(out_csv);
  os << config_echo_comment(cfg);
  os << "window_start,channel,h,y_true,y_pred\n";
  for (const auto& r : records) {
    for (std::size_t h = 0; h < r.y_true.size(); ++h) {
      os << r.window_start << ',' << r.channel << ',' << h + 1 << ',' << fmt(r.y_true[h]) << ','
         << fmt(r.y_pred[h]) << '\n';
    }
  }
  if (!os) throw DataError("failed writing " + out_csv);
  return records.size();
}

PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir, bool pretrain,
                            const ProgressFn& progress) {
  PipelineResult res;
  std::string ckpt;
  if (pretrain) ckpt = run_pretrain(cfg, out_dir, progress).checkpoint;
  res.finetune = run_finetune(cfg, out_dir, ckpt, progress);
  res.eval = run_eval(cfg, res.finetune.checkpoint, join_path(out_dir, "eval.csv"));
  return res;
}

RunConfig sweep_variant(const RunConfig& cfg, const std::string& param, const std::string& value) {
  RunConfig out = cfg;
  if (param == "mask_ratio") {
    set_config_value(out, "pretrain.mask_ratio", value);
  } else if (param == "lookback") {
    set_config_value(out, "lookback", value);
  } else if (param == "patch_len") {
    const std::size_t n_sub = cfg.patch.n_sub;
    set_config_value(out, "patch.len", value);
    if (out.patch.patch_len % n_sub != 0) {
      throw ConfigError("patch_len " + value + " is not divisible into " + std::to_string(n_sub) +
                        " sub-patches");
    }
    set_config_value(out, "patch.stride", value);
    set_config_value(out, "patch.sub_len", std::to_string(out.patch.patch_len / n_sub));
  } else if (param == "depth") {
    std::string layers = value;
    std::replace(layers.begin(), layers.end(), '-', ',');
    set_config_value(out, "encoder.layers", layers);
    if (out.patch.hierarchies != cfg.patch.hierarchies) {
      throw ConfigError("depth '" + value + "' changes the hierarchy count from " +
                        std::to_string(cfg.patch.hierarchies) + " to " +
                        std::to_string(out.patch.hierarchies));
    }
  } else if (param == "width") {
    set_config_value(out, "encoder.d_model", value);
    out.encoder.d_ff = 2 * out.encoder.d_model;
  } else {
    throw ConfigError("unknown sweep parameter '" + param +
                      "' (expected mask_ratio, lookback, patch_len, depth, or width)");
  }
  out.validate();
  return out;
}

namespace {

SummaryRow summarize(const std::string& label, const std::string& value, const PipelineResult& r) {
  SummaryRow row;
  row.label = label;
  row.value = value;
  row.best_epoch = r.finetune.result.best_epoch;
  row.test = r.eval.test.metrics;
  row.test_loss = r.eval.test.loss;
  row.naive_mse = r.eval.naive.metrics.mse;
  return row;
}

void write_summary(const std::string& path, const RunConfig& cfg, const std::string& first_header,
                   const std::vector<SummaryRow>& rows, bool with_label) {
  std::ofstream os = open_artifact(path);
  os << config_echo_comment(cfg);
  os << (with_label ? "param," : "") << first_header << ",best_epoch,mse,mae,loss,naive_mse\n";
  for (const auto& r : rows) {
    if (with_label) os << r.label << ',';
    os << r.value << ',' << r.best_epoch << ',' << fmt(r.test.mse) << ',' << fmt(r.test.mae) << ','
       << fmt(r.test_loss) << ',' << fmt(r.naive_mse) << '\n';
  }
  if (!os) throw DataError("failed writing " + path);
}

}  // namespace

std::vector<SummaryRow> run_sweep(const RunConfig& cfg, const std::string& param,
                                  const std::vector<std::string>& values,
                                  const std::string& out_dir, const ProgressFn& progress) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<RunConfig> variants;
  for (const auto& v : values) variants.push_back(sweep_variant(cfg, param, v));
  std::vector<SummaryRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    say(progress, "sweep " + param + " = " + values[i]);
    const auto r = run_pipeline(variants[i], join_path(out_dir, param + "=" + values[i]), true,
                                progress);
    rows.push_back(summarize(param, values[i], r));
  }
  write_summary(join_path(out_dir, "sweep.csv"), cfg, "value", rows, true);
  return rows;
}

RunConfig ablation_variant(const RunConfig& cfg, const std::string& drop) {
  RunConfig out = cfg;
  if (drop == "hsd") {
    out.pretrain.use_hsd = false;
  } else if (drop == "ded") {
    out.pretrain.use_ded = false;
  } else if (drop == "csa") {
    out.finetune.use_csa = false;
  } else if (drop == "hmt") {
    std::size_t total = 0;
    for (auto n : cfg.encoder.layers_per_hierarchy) total += n;
    out.encoder.layers_per_hierarchy = {total};
    out.patch.sub_len = out.patch.patch_len;
    out.patch.n_sub = 1;
    out.patch.hierarchies = 1;
  } else {
    throw ConfigError("unknown ablation '" + drop + "' (expected hsd, ded, hmt, or csa)");
  }
  out.validate();
  return out;
}

std::vector<SummaryRow> run_ablation(const RunConfig& cfg, const std::vector<std::string>& drops,
                                     bool include_full, const std::string& out_dir,
                                     const ProgressFn& progress) {
  std::vector<std::pair<std::string, RunConfig>> variants;
  if (include_full) variants.emplace_back("full", cfg);
  for (const auto& d : drops) variants.emplace_back("w/o " + d, ablation_variant(cfg, d));
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  std::vector<SummaryRow> rows;
  for (const auto& [name, variant] : variants) {
    say(progress, "ablation " + name);
    std::string dir = name;
    std::replace(dir.begin(), dir.end(), '/', '_');
    std::replace(dir.begin(), dir.end(), ' ', '_');
    const auto r = run_pipeline(variant, join_path(out_dir, dir), true, progress);
    rows.push_back(summarize("", name, r));
  }
  write_summary(join_path(out_dir, "ablation.csv"), cfg, "variant", rows, false);
  return rows;
}

}  // namespace himtm
