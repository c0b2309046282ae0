#include "himtm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "himtm/errors.hpp"

namespace himtm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_uint(key, v));
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

LrSchedule to_schedule(const std::string& key, const std::string& v) {
  if (v == "constant") return LrSchedule::kConstant;
  if (v == "cosine") return LrSchedule::kCosine;
  throw ConfigError("config key '" + key + "': expected constant or cosine, got '" + v + "'");
}

std::string schedule_text(LrSchedule s) { return s == LrSchedule::kCosine ? "cosine" : "constant"; }

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

void sync_patch(RunConfig& cfg) {
  cfg.patch.hierarchies = cfg.encoder.layers_per_hierarchy.size();
  cfg.patch.n_sub = cfg.patch.sub_len == 0 ? 0 : cfg.patch.patch_len / cfg.patch.sub_len;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = to_uint(k, v); }},
      {"lookback", [](RunConfig& c, auto& k, auto& v) { c.lookback = to_size(k, v); }},
      {"output.dir", [](RunConfig& c, auto&, auto& v) { c.output_dir = v; }},
      {"patch.len", [](RunConfig& c, auto& k, auto& v) { c.patch.patch_len = to_size(k, v); }},
      {"patch.stride", [](RunConfig& c, auto& k, auto& v) { c.patch.stride = to_size(k, v); }},
      {"patch.sub_len", [](RunConfig& c, auto& k, auto& v) { c.patch.sub_len = to_size(k, v); }},
      {"encoder.layers",
       [](RunConfig& c, auto& k, auto& v) {
         c.encoder.layers_per_hierarchy.clear();
         for (const auto& item : split_list(v, ','))
           c.encoder.layers_per_hierarchy.push_back(to_size(k, item));
       }},
      {"encoder.heads", [](RunConfig& c, auto& k, auto& v) { c.encoder.heads = to_size(k, v); }},
      {"encoder.d_model", [](RunConfig& c, auto& k, auto& v) { c.encoder.d_model = to_size(k, v); }},
      {"encoder.d_ff", [](RunConfig& c, auto& k, auto& v) { c.encoder.d_ff = to_size(k, v); }},
      {"encoder.dropout", [](RunConfig& c, auto& k, auto& v) { c.encoder.dropout = to_double(k, v); }},
      {"pretrain.mask_ratio",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.mask_ratio = to_double(k, v); }},
      {"pretrain.alpha", [](RunConfig& c, auto& k, auto& v) { c.pretrain.alpha = to_double(k, v); }},
      {"pretrain.beta", [](RunConfig& c, auto& k, auto& v) { c.pretrain.beta = to_double(k, v); }},
      {"pretrain.epochs", [](RunConfig& c, auto& k, auto& v) { c.pretrain.epochs = to_size(k, v); }},
      {"pretrain.batch_size",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.batch_size = to_size(k, v); }},
      {"pretrain.lr", [](RunConfig& c, auto& k, auto& v) { c.pretrain.lr = to_double(k, v); }},
      {"pretrain.lr_schedule",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.lr_schedule = to_schedule(k, v); }},
      {"pretrain.hsd", [](RunConfig& c, auto& k, auto& v) { c.pretrain.use_hsd = to_bool(k, v); }},
      {"pretrain.ded", [](RunConfig& c, auto& k, auto& v) { c.pretrain.use_ded = to_bool(k, v); }},
      {"pretrain.distill_metric",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "smooth_l1") c.pretrain.distill_metric = DistillMetric::kSmoothL1;
         else if (v == "cosine") c.pretrain.distill_metric = DistillMetric::kCosine;
         else throw ConfigError("config key '" + k + "': expected smooth_l1 or cosine, got '" + v + "'");
       }},
      {"pretrain.detach_decoder_input",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.detach_decoder_input = to_bool(k, v); }},
      {"pretrain.loss_threshold",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.loss_threshold = to_double(k, v); }},
      {"pretrain.window_stride",
       [](RunConfig& c, auto& k, auto& v) { c.pretrain.window_stride = to_size(k, v); }},
      {"finetune.horizon", [](RunConfig& c, auto& k, auto& v) { c.finetune.horizon = to_size(k, v); }},
      {"finetune.lr", [](RunConfig& c, auto& k, auto& v) { c.finetune.lr = to_double(k, v); }},
      {"finetune.lr_schedule",
       [](RunConfig& c, auto& k, auto& v) { c.finetune.lr_schedule = to_schedule(k, v); }},
      {"finetune.epochs", [](RunConfig& c, auto& k, auto& v) { c.finetune.epochs = to_size(k, v); }},
      {"finetune.batch_size",
       [](RunConfig& c, auto& k, auto& v) { c.finetune.batch_size = to_size(k, v); }},
      {"finetune.mode",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "full") c.finetune.mode = FinetuneMode::kFull;
         else if (v == "linear_probe") c.finetune.mode = FinetuneMode::kLinearProbe;
         else throw ConfigError("config key '" + k + "': expected full or linear_probe, got '" + v + "'");
       }},
      {"finetune.csa", [](RunConfig& c, auto& k, auto& v) { c.finetune.use_csa = to_bool(k, v); }},
      {"finetune.aggregation",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "mean") c.finetune.aggregation = Aggregation::kMean;
         else if (v == "learned") c.finetune.aggregation = Aggregation::kLearned;
         else throw ConfigError("config key '" + k + "': expected mean or learned, got '" + v + "'");
       }},
      {"finetune.loss_threshold",
       [](RunConfig& c, auto& k, auto& v) { c.finetune.loss_threshold = to_double(k, v); }},
      {"finetune.window_stride",
       [](RunConfig& c, auto& k, auto& v) { c.finetune.window_stride = to_size(k, v); }},
      {"data.source",
       [](RunConfig& c, auto& k, auto& v) {
         if (v != "synthetic" && v != "csv")
           throw ConfigError("config key '" + k + "': expected synthetic or csv, got '" + v + "'");
         c.data.source = v;
       }},
      {"data.path", [](RunConfig& c, auto&, auto& v) { c.data.path = v; }},
      {"data.timestamp_column", [](RunConfig& c, auto&, auto& v) { c.data.timestamp_column = v; }},
      {"data.columns", [](RunConfig& c, auto&, auto& v) { c.data.columns = split_list(v, ','); }},
      {"data.split",
       [](RunConfig& c, auto& k, auto& v) {
         const auto parts = split_list(v, ',');
         if (parts.size() != 3) throw ConfigError("config key '" + k + "': expected train,val,test");
         c.data.split = {to_double(k, parts[0]), to_double(k, parts[1]), to_double(k, parts[2])};
       }},
      {"synth.length", [](RunConfig& c, auto& k, auto& v) { c.data.synth.length = to_size(k, v); }},
      {"synth.channels", [](RunConfig& c, auto& k, auto& v) { c.data.synth.channels = to_size(k, v); }},
      {"synth.sinusoids",
       [](RunConfig& c, auto& k, auto& v) {
         c.data.synth.sinusoids.clear();
         for (const auto& item : split_list(v, ',')) {
           const auto parts = split_list(item, ':');
           if (parts.empty() || parts.size() > 3)
             throw ConfigError("config key '" + k + "': expected period[:amplitude[:phase]], got '" + item + "'");
           Sinusoid s;
           s.period = to_double(k, parts[0]);
           if (parts.size() > 1) s.amplitude = to_double(k, parts[1]);
           if (parts.size() > 2) s.phase = to_double(k, parts[2]);
           c.data.synth.sinusoids.push_back(s);
         }
       }},
      {"synth.trend", [](RunConfig& c, auto& k, auto& v) { c.data.synth.trend_slope = to_double(k, v); }},
      {"synth.noise", [](RunConfig& c, auto& k, auto& v) { c.data.synth.noise_std = to_double(k, v); }},
      {"synth.seed", [](RunConfig& c, auto& k, auto& v) { c.data.synth.seed = to_uint(k, v); }},
      {"eval.naive_period", [](RunConfig& c, auto& k, auto& v) { c.naive_period = to_size(k, v); }},
  };
  return table;
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, trim(value));
  sync_patch(cfg);
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_config_value(cfg, trim(body.substr(0, eq)), body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  sync_patch(cfg);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

void RunConfig::validate() const {
  patch.validate();
  encoder.validate();
  pretrain.validate();
  finetune.validate();
  if (patch.hierarchies != encoder.hierarchies()) {
    throw ConfigError("patch hierarchies " + std::to_string(patch.hierarchies) +
                      " != encoder hierarchies " + std::to_string(encoder.hierarchies()));
  }
  if (lookback < patch.patch_len) {
    throw ConfigError("lookback " + std::to_string(lookback) + " is shorter than patch.len " +
                      std::to_string(patch.patch_len));
  }
  if (data.source == "csv" && data.path.empty()) throw ConfigError("data.source = csv needs data.path");
  if (data.source == "synthetic") data.synth.validate();
  if (naive_period > lookback) {
    throw ConfigError("eval.naive_period " + std::to_string(naive_period) + " exceeds lookback " +
                      std::to_string(lookback));
  }
}

std::string to_text(const RunConfig& c, bool include_output_dir) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("seed", std::to_string(c.seed));
  kv("lookback", std::to_string(c.lookback));
  if (include_output_dir) kv("output.dir", c.output_dir);
  kv("patch.len", std::to_string(c.patch.patch_len));
  kv("patch.stride", std::to_string(c.patch.stride));
  kv("patch.sub_len", std::to_string(c.patch.sub_len));
  std::vector<std::string> layers;
  for (auto n : c.encoder.layers_per_hierarchy) layers.push_back(std::to_string(n));
  kv("encoder.layers", join(layers, ","));
  kv("encoder.heads", std::to_string(c.encoder.heads));
  kv("encoder.d_model", std::to_string(c.encoder.d_model));
  kv("encoder.d_ff", std::to_string(c.encoder.d_ff));
  kv("encoder.dropout", fmt(c.encoder.dropout));
  kv("pretrain.mask_ratio", fmt(c.pretrain.mask_ratio));
  kv("pretrain.alpha", fmt(c.pretrain.alpha));
  kv("pretrain.beta", fmt(c.pretrain.beta));
  kv("pretrain.epochs", std::to_string(c.pretrain.epochs));
  kv("pretrain.batch_size", std::to_string(c.pretrain.batch_size));
  kv("pretrain.lr", fmt(c.pretrain.lr));
  kv("pretrain.lr_schedule", schedule_text(c.pretrain.lr_schedule));
  kv("pretrain.hsd", bool_text(c.pretrain.use_hsd));
  kv("pretrain.ded", bool_text(c.pretrain.use_ded));
  kv("pretrain.distill_metric",
     c.pretrain.distill_metric == DistillMetric::kCosine ? "cosine" : "smooth_l1");
  kv("pretrain.detach_decoder_input", bool_text(c.pretrain.detach_decoder_input));
  kv("pretrain.loss_threshold", fmt(c.pretrain.loss_threshold));
  kv("pretrain.window_stride", std::to_string(c.pretrain.window_stride));
  kv("finetune.horizon", std::to_string(c.finetune.horizon));
  kv("finetune.lr", fmt(c.finetune.lr));
  kv("finetune.lr_schedule", schedule_text(c.finetune.lr_schedule));
  kv("finetune.epochs", std::to_string(c.finetune.epochs));
  kv("finetune.batch_size", std::to_string(c.finetune.batch_size));
  kv("finetune.mode", c.finetune.mode == FinetuneMode::kLinearProbe ? "linear_probe" : "full");
  kv("finetune.csa", bool_text(c.finetune.use_csa));
  kv("finetune.aggregation", c.finetune.aggregation == Aggregation::kLearned ? "learned" : "mean");
  kv("finetune.loss_threshold", fmt(c.finetune.loss_threshold));
  kv("finetune.window_stride", std::to_string(c.finetune.window_stride));
  kv("data.source", c.data.source);
  if (!c.data.path.empty()) kv("data.path", c.data.path);
  if (!c.data.timestamp_column.empty()) kv("data.timestamp_column", c.data.timestamp_column);
  if (!c.data.columns.empty()) kv("data.columns", join(c.data.columns, ","));
  kv("data.split", fmt(c.data.split.train) + "," + fmt(c.data.split.val) + "," + fmt(c.data.split.test));
  kv("synth.length", std::to_string(c.data.synth.length));
  kv("synth.channels", std::to_string(c.data.synth.channels));
  std::vector<std::string> sines;
  for (const auto& s : c.data.synth.sinusoids)
    sines.push_back(fmt(s.period) + ":" + fmt(s.amplitude) + ":" + fmt(s.phase));
  kv("synth.sinusoids", join(sines, ","));
  kv("synth.trend", fmt(c.data.synth.trend_slope));
  kv("synth.noise", fmt(c.data.synth.noise_std));
  kv("synth.seed", std::to_string(c.data.synth.seed));
  kv("eval.naive_period", std::to_string(c.naive_period));
  return os.str();
}

std::string config_echo_comment(const RunConfig& cfg) {
  std::istringstream is(to_text(cfg));
  std::string line, out;
  while (std::getline(is, line)) out += "# " + line + "\n";
  return out;
}

RunConfig config_from_echo_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::string line, text;
  while (std::getline(in, line) && line.rfind("# ", 0) == 0) text += line.substr(2) + "\n";
  if (text.empty()) throw ConfigError(path + " has no embedded config");
  return parse_config(text, path);
}

}  // namespace himtm
