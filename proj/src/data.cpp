#include "himtm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "himtm/errors.hpp"
#include "himtm/log.hpp"
#include "himtm/rng.hpp"

namespace himtm {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  const char* first = text.data();
  const char* last = first + text.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

bool parse_integer(const std::string& text, long long& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

MultiSeries load_csv(const std::string& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV file " + path + " has no header row");
  const std::vector<std::string> header = split_fields(line);

  auto column_index = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("CSV file " + path + " has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };

  const std::size_t ts_col = options.timestamp_column.empty() ? 0 : column_index(options.timestamp_column);
  std::vector<std::size_t> value_cols;
  if (options.value_columns.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (i != ts_col) value_cols.push_back(i);
  } else {
    for (const auto& name : options.value_columns) value_cols.push_back(column_index(name));
  }
  if (value_cols.empty()) throw DataError("CSV file " + path + " has no value columns");

  MultiSeries series;
  for (std::size_t c : value_cols) series.names.push_back(header[c]);
  series.channels.resize(value_cols.size());

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw DataError(path + ": row " + std::to_string(row) + " has " +
                      std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(header.size()));
    }
    std::vector<double> values(value_cols.size());
    for (std::size_t i = 0; i < value_cols.size(); ++i) {
      if (!parse_double(fields[value_cols[i]], values[i])) {
        throw DataError(path + ": row " + std::to_string(row) + ", column '" +
                        header[value_cols[i]] + "': cannot parse '" + fields[value_cols[i]] +
                        "' as a number");
      }
    }
    series.timestamps.push_back(fields[ts_col]);
    for (std::size_t i = 0; i < values.size(); ++i) series.channels[i].push_back(values[i]);
  }

  // Integer timestamps compare numerically, anything else (ISO-8601) lexicographically.
  std::vector<long long> numeric(series.length());
  bool all_numeric = true;
  for (std::size_t i = 0; i < series.length() && all_numeric; ++i)
    all_numeric = parse_integer(series.timestamps[i], numeric[i]);
  auto less = [&](std::size_t a, std::size_t b) {
    return all_numeric ? numeric[a] < numeric[b] : series.timestamps[a] < series.timestamps[b];
  };
  bool monotonic = true;
  for (std::size_t i = 1; i < series.length() && monotonic; ++i) monotonic = !less(i, i - 1);
  if (!monotonic) {
    warn(path + ": timestamps are not monotonic; rows were stably sorted by timestamp");
    std::vector<std::size_t> order(series.length());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), less);
    MultiSeries sorted;
    sorted.names = series.names;
    sorted.channels.resize(series.channels.size());
    for (std::size_t i : order) {
      sorted.timestamps.push_back(series.timestamps[i]);
      for (std::size_t c = 0; c < series.channels.size(); ++c)
        sorted.channels[c].push_back(series.channels[c][i]);
    }
    series = std::move(sorted);
  }
  return series;
}

void save_csv(const std::string& path, const MultiSeries& series,
              const std::string& timestamp_column) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file " + path);
  out << timestamp_column;
  for (const auto& name : series.names) out << ',' << name;
  out << '\n';
  for (std::size_t t = 0; t < series.length(); ++t) {
    out << series.timestamps[t];
    for (const auto& ch : series.channels) out << ',' << format_double(ch[t]);
    out << '\n';
  }
  if (!out) throw DataError("failed writing CSV file " + path);
}

std::pair<std::size_t, std::size_t> SplitBounds::range(Split split) const {
  switch (split) {
    case Split::kTrain:
      return {0, train_end};
    case Split::kVal:
      return {train_end, val_end};
    case Split::kTest:
      return {val_end, total};
  }
  return {0, 0};
}

SplitBounds chronological_split(std::size_t length, const SplitFractions& f) {
  if (f.train <= 0.0 || f.val < 0.0 || f.test < 0.0 ||
      std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative, train > 0, and sum to 1");
  }
  SplitBounds b;
  b.total = length;
  b.train_end = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(length)));
  b.val_end = std::min(length, b.train_end + static_cast<std::size_t>(
                                                 std::floor(f.val * static_cast<double>(length))));
  if (f.test == 0.0) b.val_end = length;
  return b;
}

Standardized standardize(const MultiSeries& series, std::size_t train_end) {
  if (train_end == 0 || train_end > series.length()) {
    throw DataError("standardize: train split is empty or exceeds the series");
  }
  Standardized out;
  out.series.timestamps = series.timestamps;
  for (std::size_t c = 0; c < series.channels.size(); ++c) {
    const auto& ch = series.channels[c];
    double mean = 0.0;
    for (std::size_t t = 0; t < train_end; ++t) mean += ch[t];
    mean /= static_cast<double>(train_end);
    double var = 0.0;
    for (std::size_t t = 0; t < train_end; ++t) var += (ch[t] - mean) * (ch[t] - mean);
    const double std = std::sqrt(var / static_cast<double>(train_end));
    if (!(std > 1e-12)) {
      warn("channel '" + series.names[c] + "' has zero variance on the train split; excluded");
      out.excluded.push_back(series.names[c]);
      continue;
    }
    const ChannelStats stats{mean, std};
    out.series.names.push_back(series.names[c]);
    out.series.channels.push_back(standardize_values(ch, stats));
    out.stats.push_back(stats);
  }
  return out;
}

std::vector<double> standardize_values(std::span<const double> values, const ChannelStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - stats.mean) / stats.std;
  return out;
}

std::vector<double> inverse_standardize(std::span<const double> values, const ChannelStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * stats.std + stats.mean;
  return out;
}

std::vector<std::size_t> window_starts(std::size_t begin, std::size_t end, std::size_t lookback,
                                       std::size_t horizon, std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  std::vector<std::size_t> starts;
  const std::size_t span = lookback + horizon;
  if (end < begin || end - begin < span) {
    warn("range of " + std::to_string(end > begin ? end - begin : 0) +
         " steps is shorter than look-back + horizon = " + std::to_string(span) +
         "; no windows");
    return starts;
  }
  for (std::size_t s = begin; s + span <= end; s += stride) starts.push_back(s);
  return starts;
}

std::vector<WindowPair> window_iter(std::span<const double> series, std::size_t lookback,
                                    std::size_t horizon, std::size_t stride) {
  std::vector<WindowPair> out;
  for (std::size_t s : window_starts(0, series.size(), lookback, horizon, stride)) {
    out.push_back({s, series.subspan(s, lookback), series.subspan(s + lookback, horizon)});
  }
  return out;
}

void SyntheticRecipe::validate() const {
  if (length == 0 || channels == 0) throw ConfigError("synthetic length and channels must be positive");
  if (sinusoids.empty() && trend_slope == 0.0 && noise_std == 0.0) {
    throw ConfigError("synthetic recipe needs at least one component");
  }
  for (const auto& s : sinusoids)
    if (!(s.period > 0.0)) throw ConfigError("sinusoid period must be positive");
  if (noise_std < 0.0) throw ConfigError("noise std must be >= 0");
}

MultiSeries synth_generate(const SyntheticRecipe& recipe) {
  recipe.validate();
  MultiSeries out;
  out.timestamps.reserve(recipe.length);
  for (std::size_t t = 0; t < recipe.length; ++t) out.timestamps.push_back(std::to_string(t));
  for (std::size_t c = 0; c < recipe.channels; ++c) {
    out.names.push_back("ch" + std::to_string(c));
    std::mt19937_64 rng(derive_seed(recipe.seed, "synth.channel" + std::to_string(c)));
    std::normal_distribution<double> noise(0.0, 1.0);
    const double shift = 0.5 * static_cast<double>(c);
    std::vector<double> ch(recipe.length);
    for (std::size_t t = 0; t < recipe.length; ++t) {
      const double td = static_cast<double>(t);
      double v = recipe.trend_slope * td;
      for (const auto& s : recipe.sinusoids)
        v += s.amplitude * std::sin(2.0 * std::numbers::pi * td / s.period + s.phase + shift);
      if (recipe.noise_std > 0.0) v += recipe.noise_std * noise(rng);
      ch[t] = v;
    }
    out.channels.push_back(std::move(ch));
  }
  return out;
}

}  // namespace himtm
