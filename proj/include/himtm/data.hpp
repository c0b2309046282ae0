#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace himtm {

/// Equal-length channels sharing one timestamp column.
struct MultiSeries {
  std::vector<std::string> names;
  std::vector<std::string> timestamps;
  std::vector<std::vector<double>> channels;

  std::size_t length() const { return timestamps.size(); }
};

struct CsvOptions {
  std::string timestamp_column;             // empty: first column
  std::vector<std::string> value_columns;   // empty: every other column
};

/// Reads a header-first CSV. Rows with an unparseable value raise DataError
/// naming the file line ("row N", header is row 1). Non-monotonic timestamps
/// produce a warning and a stable sort by timestamp.
MultiSeries load_csv(const std::string& path, const CsvOptions& options = {});

/// Writes the series back with 17 significant digits, so reloading is lossless.
void save_csv(const std::string& path, const MultiSeries& series,
              const std::string& timestamp_column = "date");

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

enum class Split { kTrain, kVal, kTest };

/// Chronological, disjoint split boundaries: [0, train_end), [train_end, val_end), [val_end, total).
struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;

  std::pair<std::size_t, std::size_t> range(Split split) const;
};

SplitBounds chronological_split(std::size_t length, const SplitFractions& fractions);

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

struct Standardized {
  MultiSeries series;                 // kept channels, standardized
  std::vector<ChannelStats> stats;    // one per kept channel
  std::vector<std::string> excluded;  // channels with zero train std
};

/// Per channel: subtract the train-split mean and divide by the train-split
/// (population) std. Channels with zero train std are excluded with a warning.
Standardized standardize(const MultiSeries& series, std::size_t train_end);

std::vector<double> standardize_values(std::span<const double> values, const ChannelStats& stats);
std::vector<double> inverse_standardize(std::span<const double> values, const ChannelStats& stats);

/// Start offsets of every (lookback, horizon) window lying fully inside [begin, end).
/// Too-short ranges yield no windows and a warning.
std::vector<std::size_t> window_starts(std::size_t begin, std::size_t end, std::size_t lookback,
                                       std::size_t horizon, std::size_t stride);

struct WindowPair {
  std::size_t start = 0;
  std::span<const double> x;  // [lookback]
  std::span<const double> y;  // [horizon]
};

std::vector<WindowPair> window_iter(std::span<const double> series, std::size_t lookback,
                                    std::size_t horizon, std::size_t stride);

struct Sinusoid {
  double period = 24.0;
  double amplitude = 1.0;
  double phase = 0.0;
};

/// Sum of sinusoids + linear trend + white Gaussian noise. Channel c shifts every
/// phase by 0.5 c radians and draws its own noise stream.
struct SyntheticRecipe {
  std::size_t length = 4000;
  std::size_t channels = 1;
  std::vector<Sinusoid> sinusoids;
  double trend_slope = 0.0;
  double noise_std = 0.0;
  std::uint64_t seed = 1234;

  void validate() const;
};

MultiSeries synth_generate(const SyntheticRecipe& recipe);

}  // namespace himtm
