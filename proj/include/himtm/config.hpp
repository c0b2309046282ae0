#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "himtm/data.hpp"
#include "himtm/encoder.hpp"
#include "himtm/finetune.hpp"
#include "himtm/patching.hpp"
#include "himtm/pretrain.hpp"

namespace himtm {

/// Periods 24 and 168 with unit amplitude, noise 0.1.
inline SyntheticRecipe default_synthetic_recipe() {
  SyntheticRecipe r;
  r.sinusoids = {{24.0, 1.0, 0.0}, {168.0, 1.0, 0.0}};
  r.noise_std = 0.1;
  return r;
}

struct DatasetSpec {
  std::string source = "synthetic";  // "synthetic" or "csv"
  std::string path;
  std::string timestamp_column;
  std::vector<std::string> columns;
  SplitFractions split;
  SyntheticRecipe synth = default_synthetic_recipe();
};

struct RunConfig {
  std::uint64_t seed = 2024;
  std::size_t lookback = 512;
  PatchSpec patch;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  DatasetSpec data;
  std::size_t naive_period = 0;  // 0: longest synthetic period, else 24
  std::string output_dir = "runs/default";

  /// Throws ConfigError on inconsistent geometry or out-of-range values.
  void validate() const;
};

/// Flat `key = value` lines, dotted keys, `#` comments. Unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

/// Applies one `key = value` assignment (same vocabulary as the file format).
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Canonical text form. Parsing it back yields an identical config. The
/// output directory is a run location, not part of the echo, unless asked for.
std::string to_text(const RunConfig& cfg, bool include_output_dir = false);

/// Prefixes every line of the canonical text with "# ", for embedding in CSV artifacts.
std::string config_echo_comment(const RunConfig& cfg);

/// Reads the leading "# " echo block of an artifact back into a config.
RunConfig config_from_echo_file(const std::string& path);

}  // namespace himtm
