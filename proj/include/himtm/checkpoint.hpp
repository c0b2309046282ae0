#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "himtm/params.hpp"

namespace himtm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string kind;         // "pretrain" or "finetune"
  std::string config_echo;  // canonical config text that produced it
  std::string rng_state;    // root seed and stream purposes, informational
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

/// Captures every parameter and buffer of `store`.
Checkpoint make_checkpoint(const ParameterStore& store, std::string kind, std::string config_echo,
                           std::string rng_state);

/// Writes to a temporary sibling file and renames it into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Throws DataError on a bad magic, an unsupported version, or truncation.
Checkpoint load_checkpoint(const std::string& path);

/// Copies every checkpoint tensor whose name starts with `prefix` into the
/// same-named store entry. Missing names or shape mismatches throw ConfigError.
/// Returns the number of tensors restored.
std::size_t restore_checkpoint(const Checkpoint& ckpt, ParameterStore& store,
                               const std::string& prefix = "");

}  // namespace himtm
