#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "himtm/params.hpp"

namespace himtm {

enum class LrSchedule { kConstant, kCosine };

/// Learning rate for `step` (0-based) of `total`: the base value, or a cosine
/// decay from the base value towards zero.
double scheduled_lr(double base, LrSchedule schedule, std::size_t step, std::size_t total);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are laid out one-to-one with the parameter list the state was built for.
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  AdamState() = default;
  AdamState(std::span<const NamedTensor> params, AdamOptions opts);
};

/// One bias-corrected Adam update using each parameter's accumulated gradient.
/// Parameters the backward pass never reached are treated as having zero
/// gradient. A non-finite gradient aborts the whole step (nothing is written)
/// with a NumericError naming the parameter.
void adam_step(std::span<const NamedTensor> params, AdamState& state);

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamOptions options);

  void step() { adam_step(params_, state_); }
  void zero_grad();
  void set_lr(double lr) { state_.options.lr = lr; }

  const AdamState& state() const { return state_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamState state_;
};

}  // namespace himtm
