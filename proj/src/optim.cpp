#include "himtm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "himtm/errors.hpp"

namespace himtm {

double scheduled_lr(double base, LrSchedule schedule, std::size_t step, std::size_t total) {
  if (schedule == LrSchedule::kConstant || total == 0) return base;
  const double progress = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState::AdamState(std::span<const NamedTensor> params, AdamOptions opts) : options(opts) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
}

void adam_step(std::span<const NamedTensor> params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) {
      throw ShapeError("adam_step: moment shape mismatch for " + params[i].name);
    }
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in parameter " + params[i].name);
      }
    }
  }

  ++state.step;
  const AdamOptions& o = state.options;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto grad = p.grad();
    auto value = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      value[j] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), state_(params_, options) {}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace himtm
