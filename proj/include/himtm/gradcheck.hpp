#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "himtm/params.hpp"

namespace himtm {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // No tape path from this parameter to the loss (e.g. only used under stop_gradient).
  bool detached = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // name of the parameter holding the worst element
  std::vector<GradCheckEntry> entries;
};

/// Compares backward() gradients of `loss_fn` against central finite differences,
/// element by element. Relative error is |a - n| / max(|a|, |n|, 1e-5 max(1, |f|)),
/// so structurally zero gradients are judged against the resolution of f itself.
/// Detached parameters report a zero analytic gradient and are not compared.
/// `loss_fn` must rebuild the loss from the current parameter values on every call.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           std::span<const NamedTensor> params, double step = 1e-5);

}  // namespace himtm
