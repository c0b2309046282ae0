#include "himtm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "himtm/errors.hpp"

namespace himtm {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn, const std::string& where) {
  NoGradGuard no_grad;
  const double value = loss_fn().item();
  if (!std::isfinite(value)) {
    throw NumericError("grad_check: non-finite loss while perturbing " + where);
  }
  return value;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           std::span<const NamedTensor> params, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss at base point");
  const double floor = 1e-5 * std::max(1.0, std::abs(loss.item()));
  backward(loss);

  GradCheckReport report;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    GradCheckEntry entry{p.name};
    if (!t.has_grad()) {
      entry.detached = true;
      report.entries.push_back(entry);
      continue;
    }
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate(loss_fn, p.name);
      values[i] = saved - step;
      const double down = evaluate(loss_fn, p.name);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++entry.checked;
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst = entry.name;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace himtm
