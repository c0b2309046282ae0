#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "himtm/gradcheck.hpp"

namespace himtm {

struct SuiteCase {
  std::string name;
  GradCheckReport report;
};

struct SuiteResult {
  std::vector<SuiteCase> cases;
  double worst = 0.0;
  std::string worst_case;
  double seconds = 0.0;

  bool passed(double tolerance = 1e-4) const { return worst < tolerance; }
};

/// Finite-difference checks of every differentiable op, every layer, and the
/// composed tiny pre-training model (2 hierarchies, d = 8, 2 heads, 4 fine
/// tokens, 1 masked coarse patch) with fixed teacher features.
SuiteResult run_gradcheck_suite(std::uint64_t seed = 7,
                                const std::function<void(const SuiteCase&)>& on_case = {});

}  // namespace himtm
