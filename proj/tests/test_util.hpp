#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "himtm/tensor.hpp"

namespace himtm::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Fresh directory under the system temp dir, removed first if it exists.
inline std::string scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("himtm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace himtm::testing
