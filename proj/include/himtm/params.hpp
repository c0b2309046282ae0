#pragma once

#include <random>
#include <string>
#include <vector>

#include "himtm/tensor.hpp"

namespace himtm {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Registry of learnable parameters and non-learnable buffers (e.g. BatchNorm
/// running statistics), addressed by dotted names. Layers hold Tensor handles
/// that alias the registered nodes.
class ParameterStore {
 public:
  Tensor add_parameter(const std::string& name, Tensor init);
  Tensor add_buffer(const std::string& name, Tensor init);

  const std::vector<NamedTensor>& parameters() const { return parameters_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  // Parameters and buffers in registration order.
  std::vector<NamedTensor> all() const;
  std::vector<NamedTensor> parameters_with_prefix(const std::string& prefix) const;
  std::vector<NamedTensor> parameters_without_prefix(const std::string& prefix) const;

  // Throws ConfigError when absent.
  Tensor find(const std::string& name) const;
  bool contains(const std::string& name) const;

  void zero_grad();
  std::size_t parameter_count() const;

 private:
  void check_new(const std::string& name) const;

  std::vector<NamedTensor> parameters_;
  std::vector<NamedTensor> buffers_;
};

namespace init {

// Normal(0, std) truncated at two standard deviations.
Tensor truncated_normal(Shape shape, double std, std::mt19937_64& rng);
Tensor normal(Shape shape, double std, std::mt19937_64& rng);

}  // namespace init

/// Deep value copy of every parameter and buffer; restore() writes it back.
class ParameterSnapshot {
 public:
  explicit ParameterSnapshot(const ParameterStore& store);
  void restore(ParameterStore& store) const;

 private:
  std::vector<std::pair<std::string, std::vector<double>>> values_;
};

}  // namespace himtm
