#include "himtm/params.hpp"

#include <algorithm>
#include <cmath>

#include "himtm/errors.hpp"

namespace himtm {

void ParameterStore::check_new(const std::string& name) const {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
}

Tensor ParameterStore::add_parameter(const std::string& name, Tensor init) {
  check_new(name);
  init.set_requires_grad(true);
  parameters_.push_back({name, init});
  return init;
}

Tensor ParameterStore::add_buffer(const std::string& name, Tensor init) {
  check_new(name);
  buffers_.push_back({name, init});
  return init;
}

std::vector<NamedTensor> ParameterStore::all() const {
  std::vector<NamedTensor> out = parameters_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

std::vector<NamedTensor> ParameterStore::parameters_with_prefix(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& p : parameters_)
    if (p.name.starts_with(prefix)) out.push_back(p);
  return out;
}

std::vector<NamedTensor> ParameterStore::parameters_without_prefix(
    const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& p : parameters_)
    if (!p.name.starts_with(prefix)) out.push_back(p);
  return out;
}

bool ParameterStore::contains(const std::string& name) const {
  auto match = [&](const NamedTensor& t) { return t.name == name; };
  return std::any_of(parameters_.begin(), parameters_.end(), match) ||
         std::any_of(buffers_.begin(), buffers_.end(), match);
}

Tensor ParameterStore::find(const std::string& name) const {
  for (const auto& p : parameters_)
    if (p.name == name) return p.tensor;
  for (const auto& b : buffers_)
    if (b.name == name) return b.tensor;
  throw ConfigError("unknown parameter: " + name);
}

void ParameterStore::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.numel();
  return n;
}

namespace init {

Tensor truncated_normal(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> values(numel(shape));
  for (double& v : values) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    v = z * std;
  }
  return Tensor::from_vector(std::move(shape), std::move(values));
}

Tensor normal(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from_vector(std::move(shape), std::move(values));
}

}  // namespace init

ParameterSnapshot::ParameterSnapshot(const ParameterStore& store) {
  for (const auto& t : store.all())
    values_.emplace_back(t.name, std::vector<double>(t.tensor.data().begin(), t.tensor.data().end()));
}

void ParameterSnapshot::restore(ParameterStore& store) const {
  for (const auto& [name, values] : values_) {
    Tensor t = store.find(name);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

}  // namespace himtm
