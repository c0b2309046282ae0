#include "himtm/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

#include "himtm/errors.hpp"

namespace himtm {

namespace {

thread_local bool g_grad_enabled = true;

std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw StateError("tensor is undefined");
  return *node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(himtm::numel(shape), value);
  return from_vector(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  if (himtm::numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  Tensor t(std::move(node));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(double value) { return from_vector({}, {value}); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() { return checked(node_).data; }

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got shape " + to_string(n.shape));
  }
  return n.data[0];
}

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

void Tensor::zero_grad() {
  auto& g = checked(node_).grad;
  g.clear();
  g.shrink_to_fit();
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  auto& n = checked(node_);
  if (!n.is_leaf()) throw StateError("set_requires_grad is only valid on leaf tensors");
  n.requires_grad = value;
  n.id = value ? next_tape_id() : 0;
}

std::optional<std::uint64_t> Tensor::tape_id() const {
  const auto& n = checked(node_);
  if (n.id == 0) return std::nullopt;
  return n.id;
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  detail::Node* start = root.node().get();
  if (!start || !start->requires_grad) return tape;
  std::unordered_set<detail::Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(start, 0);
  visited.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: loss tensor is undefined");
  detail::Node& root = *loss.node();
  if (root.data.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(root.shape));
  }
  if (root.consumed) throw StateError("backward: tape for this loss was already consumed");
  if (!root.requires_grad) throw ContractError("backward: loss is not on the tape");

  Tape tape = Tape::record(loss);
  for (detail::Node* node : tape.nodes()) {
    if (node->grad.size() != node->data.size()) node->grad.assign(node->data.size(), 0.0);
  }
  root.grad[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  for (detail::Node* node : nodes) {
    if (node->is_leaf()) continue;
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->id = next_tape_id();
    node->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace himtm
