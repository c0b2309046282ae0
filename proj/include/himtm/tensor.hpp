#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace himtm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class Mode { kTrain, kEval };

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One value on the differentiation tape. Non-leaf nodes own their inputs, so the
// graph stays alive as long as the output tensor does.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t id = 0;  // 0: constant, not on the tape
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward_fn;

  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode differentiation.
///
/// Tensors have shared handle semantics: copying a Tensor aliases the same
/// node. Operations in ops.hpp create new nodes and record a backward closure
/// whenever any input requires a gradient and gradient recording is enabled.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the tape; used for parameter updates and finite differences.
  std::span<double> mutable_data();
  double item() const;

  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  bool requires_grad() const;
  // Marks a leaf as a trainable parameter. Throws StateError on non-leaf nodes.
  void set_requires_grad(bool value);
  std::optional<std::uint64_t> tape_id() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Engine internals.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the nodes reachable from a loss through
/// gradient-requiring edges. Inputs always precede their consumers.
class Tape {
 public:
  static Tape record(const Tensor& root);
  const std::vector<detail::Node*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf, then
/// releases the graph. Calling it again on the same loss throws StateError.
void backward(const Tensor& loss);

/// Disables tape recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {
// Builds an op output. Records the backward closure only if some input needs it.
Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn);
}  // namespace detail

}  // namespace himtm
