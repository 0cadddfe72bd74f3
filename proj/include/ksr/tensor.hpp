#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ksr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

// Raised when a caller violates an operation's preconditions (shapes, configs).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed files, numerical blow-ups and other runtime data faults.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

// Whether new operations are recorded for differentiation on this thread.
bool grad_enabled();

// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// N-dimensional real array taking part in a reverse-mode differentiation
// graph. Copies are shallow handles onto the same node, like the tensors of
// most deep-learning frameworks; use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }

  const Array& data() const { return node_->value; }
  Array& data() { return node_->value; }
  Scalar item() const;

  // 4-D element access in (batch, channel, row, col) order.
  Scalar at(Index b, Index c, Index h, Index w) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Array& grad() const { return node_->grad; }
  Array& grad() { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Deep copy of the value as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;
  // Same value, detached from the graph (shares nothing with the source).
  Tensor detach() const { return clone(false); }

 private:
  NodePtr node_;
};

// Wires a freshly computed value into the graph. The backward closure is
// recorded only when recording is enabled and some input requires a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, typename Tensor<Scalar>::Array value,
                           std::vector<Tensor<Scalar>> inputs, const char* op,
                           std::function<void(detail::Node<Scalar>&)> backward);

// Propagates adjoints from a scalar loss to every leaf that requires a
// gradient. Leaf gradients accumulate across calls until zero_grad(); interior
// adjoints are rebuilt each call. Returns the number of operations replayed.
template <typename Scalar>
std::size_t backward(const Tensor<Scalar>& loss);

// Elementwise and reduction helpers used by losses and tests.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a);
// sum(a ⊙ weights) with a constant weight array.
template <typename Scalar>
Tensor<Scalar> weighted_sum(const Tensor<Scalar>& a, const typename Tensor<Scalar>::Array& weights);

}  // namespace ksr
