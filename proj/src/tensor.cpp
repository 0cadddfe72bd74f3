#include "ksr/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace ksr {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values, bool requires_grad) {
  for (Index extent : shape) {
    if (extent < 0) throw ValidationError("negative extent in shape " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw ValidationError("shape " + to_string(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<Scalar>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Array::Zero(n), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Array::Constant(1, value), requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ValidationError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(Index b, Index c, Index h, Index w) const {
  const Shape& s = node_->shape;
  if (s.size() != 4) throw ValidationError("at() needs a 4-D tensor, got " + to_string(s));
  return node_->value[((b * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, typename Tensor<Scalar>::Array value,
                           std::vector<Tensor<Scalar>> inputs, const char* op,
                           std::function<void(detail::Node<Scalar>&)> backward) {
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
std::size_t backward(const Tensor<Scalar>& loss) {
  using NodeT = detail::Node<Scalar>;
  if (!loss.defined() || loss.size() != 1) {
    throw ValidationError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return 0;

  // Iterative post-order DFS: every node lands after all of its inputs.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (!node->is_leaf()) node->grad = NodeT::Array::Zero(node->value.size());
  }
  loss.node()->grad_buffer()[0] += Scalar(1);

  std::size_t replayed = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->is_leaf()) continue;
    node->backward(*node);
    ++replayed;
  }
  return replayed;
}

namespace {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  return make_result<Scalar>(a.shape(), a.data() + b.data(), {a, b}, "add", [](detail::Node<Scalar>& n) {
    for (auto& in : n.inputs) {
      if (in->requires_grad) in->grad_buffer() += n.grad;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "sub");
  return make_result<Scalar>(a.shape(), a.data() - b.data(), {a, b}, "sub", [](detail::Node<Scalar>& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->grad_buffer() += n.grad;
    if (n.inputs[1]->requires_grad) n.inputs[1]->grad_buffer() -= n.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "mul");
  return make_result<Scalar>(a.shape(), a.data() * b.data(), {a, b}, "mul", [](detail::Node<Scalar>& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    if (x.requires_grad) x.grad_buffer() += n.grad * y.value;
    if (y.requires_grad) y.grad_buffer() += n.grad * x.value;
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return make_result<Scalar>(a.shape(), a.data() * factor, {a}, "scale", [factor](detail::Node<Scalar>& n) {
    n.inputs[0]->grad_buffer() += n.grad * factor;
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  typename Tensor<Scalar>::Array out = Tensor<Scalar>::Array::Constant(1, a.data().sum());
  return make_result<Scalar>(Shape{}, std::move(out), {a}, "sum", [](detail::Node<Scalar>& n) {
    n.inputs[0]->grad_buffer() += n.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.size());
  typename Tensor<Scalar>::Array out = Tensor<Scalar>::Array::Constant(1, a.data().sum() * inv);
  return make_result<Scalar>(Shape{}, std::move(out), {a}, "mean", [inv](detail::Node<Scalar>& n) {
    n.inputs[0]->grad_buffer() += n.grad[0] * inv;
  });
}

template <typename Scalar>
Tensor<Scalar> weighted_sum(const Tensor<Scalar>& a, const typename Tensor<Scalar>::Array& weights) {
  if (weights.size() != a.size()) {
    throw ValidationError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor of shape " +
                          to_string(a.shape()));
  }
  typename Tensor<Scalar>::Array out = Tensor<Scalar>::Array::Constant(1, (a.data() * weights).sum());
  return make_result<Scalar>(Shape{}, std::move(out), {a}, "weighted_sum", [weights](detail::Node<Scalar>& n) {
    n.inputs[0]->grad_buffer() += n.grad[0] * weights;
  });
}

#define KSR_INSTANTIATE(S)                                                                          \
  template class Tensor<S>;                                                                         \
  template Tensor<S> make_result<S>(Shape, Tensor<S>::Array, std::vector<Tensor<S>>, const char*,   \
                                    std::function<void(detail::Node<S>&)>);                         \
  template std::size_t backward<S>(const Tensor<S>&);                                               \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                                 \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                      \
  template Tensor<S> mean<S>(const Tensor<S>&);                                                     \
  template Tensor<S> weighted_sum<S>(const Tensor<S>&, const Tensor<S>::Array&);

KSR_INSTANTIATE(float)
KSR_INSTANTIATE(double)
#undef KSR_INSTANTIATE

}  // namespace ksr
