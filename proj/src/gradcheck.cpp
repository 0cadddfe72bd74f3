#include "ksr/gradcheck.hpp"

#include "ksr/random.hpp"

#include <algorithm>
#include <cmath>

namespace ksr {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double max_gradient_error(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> leaves,
                          GradCheckOptions options) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  backward(loss_fn());

  double worst = 0;
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    const auto analytic = leaf.has_grad() ? leaf.grad() : Tensor<double>::Array::Zero(leaf.size()).eval();
    auto& values = leaf.data();
    for (Index i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + options.step;
      const double up = loss_fn().item();
      values[i] = original - options.step;
      const double down = loss_fn().item();
      values[i] = original;
      const double numeric = (up - down) / (2 * options.step);
      worst = std::max(worst, relative_error(analytic[i], numeric, options.floor));
    }
  }
  return worst;
}

Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, bool requires_grad) {
  Rng rng(seed);
  Tensor<double>::Array values(numel(shape));
  for (auto& v : values) v = rng.uniform(-1.0, 1.0);
  return Tensor<double>(shape, std::move(values), requires_grad);
}

double grad_check(const TensorOp& op, std::vector<Tensor<double>> inputs, std::uint64_t seed, GradCheckOptions options) {
  Tensor<double>::Array projection;
  auto loss_fn = [&]() -> Tensor<double> {
    Tensor<double> out = op(inputs);
    if (out.size() == 1) return out;
    if (projection.size() != out.size()) {
      Rng rng(derive_seed(seed, 0xfeed));
      projection.resize(out.size());
      for (auto& p : projection) p = rng.uniform(-1.0, 1.0);
    }
    return weighted_sum(out, projection);
  };
  return max_gradient_error(loss_fn, inputs, options);
}

double grad_check(const TensorOp& op, const std::vector<Shape>& shapes, std::uint64_t seed, GradCheckOptions options) {
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < shapes.size(); ++i) inputs.push_back(random_tensor(shapes[i], derive_seed(seed, i)));
  return grad_check(op, std::move(inputs), seed, options);
}

}  // namespace ksr
