#pragma once

#include "ksr/tensor.hpp"

#include <cstdint>
#include <functional>

namespace ksr {

struct GradCheckOptions {
  double step = 1e-3;   // central-difference half step
  double floor = 1e-8;  // denominator floor for the relative error
};

// Relative error |analytic − numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

// Compares backward() against central differences for every element of
// every leaf. `loss_fn` must rebuild the scalar loss from the current leaf
// values each time it is called. Returns the maximum relative error.
double max_gradient_error(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> leaves,
                          GradCheckOptions options = {});

using TensorOp = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Checks `op` on the given inputs. Non-scalar outputs are reduced with a
// seeded random projection.
double grad_check(const TensorOp& op, std::vector<Tensor<double>> inputs, std::uint64_t seed,
                  GradCheckOptions options = {});

// As above with inputs drawn uniformly from [-1, 1) for each shape.
double grad_check(const TensorOp& op, const std::vector<Shape>& shapes, std::uint64_t seed,
                  GradCheckOptions options = {});

// Uniform [-1, 1) leaf of the given shape.
Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, bool requires_grad = true);

}  // namespace ksr
