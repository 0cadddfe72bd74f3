#pragma once

#include "ksr/tensor.hpp"

namespace ksr {

enum class Mode { Train, Eval };

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

// Cross-correlation of a (B,Cin,H,W) input with (Cout,Cin,kh,kw) weights.
// Output extents are (H + 2·padding − kh)/stride + 1 along each axis.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      Conv2dOptions options = {});

// 2×2 max pooling, stride 2. Ties route the gradient to the first element in
// row-major order.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& input);

// Fixed ×2 bilinear upsampling, align-corners = false (source coordinates
// clamped at the border).
template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& input);

// Per-channel running statistics owned by a batch-norm layer.
template <typename Scalar>
struct BatchNormState {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Array running_mean;
  Array running_var;

  explicit BatchNormState(Index channels = 0)
      : running_mean(Array::Zero(channels)), running_var(Array::Ones(channels)) {}
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

// Train mode normalizes with batch statistics (population variance) and
// folds them into `state` with the given momentum, using the unbiased
// variance for the running estimate. Eval mode normalizes with `state`.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           BatchNormState<Scalar>& state, Mode mode, BatchNormOptions options = {});

template <typename Scalar>
Tensor<Scalar> elu(const Tensor<Scalar>& input, Scalar alpha = Scalar(1));

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input);

// Channels of `a` followed by channels of `b`.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// Channels [begin, begin + count) of a 4-D tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, Index begin, Index count);

// Kernel parallelism cap read once from KSR_THREADS (default 1).
int kernel_threads();

}  // namespace ksr
