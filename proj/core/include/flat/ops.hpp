#pragma once

#include <span>

#include "flat/tensor.hpp"

// Differentiable primitives. Every function validates shapes and throws
// DimensionError naming the offending shapes.
namespace flat {
FLAT_ABI_BEGIN
namespace ops {

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// x[B x in] . weight[out x in]^T (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// x[B x C x H x W] with kernel[F x C x k x k] (+ bias[F]), zero padding.
/// Output spatial size is floor((H + 2 pad - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  return conv2d(x, kernel, Tensor{}, stride, pad);
}

/// Non-overlapping `window x window` max pooling (floor semantics).
/// Ties resolve to the first maximum in row-major window order.
Tensor max_pool2d(const Tensor& x, int window);

/// [B x C x H x W] -> [B x C]
Tensor global_avg_pool(const Tensor& x);

/// Per-channel batch normalisation of [B x C x H x W] with affine
/// parameters gamma, beta of shape [C]. In training mode the batch
/// statistics normalise the input and are folded into the running
/// estimates (mean, unbiased variance) with the given momentum; otherwise
/// the running estimates are used as constants.
inline constexpr double kBatchNormEpsilon = 1e-5;
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum = 0.1);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, Scalar factor);
/// Multiplies every element by a learnable single-element tensor.
Tensor scale_by(const Tensor& x, const Tensor& factor);
Tensor reshape(const Tensor& x, Shape shape);

/// [B x m], [B x n] -> [B x (m + n)]
Tensor concat_columns(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Divides each row (last axis) by its Euclidean norm. Throws
/// DegenerateError if any row norm is at or below `kNormEpsilon`.
inline constexpr double kNormEpsilon = 1e-12;
Tensor l2_normalize(const Tensor& x);
/// Same as l2_normalize but clamps the norm from below, so all-zero rows
/// map to zero rows instead of failing.
Tensor l2_normalize_clamped(const Tensor& x, double min_norm = kNormEpsilon);

/// Mean over the batch of -log softmax(logits)[label], stabilised by
/// subtracting each row maximum. Throws IndexError on labels outside [0, C).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean of squared elementwise differences.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace ops
FLAT_ABI_END
}  // namespace flat
