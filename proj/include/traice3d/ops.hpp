#pragma once

#include <random>
#include <span>
#include <vector>

#include "traice3d/tensor.hpp"

namespace traice3d {

/// Per-axis extents in (depth, height, width) order, matching the memory
/// layout [.., D, H, W] of volumetric tensors.
struct Extent3 {
  Index d = 1, h = 1, w = 1;
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

// Elementwise binary ops. The second operand (or the first) may broadcast
// when its shape is a trailing suffix of the other's shape, including 0-d.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, float exponent);
/// Values outside [lo, hi] are clamped and receive zero gradient.
Tensor clamp(const Tensor& x, float lo, float hi);

/// a[..., m, k] x b[..., k, n]; b may also be a plain [k, n] matrix.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[..., m, k] x b[..., n, k]^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x[..., in] W[in, out] + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(std::span<const Tensor> parts, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

/// Cross-correlation. Input [N, C, D, H, W] or [C, D, H, W];
/// weight [C_out, C_in, kd, kh, kw]; bias [C_out] or undefined.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Extent3 stride,
              Extent3 padding);
/// Adjoint of conv3d without padding. Weight [C_in, C_out, kd, kh, kw];
/// output extent per axis is (in - 1) * stride + kernel.
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        Extent3 stride);

/// Stride-1 max pooling over [.., D, H, W]; padded positions never win.
Tensor max_pool3d(const Tensor& x, Extent3 kernel, Extent3 padding);
/// Minimum over each voxel and its in-bounds face neighbours on the last three
/// axes; equals the minimum of the three axis-aligned 3-voxel min-pools.
Tensor min_pool_cross3d(const Tensor& x);

/// Channel axis 1 of [N, C, ...]. Running statistics are updated in place
/// while training (unbiased variance, as in common frameworks).
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum = 0.1f, float eps = 1e-5f);

Tensor dropout(const Tensor& x, float rate, bool training, std::mt19937_64& rng);

}  // namespace traice3d
