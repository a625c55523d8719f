#pragma once

#include <vector>

#include "traice3d/encoder.hpp"
#include "traice3d/rcam.hpp"
#include "traice3d/volume.hpp"

namespace traice3d::testing {

/// Direct nested-loop cross-correlation of one [C_in, D, H, W] input.
Tensor conv3d_direct(const Tensor& input, const Tensor& weight, const Tensor& bias, Extent3 stride,
                     Extent3 padding);
/// Scatter form of the transposed convolution of one [C_in, D, H, W] input.
Tensor conv_transpose3d_direct(const Tensor& input, const Tensor& weight, const Tensor& bias, Extent3 stride);
/// Triple-loop [m, k] x [k, n].
Tensor matmul_loops(const Tensor& a, const Tensor& b);
/// All-pairs Hausdorff distance.
double hausdorff_brute(const std::vector<Voxel>& a, const std::vector<Voxel>& b, const Spacing& spacing);
/// Standard normal CDF by composite Simpson integration of the density.
double normal_cdf_simpson(double x);

using Vec = std::vector<double>;
Vec layer_norm_row(const Vec& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// x W + b with W [in, out].
Vec affine(const Vec& x, const Linear& layer);
Vec gelu_vec(const Vec& x);
Vec add_vec(const Vec& a, const Vec& b);

/// Pre-norm transformer block on a single token: softmax over one key is 1,
/// so attention reduces to the value and output projections.
Vec transformer_block_one_token(const TransformerBlock& block, const Vec& x);
/// Residual cross-attention chain with one image and one prompt token.
Vec rcam_one_token(const Rcam& rcam, const Vec& image, const Vec& prompt, const Vec& image_pe,
                   const Vec& prompt_pe);

}  // namespace traice3d::testing
