#pragma once

#include "traice3d/ops.hpp"

namespace traice3d {

struct FocalParams {
  float alpha = 0.25f;
  float gamma = 3.0f;
  void validate() const;
};

struct SkeletonConfig {
  int iterations = 3;
  void validate() const;
};

/// Weights of the focal, Dice and clDice terms.
struct LossWeights {
  double focal = 0.0, dice = 0.0, cldice = 0.0;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline constexpr LossWeights soma_weights{0.5, 0.5, 0.0};
inline constexpr LossWeights branch_weights{0.2, 0.6, 0.2};

inline constexpr float dice_eps = 1e-6f;
/// Lower clamp for p_t before the log.
inline constexpr float focal_clamp = 1e-6f;

/// Mean over voxels of -alpha (1 - p_t)^gamma log(p_t).
Tensor focal_loss(const Tensor& pred, const Tensor& target, const FocalParams& params = {});
/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps).
Tensor dice_loss(const Tensor& pred, const Tensor& target);

/// Soft erosion: minimum of the three axis-aligned 3-voxel min-pools.
Tensor soft_erode(const Tensor& x);
/// Soft dilation: 3x3x3 max-pool.
Tensor soft_dilate(const Tensor& x);
/// Differentiable skeleton of a [.., D, H, W] probability volume, bounded
/// above by the input pointwise.
Tensor soft_skeleton(const Tensor& mask, const SkeletonConfig& cfg = {});
/// Dice between the soft skeletons of pred and target.
Tensor cldice_loss(const Tensor& pred, const Tensor& target, const SkeletonConfig& cfg = {});

/// Weighted sum of the three terms; zero-weight terms are not evaluated.
Tensor combined_loss(const Tensor& pred, const Tensor& target, const LossWeights& weights,
                     const FocalParams& focal = {}, const SkeletonConfig& skeleton = {});
Tensor soma_loss(const Tensor& pred, const Tensor& target);
Tensor branch_loss(const Tensor& pred, const Tensor& target, const SkeletonConfig& skeleton = {});

}  // namespace traice3d
