#pragma once

#include <array>
#include <vector>

#include "traice3d/layers.hpp"
#include "traice3d/model_config.hpp"

namespace traice3d {

struct Point3 {
  double x = 0, y = 0, z = 0;  // voxel coordinates (width, height, depth axes)
  friend bool operator==(const Point3&, const Point3&) = default;
};

/// Point prompts inside a volume of extent `dims` (d, h, w).
struct PromptSet {
  std::vector<Point3> points;
  Extent3 dims;
};

/// Componentwise division by (W, H, D). Throws std::out_of_range for points
/// outside [0, W) x [0, H) x [0, D) and std::invalid_argument for an empty set.
std::vector<std::array<double, 3>> normalize_points(const PromptSet& prompts);

/// Fourier-feature prompt encoder with per-pyramid-level projections.
class PromptEncoder {
 public:
  PromptEncoder() = default;
  PromptEncoder(const ModelConfig& config, std::mt19937_64& rng, float sigma = 1.0f);

  /// [sin(2 pi p Phi), cos(2 pi p Phi)] per point: [N, 2d], constant w.r.t. parameters.
  Tensor fourier_features(const PromptSet& prompts) const;
  /// W_point + Fourier features: [N, 2d].
  Tensor encode(const PromptSet& prompts) const;
  /// Linear map of [.., 2d] embeddings to the level's channel width.
  Tensor project(const Tensor& embeddings, int level) const;

  void collect(const std::string& prefix, NamedTensors& out) const;

  Tensor phi;      // [3, d], frozen
  Tensor w_point;  // [2d]
  std::array<Linear, 4> proj;
};

}  // namespace traice3d
