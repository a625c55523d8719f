#pragma once

#include <vector>

#include "traice3d/volume.hpp"

namespace traice3d {

struct DetectionMetrics {
  double accuracy = 0, f1 = 0, precision = 0, recall = 0;
  Index true_positives = 0, false_positives = 0, false_negatives = 0;
};

/// Greedy nearest matching within `radius` voxels (closest pairs first, ties
/// broken by coordinates). Accuracy is TP / (TP + FP + FN). Empty ratios are
/// 0, except that two empty lists score 1 everywhere.
DetectionMetrics detection_metrics(const std::vector<Voxel>& predicted,
                                   const std::vector<Voxel>& truth, double radius = 5.0);

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice_score(const Mask& pred, const Mask& truth);

double intersection_over_union(const Mask& a, const Mask& b);

/// Symmetric Hausdorff distance in micrometres. Throws on an empty set.
double hausdorff(const std::vector<Voxel>& a, const std::vector<Voxel>& b, const Spacing& spacing);
double hausdorff(const Mask& a, const Mask& b, const Spacing& spacing);

/// 26-connected components, each as a list of voxels in raster order.
std::vector<std::vector<Voxel>> connected_components(const Mask& mask);

/// Topology-preserving curve thinning: simple points are peeled in six
/// directional passes until stable, keeping curve endpoints.
Mask skeletonize(const Mask& mask);

/// Total edge length (micrometres) of a minimum spanning forest over the
/// 26-neighbour graph of the skeleton voxels.
double skeleton_length(const Mask& skeleton, const Spacing& spacing);

/// |L_pred - L_gt| / L_gt with L the skeleton length. Throws when the ground
/// truth skeleton is empty.
double apld(const Mask& pred, const Mask& truth, const Spacing& spacing);

struct Summary {
  double mean = 0, std = 0;
};
/// Mean and population standard deviation; zeros for an empty list.
Summary summarize(const std::vector<double>& values);

}  // namespace traice3d
