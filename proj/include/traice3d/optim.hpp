#pragma once

#include <span>
#include <vector>

#include "traice3d/tensor.hpp"

namespace traice3d {

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

/// Moment buffers are created lazily on the first step, one per parameter.
struct OptimizerState {
  AdamWConfig config;
  Index step = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
};

/// Decoupled-weight-decay Adam update. Parameters without a grad buffer are
/// treated as having zero gradient.
void adamw_step(std::span<Tensor> params, OptimizerState& state, float lr);

void zero_grads(std::span<Tensor> params);

}  // namespace traice3d
