#include "traice3d/optim.hpp"

#include <cmath>

namespace traice3d {

void adamw_step(std::span<Tensor> params, OptimizerState& state, float lr) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
      state.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("optimizer state was built for a different parameter list");
  ++state.step;
  const AdamWConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(state.step));
  const float decay = 1.0f - lr * c.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (static_cast<Index>(m.size()) != p.numel())
      throw ShapeError("moment buffer does not match parameter " + shape_string(p.shape()));
    float* w = p.data();
    const bool has_grad = p.has_grad();
    const float* g = has_grad ? p.grad().data() : nullptr;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const float gi = has_grad ? g[i] : 0.0f;
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] *= decay;
      w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace traice3d
