#include "traice3d/prompt.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace traice3d {

std::vector<std::array<double, 3>> normalize_points(const PromptSet& prompts) {
  if (prompts.points.empty()) throw std::invalid_argument("prompt set is empty");
  std::vector<std::array<double, 3>> out;
  out.reserve(prompts.points.size());
  for (const Point3& p : prompts.points) {
    const bool inside = p.x >= 0 && p.x < static_cast<double>(prompts.dims.w) && p.y >= 0 &&
                        p.y < static_cast<double>(prompts.dims.h) && p.z >= 0 &&
                        p.z < static_cast<double>(prompts.dims.d);
    if (!inside)
      throw std::out_of_range("prompt point (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                              "," + std::to_string(p.z) + ") lies outside the volume");
    out.push_back({p.x / static_cast<double>(prompts.dims.w), p.y / static_cast<double>(prompts.dims.h),
                   p.z / static_cast<double>(prompts.dims.d)});
  }
  return out;
}

PromptEncoder::PromptEncoder(const ModelConfig& config, std::mt19937_64& rng, float sigma) {
  const Index d = config.prompt_features;
  phi = Tensor(Shape{3, d});
  std::normal_distribution<float> normal(0.0f, sigma);
  for (float& v : phi.values()) v = normal(rng);
  w_point = Tensor(Shape{2 * d}, true);
  std::normal_distribution<float> small(0.0f, 0.02f);
  for (float& v : w_point.values()) v = small(rng);
  for (int level = 0; level < 4; ++level)
    proj[static_cast<std::size_t>(level)] = Linear(2 * d, config.level_channels(level), rng);
}

Tensor PromptEncoder::fourier_features(const PromptSet& prompts) const {
  const auto pts = normalize_points(prompts);
  const Index d = phi.dim(1);
  const Index n = static_cast<Index>(pts.size());
  Tensor out(Shape{n, 2 * d});
  const float* f = phi.data();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      double e = 0.0;
      for (int a = 0; a < 3; ++a) e += pts[static_cast<std::size_t>(i)][a] * f[a * d + j];
      e *= 2.0 * std::numbers::pi;
      out.data()[i * 2 * d + j] = static_cast<float>(std::sin(e));
      out.data()[i * 2 * d + d + j] = static_cast<float>(std::cos(e));
    }
  }
  return out;
}

Tensor PromptEncoder::encode(const PromptSet& prompts) const {
  return add(fourier_features(prompts), w_point);
}

Tensor PromptEncoder::project(const Tensor& embeddings, int level) const {
  if (level < 0 || level > 3) throw std::out_of_range("pyramid level must be 0..3");
  return proj[static_cast<std::size_t>(level)](embeddings);
}

void PromptEncoder::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".phi", phi, false});
  out.push_back({prefix + ".w_point", w_point, true});
  for (int level = 0; level < 4; ++level)
    proj[static_cast<std::size_t>(level)].collect(prefix + ".proj" + std::to_string(level), out);
}

}  // namespace traice3d
