#include "traice3d/layers.hpp"

#include <algorithm>
#include <cmath>

namespace traice3d {

namespace {

Tensor uniform(Shape shape, float bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape), true);
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

Tensor constant(Shape shape, float value, bool trainable) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(trainable);
  return t;
}

}  // namespace

Linear::Linear(Index in, Index out, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  weight = uniform({in, out}, bound, rng);
  bias = uniform({out}, bound, rng);
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

LayerNorm::LayerNorm(Index dim) : gain(constant({dim}, 1.0f, true)), bias(constant({dim}, 0.0f, true)) {}

void LayerNorm::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".gain", gain, true});
  out.push_back({prefix + ".bias", bias, true});
}

Conv3d::Conv3d(Index cin, Index cout, Extent3 kernel, Extent3 stride_, Extent3 padding_,
               std::mt19937_64& rng)
    : stride(stride_), padding(padding_) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(cin * kernel.d * kernel.h * kernel.w));
  weight = uniform({cout, cin, kernel.d, kernel.h, kernel.w}, bound, rng);
  bias = uniform({cout}, bound, rng);
}

void Conv3d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

ConvTranspose3d::ConvTranspose3d(Index cin, Index cout, Extent3 kernel, Extent3 stride_,
                                 std::mt19937_64& rng)
    : stride(stride_) {
  // Each output voxel receives cin * (kernel / stride) contributions.
  const Index overlap = std::max<Index>(1, (kernel.d / stride.d) * (kernel.h / stride.h) * (kernel.w / stride.w));
  const float bound = 1.0f / std::sqrt(static_cast<float>(cin * overlap));
  weight = uniform({cin, cout, kernel.d, kernel.h, kernel.w}, bound, rng);
  bias = uniform({cout}, bound, rng);
}

void ConvTranspose3d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

BatchNorm3d::BatchNorm3d(Index channels)
    : gain(constant({channels}, 1.0f, true)),
      bias(constant({channels}, 0.0f, true)),
      running_mean(constant({channels}, 0.0f, false)),
      running_var(constant({channels}, 1.0f, false)) {}

Tensor BatchNorm3d::operator()(const Tensor& x, const ForwardMode& mode) {
  return batch_norm(x, gain, bias, running_mean, running_var, mode.training);
}

void BatchNorm3d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".gain", gain, true});
  out.push_back({prefix + ".bias", bias, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

MultiHeadAttention::MultiHeadAttention(Index dim, int heads_, std::mt19937_64& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), out(dim, dim, rng), heads(heads_) {
  if (dim % heads != 0)
    throw ShapeError("attention width " + std::to_string(dim) + " not divisible by " +
                     std::to_string(heads) + " heads");
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(q.dim(-1)));
  const Tensor weights = softmax(scale(matmul_nt(q, k), inv_sqrt_dk), -1);
  return matmul(weights, v);
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys,
                                      const Tensor& values) const {
  if (queries.ndim() != 3 || keys.ndim() != 3 || values.ndim() != 3)
    throw ShapeError("attention expects [B, N, C] operands");
  const Index B = queries.dim(0), nq = queries.dim(1), nk = keys.dim(1), C = queries.dim(2);
  if (keys.dim(2) != C || values.dim(2) != C || values.dim(1) != nk || keys.dim(0) != B)
    throw ShapeError("attention operand mismatch: " + shape_string(queries.shape()) + ", " +
                     shape_string(keys.shape()) + ", " + shape_string(values.shape()));
  const Index dh = C / heads;
  auto split = [&](const Tensor& x, Index n) {
    return permute(reshape(x, {B, n, heads, dh}), {0, 2, 1, 3});
  };
  const Tensor attended =
      scaled_dot_product_attention(split(q(queries), nq), split(k(keys), nk), split(v(values), nk));
  return out(reshape(permute(attended, {0, 2, 1, 3}), {B, nq, C}));
}

void MultiHeadAttention::collect(const std::string& prefix, NamedTensors& o) const {
  q.collect(prefix + ".q", o);
  k.collect(prefix + ".k", o);
  v.collect(prefix + ".v", o);
  out.collect(prefix + ".out", o);
}

Mlp::Mlp(Index dim, Index hidden, std::mt19937_64& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

void Mlp::collect(const std::string& prefix, NamedTensors& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

void zero_all(const NamedTensors& named) {
  for (const auto& nt : named) {
    Tensor t = nt.tensor;
    std::fill(t.values().begin(), t.values().end(), 0.0f);
  }
}

}  // namespace traice3d
