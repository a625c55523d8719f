#pragma once

#include <random>
#include <string>

#include "traice3d/checkpoint.hpp"
#include "traice3d/ops.hpp"

namespace traice3d {

/// Train/eval switch plus the RNG used by dropout.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(Index in, Index out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(Index dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Conv3d {
  Tensor weight;  // [C_out, C_in, kd, kh, kw]
  Tensor bias;
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};

  Conv3d() = default;
  Conv3d(Index cin, Index cout, Extent3 kernel, Extent3 stride, Extent3 padding, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return conv3d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ConvTranspose3d {
  Tensor weight;  // [C_in, C_out, kd, kh, kw]
  Tensor bias;
  Extent3 stride{1, 1, 1};

  ConvTranspose3d() = default;
  ConvTranspose3d(Index cin, Index cout, Extent3 kernel, Extent3 stride, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return conv_transpose3d(x, weight, bias, stride); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BatchNorm3d {
  Tensor gain, bias;
  Tensor running_mean, running_var;

  BatchNorm3d() = default;
  explicit BatchNorm3d(Index channels);
  Tensor operator()(const Tensor& x, const ForwardMode& mode);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Multi-head scaled dot-product attention with q/k/v/output projections.
struct MultiHeadAttention {
  Linear q, k, v, out;
  int heads = 8;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index dim, int heads, std::mt19937_64& rng);
  /// queries [B, Nq, C], keys/values [B, Nk, C] -> [B, Nq, C]
  Tensor operator()(const Tensor& queries, const Tensor& keys, const Tensor& values) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// softmax(Q K^T / sqrt(d_k)) V over tensors shaped [.., N, d_k].
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Two-layer GeLU perceptron.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(Index dim, Index hidden, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

void zero_all(const NamedTensors& named);

}  // namespace traice3d
