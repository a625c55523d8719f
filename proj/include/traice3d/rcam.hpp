#pragma once

#include "traice3d/layers.hpp"

namespace traice3d {

/// Soma-model skip connection: features pass through untouched.
inline Tensor identity_skip(const Tensor& level_features) { return level_features; }

/// Residual cross-attention module refining image tokens with prompt tokens.
///
///   P'   = P   + LN(Attn(P + P_pe,   P + P_pe,   P))
///   P''  = P'  + LN(Attn(P' + P_pe,  I + I_pe,   I))
///   P''' = P'' + LN(MLP(P''))
///   I'   = I   + LN(Attn(I + I_pe,   P''' + P_pe, P'''))
///
/// with Attn(Q, K, V). Every residual is taken on the unnormalised stream, so
/// zeroing all module tensors reduces the module to the identity.
struct Rcam {
  MultiHeadAttention self_attn, prompt_to_image, image_to_prompt;
  LayerNorm norm_self, norm_prompt_to_image, norm_mlp, norm_image_to_prompt;
  Mlp mlp;

  Rcam() = default;
  Rcam(Index dim, int heads, Index mlp_ratio, std::mt19937_64& rng);

  /// image [B, M, C], prompt [B, N, C], image_pe [M, C] (or [B, M, C]),
  /// prompt_pe [B, N, C]. Returns refined image tokens [B, M, C].
  Tensor operator()(const Tensor& image, const Tensor& prompt, const Tensor& image_pe,
                    const Tensor& prompt_pe) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace traice3d
