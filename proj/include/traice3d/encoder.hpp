#pragma once

#include <array>
#include <vector>

#include "traice3d/layers.hpp"
#include "traice3d/model_config.hpp"

namespace traice3d {

/// Sinusoidal 3D positional embedding, shape [gd*gh*gw, dim] in (d, h, w)
/// token order. Channels are split into three equal even-width groups
/// (depth, height, width); each group holds sin/cos pairs over a geometric
/// frequency ladder. Leftover channels are zero.
Tensor sinusoidal_pe_3d(Extent3 grid, Index dim);

/// One encoder level: tokens [B, N, C] laid out on `grid`.
struct FeatureLevel {
  Tensor tokens;
  Extent3 grid;
  Index channels() const { return tokens.dim(2); }
  /// [B, C, gd, gh, gw] view for the convolutional decoder.
  Tensor as_volume() const;
};

struct FeaturePyramid {
  std::array<FeatureLevel, 4> levels;
};

/// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)).
struct TransformerBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(Index dim, int heads, Index mlp_ratio, std::mt19937_64& rng);
  Tensor operator()(const Tensor& tokens) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Concatenates each 2x2x2 token neighbourhood (offsets enumerated w, then h,
/// then d) into 8C features, projects to 2C, and adds a fresh PE.
struct PatchMerge {
  Linear proj;

  PatchMerge() = default;
  PatchMerge(Index dim, std::mt19937_64& rng);
  /// Concatenation only: [B, N, C] on `grid` -> [B, N/8, 8C].
  static Tensor gather_neighbourhoods(const Tensor& tokens, Extent3 grid);
  FeatureLevel operator()(const FeatureLevel& level) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Patch embedding as a strided convolution: [B, 1, D, H, W] -> tokens [B, N, E] + PE.
struct PatchEmbed {
  Conv3d conv;

  PatchEmbed() = default;
  PatchEmbed(const ModelConfig& config, std::mt19937_64& rng);
  FeatureLevel operator()(const Tensor& volume) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& config, std::mt19937_64& rng);

  /// Levels 0..2 are the outputs of blocks 1..3 before merging; level 3 is
  /// the output of the final block on the thrice-merged grid.
  FeaturePyramid operator()(const Tensor& volume) const;
  void collect(const std::string& prefix, NamedTensors& out) const;

  PatchEmbed patch_embed;
  std::vector<TransformerBlock> blocks;
  std::array<PatchMerge, 3> merges;

 private:
  ModelConfig config_;
};

}  // namespace traice3d
