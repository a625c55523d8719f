#include "traice3d/encoder.hpp"

#include <cmath>

namespace traice3d {

Tensor sinusoidal_pe_3d(Extent3 grid, Index dim) {
  if (dim < 6) throw std::invalid_argument("positional embedding needs at least 6 channels");
  const Index group = (dim / 3) / 2 * 2;
  const Index pairs = group / 2;
  const Index n = grid.d * grid.h * grid.w;
  Tensor pe(Shape{n, dim});
  float* p = pe.data();
  for (Index d = 0; d < grid.d; ++d)
    for (Index h = 0; h < grid.h; ++h)
      for (Index w = 0; w < grid.w; ++w) {
        float* row = p + ((d * grid.h + h) * grid.w + w) * dim;
        const Index coord[3] = {d, h, w};
        for (int axis = 0; axis < 3; ++axis)
          for (Index k = 0; k < pairs; ++k) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(group));
            const double angle = static_cast<double>(coord[axis]) * freq;
            row[axis * group + 2 * k] = static_cast<float>(std::sin(angle));
            row[axis * group + 2 * k + 1] = static_cast<float>(std::cos(angle));
          }
      }
  return pe;
}

Tensor FeatureLevel::as_volume() const {
  const Index B = tokens.dim(0), C = tokens.dim(2);
  return permute(reshape(tokens, {B, grid.d, grid.h, grid.w, C}), {0, 4, 1, 2, 3});
}

TransformerBlock::TransformerBlock(Index dim, int heads, Index mlp_ratio, std::mt19937_64& rng)
    : norm1(dim), norm2(dim), attn(dim, heads, rng), mlp(dim, dim * mlp_ratio, rng) {}

Tensor TransformerBlock::operator()(const Tensor& tokens) const {
  const Tensor h = norm1(tokens);
  const Tensor x = add(tokens, attn(h, h, h));
  return add(x, mlp(norm2(x)));
}

void TransformerBlock::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  mlp.collect(prefix + ".mlp", out);
}

PatchMerge::PatchMerge(Index dim, std::mt19937_64& rng) : proj(8 * dim, 2 * dim, rng) {}

Tensor PatchMerge::gather_neighbourhoods(const Tensor& tokens, Extent3 grid) {
  if (grid.d % 2 || grid.h % 2 || grid.w % 2)
    throw ShapeError("patch merge needs even grid extents, got (" + std::to_string(grid.w) + "," +
                     std::to_string(grid.h) + "," + std::to_string(grid.d) + ")");
  const Index B = tokens.dim(0), C = tokens.dim(2);
  const Tensor split = reshape(tokens, {B, grid.d / 2, 2, grid.h / 2, 2, grid.w / 2, 2, C});
  // [B, d', od, h', oh, w', ow, C] -> [B, d', h', w', ow, oh, od, C]
  const Tensor grouped = permute(split, {0, 1, 3, 5, 6, 4, 2, 7});
  return reshape(grouped, {B, grid.d * grid.h * grid.w / 8, 8 * C});
}

FeatureLevel PatchMerge::operator()(const FeatureLevel& level) const {
  const Extent3 g{level.grid.d / 2, level.grid.h / 2, level.grid.w / 2};
  const Tensor merged = proj(gather_neighbourhoods(level.tokens, level.grid));
  return {add(merged, sinusoidal_pe_3d(g, merged.dim(2))), g};
}

void PatchMerge::collect(const std::string& prefix, NamedTensors& out) const {
  proj.collect(prefix + ".proj", out);
}

PatchEmbed::PatchEmbed(const ModelConfig& config, std::mt19937_64& rng)
    : conv(1, config.embed_dim, config.patch, config.patch, {0, 0, 0}, rng) {}

FeatureLevel PatchEmbed::operator()(const Tensor& volume) const {
  if (volume.ndim() != 5 || volume.dim(1) != 1)
    throw ShapeError("encoder expects a [B, 1, D, H, W] volume, got " + shape_string(volume.shape()));
  const Extent3 patch{conv.weight.dim(2), conv.weight.dim(3), conv.weight.dim(4)};
  if (volume.dim(2) % patch.d || volume.dim(3) % patch.h || volume.dim(4) % patch.w)
    throw ShapeError("volume " + shape_string(volume.shape()) + " is not divisible into patches");
  const Tensor grid_features = conv(volume);
  const Index B = volume.dim(0), E = grid_features.dim(1);
  const Extent3 g{grid_features.dim(2), grid_features.dim(3), grid_features.dim(4)};
  const Tensor tokens = reshape(permute(grid_features, {0, 2, 3, 4, 1}), {B, g.d * g.h * g.w, E});
  return {add(tokens, sinusoidal_pe_3d(g, E)), g};
}

void PatchEmbed::collect(const std::string& prefix, NamedTensors& out) const {
  conv.collect(prefix, out);
}

ImageEncoder::ImageEncoder(const ModelConfig& config, std::mt19937_64& rng)
    : patch_embed(config, rng), config_(config) {
  for (int i = 0; i < config.blocks; ++i) {
    const int level = std::min(i, 3);
    blocks.emplace_back(config.level_channels(level), config.heads, config.mlp_ratio, rng);
    if (i < 3) merges[static_cast<std::size_t>(i)] = PatchMerge(config.level_channels(i), rng);
  }
}

FeaturePyramid ImageEncoder::operator()(const Tensor& volume) const {
  config_.validate_input({volume.dim(2), volume.dim(3), volume.dim(4)});
  FeaturePyramid pyramid;
  FeatureLevel x = patch_embed(volume);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x.tokens = blocks[i](x.tokens);
    if (i < 3) {
      pyramid.levels[i] = x;
      x = merges[i](x);
    }
  }
  pyramid.levels[3] = x;
  return pyramid;
}

void ImageEncoder::collect(const std::string& prefix, NamedTensors& out) const {
  patch_embed.collect(prefix + ".patch_embed", out);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(prefix + ".block" + std::to_string(i + 1), out);
    if (i < 3) merges[i].collect(prefix + ".merge" + std::to_string(i + 1), out);
  }
}

}  // namespace traice3d
