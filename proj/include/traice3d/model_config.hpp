#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "traice3d/ops.hpp"

namespace traice3d {

enum class Variant { tiny, s, m, l };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
/// Encoder embedding width: Tiny 16, S 32, M 64, L 128.
Index variant_embed_dim(Variant v);

struct ModelConfig {
  Variant variant = Variant::tiny;
  Index embed_dim = 16;
  int heads = 8;
  int blocks = 6;
  Extent3 patch{2, 8, 8};    // (d, h, w) voxels per token
  Index mlp_ratio = 8;
  Extent3 input{16, 64, 64};  // (d, h, w) voxels
  float dropout = 0.1f;       // decoder dropout
  Index prompt_features = 64; // Fourier feature count d; prompt width is 2d
  Index rcam_mlp_ratio = 2;

  static ModelConfig for_variant(Variant v, Extent3 input = {16, 64, 64});

  /// Patch grid extents (input / patch).
  Extent3 grid() const;
  /// Channel width of pyramid level 0..3: E, 2E, 4E, 8E.
  Index level_channels(int level) const { return embed_dim << level; }
  Extent3 level_grid(int level) const;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  /// Same as validate() for an arbitrary input extent.
  void validate_input(Extent3 dims) const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys fall back to the variant defaults; errors name the field path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

}  // namespace traice3d
