#include "traice3d/model_config.hpp"

#include <stdexcept>

#include "traice3d/json_fields.hpp"

namespace traice3d {

Variant parse_variant(const std::string& name) {
  if (name == "tiny" || name == "Tiny") return Variant::tiny;
  if (name == "s" || name == "S") return Variant::s;
  if (name == "m" || name == "M") return Variant::m;
  if (name == "l" || name == "L") return Variant::l;
  throw std::invalid_argument("unknown variant '" + name + "' (expected tiny|s|m|l)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::tiny: return "tiny";
    case Variant::s: return "s";
    case Variant::m: return "m";
    case Variant::l: return "l";
  }
  return "?";
}

Index variant_embed_dim(Variant v) {
  switch (v) {
    case Variant::tiny: return 16;
    case Variant::s: return 32;
    case Variant::m: return 64;
    case Variant::l: return 128;
  }
  return 0;
}

ModelConfig ModelConfig::for_variant(Variant v, Extent3 input) {
  ModelConfig c;
  c.variant = v;
  c.embed_dim = variant_embed_dim(v);
  c.input = input;
  return c;
}

Extent3 ModelConfig::grid() const {
  return {input.d / patch.d, input.h / patch.h, input.w / patch.w};
}

Extent3 ModelConfig::level_grid(int level) const {
  const Extent3 g = grid();
  return {g.d >> level, g.h >> level, g.w >> level};
}

void ModelConfig::validate_input(Extent3 dims) const {
  auto check = [&](Index extent, Index patch_extent, const char* axis) {
    if (extent % patch_extent != 0)
      throw std::invalid_argument(std::string("input ") + axis + " extent " + std::to_string(extent) +
                                  " is not divisible by the patch extent " +
                                  std::to_string(patch_extent));
    if ((extent / patch_extent) % 8 != 0)
      throw std::invalid_argument(std::string("patch grid ") + axis + " extent " +
                                  std::to_string(extent / patch_extent) +
                                  " must be divisible by 8 for three 2x merges");
  };
  check(dims.w, patch.w, "width");
  check(dims.h, patch.h, "height");
  check(dims.d, patch.d, "depth");
}

void ModelConfig::validate() const {
  if (embed_dim < 8 || embed_dim % 2 != 0)
    throw std::invalid_argument("embed_dim must be even and >= 8");
  if (heads < 1 || embed_dim % heads != 0)
    throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) +
                                " must be divisible by heads " + std::to_string(heads));
  if (blocks < 4) throw std::invalid_argument("blocks must be >= 4 (three merges plus a deep stage)");
  if (mlp_ratio < 1 || rcam_mlp_ratio < 1) throw std::invalid_argument("mlp ratios must be >= 1");
  if (dropout < 0.0f || dropout >= 1.0f) throw std::invalid_argument("dropout must be in [0, 1)");
  if (prompt_features < 1) throw std::invalid_argument("prompt_features must be >= 1");
  validate_input(input);
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"variant", variant_name(c.variant)},
          {"embed_dim", c.embed_dim},
          {"heads", c.heads},
          {"blocks", c.blocks},
          {"patch", {c.patch.w, c.patch.h, c.patch.d}},
          {"mlp_ratio", c.mlp_ratio},
          {"input_dims", {c.input.w, c.input.h, c.input.d}},
          {"dropout", c.dropout},
          {"prompt_features", c.prompt_features},
          {"rcam_mlp_ratio", c.rcam_mlp_ratio}};
}

using json_fields::field;
using json_fields::whd;

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(j,
                              {"variant", "embed_dim", "heads", "blocks", "patch", "mlp_ratio",
                               "input_dims", "dropout", "prompt_features", "rcam_mlp_ratio"},
                              path);
  ModelConfig c;
  try {
    c = ModelConfig::for_variant(parse_variant(field<std::string>(j, "variant", "tiny", path)));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ".variant: " + e.what());
  }
  c.embed_dim = field<Index>(j, "embed_dim", c.embed_dim, path);
  c.heads = field<int>(j, "heads", c.heads, path);
  c.blocks = field<int>(j, "blocks", c.blocks, path);
  if (j.contains("patch")) c.patch = whd(j.at("patch"), path + ".patch");
  c.mlp_ratio = field<Index>(j, "mlp_ratio", c.mlp_ratio, path);
  if (j.contains("input_dims")) c.input = whd(j.at("input_dims"), path + ".input_dims");
  c.dropout = field<float>(j, "dropout", c.dropout, path);
  c.prompt_features = field<Index>(j, "prompt_features", c.prompt_features, path);
  c.rcam_mlp_ratio = field<Index>(j, "rcam_mlp_ratio", c.rcam_mlp_ratio, path);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return c;
}

}  // namespace traice3d
