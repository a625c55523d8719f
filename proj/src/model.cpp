#include "traice3d/model.hpp"

#include <random>
#include <stdexcept>

namespace traice3d {

Stage parse_stage(const std::string& name) {
  if (name == "soma") return Stage::soma;
  if (name == "branch") return Stage::branch;
  throw std::invalid_argument("unknown stage '" + name + "' (expected soma|branch)");
}

std::string stage_name(Stage s) { return s == Stage::soma ? "soma" : "branch"; }

SegmentationModel::SegmentationModel(const ModelConfig& config, Stage stage, std::uint64_t seed)
    : config_(config), stage_(stage) {
  config.validate();
  // Independent streams per component.
  std::mt19937_64 enc_rng(seed), dec_rng(seed ^ 0x9e3779b97f4a7c15ULL), skip_rng(seed ^ 0x5bd1e995ULL);
  encoder = ImageEncoder(config, enc_rng);
  decoder = ConvDecoder(config, dec_rng);
  if (stage == Stage::branch) {
    prompt = PromptEncoder(config, skip_rng);
    for (int level = 0; level < 4; ++level)
      rcams.emplace_back(config.level_channels(level), config.heads, config.rcam_mlp_ratio, skip_rng);
  }
}

Tensor SegmentationModel::forward(const Tensor& volume, const ForwardMode& mode,
                                  const std::vector<PromptSet>* prompts) {
  const FeaturePyramid pyramid = encoder(volume);
  std::array<Tensor, 4> skips;
  if (stage_ == Stage::soma) {
    for (int level = 0; level < 4; ++level)
      skips[static_cast<std::size_t>(level)] =
          identity_skip(pyramid.levels[static_cast<std::size_t>(level)].as_volume());
  } else {
    const Index B = volume.dim(0);
    if (!prompts || static_cast<Index>(prompts->size()) != B)
      throw std::invalid_argument("branch model needs one prompt set per batch entry");
    const Extent3 dims{volume.dim(2), volume.dim(3), volume.dim(4)};
    std::vector<Tensor> emb, pe;
    for (const PromptSet& ps : *prompts) {
      if (ps.dims != dims) throw std::invalid_argument("prompt volume dims differ from the input volume");
      if (ps.points.size() != prompts->front().points.size())
        throw std::invalid_argument("prompt sets in a batch must have equal point counts");
      emb.push_back(prompt->encode(ps));
      pe.push_back(prompt->fourier_features(ps));
    }
    const Index N = static_cast<Index>(prompts->front().points.size());
    const Index width = emb.front().dim(1);
    const Tensor embeddings = reshape(concat(emb, 0), {B, N, width});
    const Tensor fourier = reshape(concat(pe, 0), {B, N, width});
    for (int level = 0; level < 4; ++level) {
      const FeatureLevel& fl = pyramid.levels[static_cast<std::size_t>(level)];
      const Tensor refined = rcams[static_cast<std::size_t>(level)](
          fl.tokens, prompt->project(embeddings, level), sinusoidal_pe_3d(fl.grid, fl.channels()),
          prompt->project(fourier, level));
      skips[static_cast<std::size_t>(level)] = FeatureLevel{refined, fl.grid}.as_volume();
    }
  }
  return decoder(skips, mode);
}

NamedTensors SegmentationModel::named_tensors() const {
  NamedTensors out;
  encoder.collect("encoder", out);
  if (prompt) prompt->collect("prompt", out);
  for (std::size_t level = 0; level < rcams.size(); ++level)
    rcams[level].collect("rcam" + std::to_string(level), out);
  decoder.collect("decoder", out);
  return out;
}

std::vector<Tensor> SegmentationModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& nt : named_tensors())
    if (nt.trainable) out.push_back(nt.tensor);
  return out;
}

}  // namespace traice3d
