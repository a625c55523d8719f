#pragma once

#include <array>
#include <optional>
#include <vector>

#include "traice3d/decoder.hpp"
#include "traice3d/prompt.hpp"
#include "traice3d/rcam.hpp"

namespace traice3d {

enum class Stage { soma, branch };

Stage parse_stage(const std::string& name);
std::string stage_name(Stage s);

/// Encoder + skips + decoder. The soma model uses identity skips; the branch
/// model adds a prompt encoder and one RCAM per pyramid level.
class SegmentationModel {
 public:
  SegmentationModel(const ModelConfig& config, Stage stage, std::uint64_t seed);

  /// volume [B, 1, D, H, W] -> probabilities [B, 1, D, H, W]. The branch
  /// model needs one prompt set per batch entry, all with the same count.
  Tensor forward(const Tensor& volume, const ForwardMode& mode,
                 const std::vector<PromptSet>* prompts = nullptr);

  /// Parameters and buffers under the checkpoint naming scheme.
  NamedTensors named_tensors() const;
  std::vector<Tensor> trainable_parameters() const;

  const ModelConfig& config() const { return config_; }
  Stage stage() const { return stage_; }

  ImageEncoder encoder;
  ConvDecoder decoder;
  std::optional<PromptEncoder> prompt;
  std::vector<Rcam> rcams;

 private:
  ModelConfig config_;
  Stage stage_;
};

}  // namespace traice3d
