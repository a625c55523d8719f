#pragma once

#include <array>
#include <optional>

#include "traice3d/encoder.hpp"

namespace traice3d {

/// Two conv(3x3x3) -> batchnorm -> GeLU -> dropout units plus a shortcut
/// (1x1x1 projection when the channel count changes).
struct ResidualBlock {
  Conv3d conv1, conv2;
  BatchNorm3d bn1, bn2;
  std::optional<Conv3d> shortcut;
  float dropout_rate = 0.0f;

  ResidualBlock() = default;
  ResidualBlock(Index cin, Index cout, float dropout, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const ForwardMode& mode);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Convolutional decoder. With E the embedding width:
///   8E -up-> 2E ++ 4E -res-> 4E -up-> E ++ 2E -res-> 2E -up-> E/2 ++ E -res-> E
/// then a transposed conv with kernel = stride = patch (E -> E/2), two 3x3x3
/// convs (E/2 -> E/2 -> 1) and a sigmoid.
class ConvDecoder {
 public:
  ConvDecoder() = default;
  ConvDecoder(const ModelConfig& config, std::mt19937_64& rng);

  /// skips[level] are [B, C_level, g...] volumes; returns probabilities [B, 1, D, H, W].
  Tensor operator()(const std::array<Tensor, 4>& skips, const ForwardMode& mode);
  void collect(const std::string& prefix, NamedTensors& out) const;

  std::array<ConvTranspose3d, 3> up;
  std::array<ResidualBlock, 3> res;
  ConvTranspose3d head_up;
  Conv3d head_conv1;
  BatchNorm3d head_bn;
  Conv3d head_conv2;

 private:
  ModelConfig config_;
};

}  // namespace traice3d
