#include "traice3d/decoder.hpp"

namespace traice3d {

namespace {
constexpr Extent3 k3{3, 3, 3};
constexpr Extent3 pad1{1, 1, 1};
constexpr Extent3 unit{1, 1, 1};
constexpr Extent3 two{2, 2, 2};
}  // namespace

ResidualBlock::ResidualBlock(Index cin, Index cout, float dropout, std::mt19937_64& rng)
    : conv1(cin, cout, k3, unit, pad1, rng),
      conv2(cout, cout, k3, unit, pad1, rng),
      bn1(cout),
      bn2(cout),
      dropout_rate(dropout) {
  if (cin != cout) shortcut = Conv3d(cin, cout, unit, unit, {0, 0, 0}, rng);
}

Tensor ResidualBlock::operator()(const Tensor& x, const ForwardMode& mode) {
  auto unit_pass = [&](const Conv3d& conv, BatchNorm3d& bn, const Tensor& in) {
    Tensor h = gelu(bn(conv(in), mode));
    if (mode.training && dropout_rate > 0.0f) {
      if (!mode.rng) throw std::invalid_argument("training mode requires an RNG for dropout");
      h = dropout(h, dropout_rate, true, *mode.rng);
    }
    return h;
  };
  const Tensor branch = unit_pass(conv2, bn2, unit_pass(conv1, bn1, x));
  return add(shortcut ? (*shortcut)(x) : x, branch);
}

void ResidualBlock::collect(const std::string& prefix, NamedTensors& out) const {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  if (shortcut) shortcut->collect(prefix + ".shortcut", out);
}

ConvDecoder::ConvDecoder(const ModelConfig& config, std::mt19937_64& rng) : config_(config) {
  const Index E = config.embed_dim;
  // Stage i upsamples from `from` channels and fuses with skip level 2 - i.
  for (int i = 0; i < 3; ++i) {
    const Index from = (i == 0) ? 8 * E : config.level_channels(3 - i);
    const Index skip = config.level_channels(2 - i);
    up[static_cast<std::size_t>(i)] = ConvTranspose3d(from, from / 4, two, two, rng);
    res[static_cast<std::size_t>(i)] = ResidualBlock(from / 4 + skip, skip, config.dropout, rng);
  }
  head_up = ConvTranspose3d(E, E / 2, config.patch, config.patch, rng);
  head_conv1 = Conv3d(E / 2, E / 2, k3, unit, pad1, rng);
  head_bn = BatchNorm3d(E / 2);
  head_conv2 = Conv3d(E / 2, 1, k3, unit, pad1, rng);
}

Tensor ConvDecoder::operator()(const std::array<Tensor, 4>& skips, const ForwardMode& mode) {
  for (int level = 0; level < 4; ++level)
    if (skips[static_cast<std::size_t>(level)].dim(1) != config_.level_channels(level))
      throw ShapeError("decoder level " + std::to_string(level) + " expects " +
                       std::to_string(config_.level_channels(level)) + " channels, got " +
                       shape_string(skips[static_cast<std::size_t>(level)].shape()));
  Tensor x = skips[3];
  for (int i = 0; i < 3; ++i) {
    const Tensor upsampled = up[static_cast<std::size_t>(i)](x);
    const Tensor parts[2] = {upsampled, skips[static_cast<std::size_t>(2 - i)]};
    x = res[static_cast<std::size_t>(i)](concat(parts, 1), mode);
  }
  Tensor h = gelu(head_up(x));
  h = gelu(head_bn(head_conv1(h), mode));
  return sigmoid(head_conv2(h));
}

void ConvDecoder::collect(const std::string& prefix, NamedTensors& out) const {
  for (int i = 0; i < 3; ++i) {
    up[static_cast<std::size_t>(i)].collect(prefix + ".up" + std::to_string(i + 1), out);
    res[static_cast<std::size_t>(i)].collect(prefix + ".res" + std::to_string(i + 1), out);
  }
  head_up.collect(prefix + ".head.up", out);
  head_conv1.collect(prefix + ".head.conv1", out);
  head_bn.collect(prefix + ".head.bn", out);
  head_conv2.collect(prefix + ".head.conv2", out);
}

}  // namespace traice3d
