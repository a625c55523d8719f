#include "traice3d/losses.hpp"

#include <stdexcept>

namespace traice3d {

void FocalParams::validate() const {
  if (!(alpha > 0.0f && alpha <= 1.0f)) throw std::invalid_argument("focal alpha must lie in (0, 1]");
  if (!(gamma >= 0.0f)) throw std::invalid_argument("focal gamma must be >= 0");
}

void SkeletonConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("skeleton iterations must be >= 1");
}

namespace {

void require_same_shape(const Tensor& pred, const Tensor& target, const char* name) {
  if (pred.shape() != target.shape())
    throw ShapeError(std::string(name) + ": prediction " + shape_string(pred.shape()) +
                     " and target " + shape_string(target.shape()) + " differ");
}

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0f), 1.0f); }

Tensor soft_dice(const Tensor& a, const Tensor& b) {
  const Tensor inter = add_scalar(scale(sum(mul(a, b)), 2.0f), dice_eps);
  const Tensor denom = add_scalar(add(sum(a), sum(b)), dice_eps);
  return one_minus(div(inter, denom));
}

}  // namespace

Tensor focal_loss(const Tensor& pred, const Tensor& target, const FocalParams& params) {
  params.validate();
  require_same_shape(pred, target, "focal_loss");
  const Tensor pt = add(mul(target, pred), mul(one_minus(target), one_minus(pred)));
  const Tensor log_pt = log(clamp(pt, focal_clamp, 1.0f));
  Tensor term = log_pt;
  if (params.gamma != 0.0f) term = mul(pow(clamp(one_minus(pt), 0.0f, 1.0f), params.gamma), log_pt);
  return scale(mean(term), -params.alpha);
}

Tensor dice_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "dice_loss");
  return soft_dice(pred, target);
}

Tensor soft_erode(const Tensor& x) { return min_pool_cross3d(x); }

Tensor soft_dilate(const Tensor& x) { return max_pool3d(x, {3, 3, 3}, {1, 1, 1}); }

Tensor soft_skeleton(const Tensor& mask, const SkeletonConfig& cfg) {
  cfg.validate();
  Tensor img = mask;
  Tensor skel = relu(sub(img, soft_dilate(soft_erode(img))));
  for (int i = 0; i < cfg.iterations; ++i) {
    img = soft_erode(img);
    const Tensor delta = relu(sub(img, soft_dilate(soft_erode(img))));
    skel = add(skel, relu(sub(delta, mul(skel, delta))));
  }
  return minimum(skel, mask);
}

Tensor cldice_loss(const Tensor& pred, const Tensor& target, const SkeletonConfig& cfg) {
  require_same_shape(pred, target, "cldice_loss");
  return soft_dice(soft_skeleton(pred, cfg), soft_skeleton(target, cfg));
}

Tensor combined_loss(const Tensor& pred, const Tensor& target, const LossWeights& weights,
                     const FocalParams& focal, const SkeletonConfig& skeleton) {
  require_same_shape(pred, target, "combined_loss");
  Tensor total;
  auto accumulate = [&](double w, const Tensor& term) {
    const Tensor weighted = scale(term, static_cast<float>(w));
    total = total.defined() ? add(total, weighted) : weighted;
  };
  if (weights.focal != 0.0) accumulate(weights.focal, focal_loss(pred, target, focal));
  if (weights.dice != 0.0) accumulate(weights.dice, dice_loss(pred, target));
  if (weights.cldice != 0.0) accumulate(weights.cldice, cldice_loss(pred, target, skeleton));
  if (!total.defined()) throw std::invalid_argument("all loss weights are zero");
  return total;
}

Tensor soma_loss(const Tensor& pred, const Tensor& target) {
  return combined_loss(pred, target, soma_weights);
}

Tensor branch_loss(const Tensor& pred, const Tensor& target, const SkeletonConfig& skeleton) {
  return combined_loss(pred, target, branch_weights, {}, skeleton);
}

}  // namespace traice3d
