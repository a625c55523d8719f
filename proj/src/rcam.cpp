#include "traice3d/rcam.hpp"

namespace traice3d {

Rcam::Rcam(Index dim, int heads, Index mlp_ratio, std::mt19937_64& rng)
    : self_attn(dim, heads, rng),
      prompt_to_image(dim, heads, rng),
      image_to_prompt(dim, heads, rng),
      norm_self(dim),
      norm_prompt_to_image(dim),
      norm_mlp(dim),
      norm_image_to_prompt(dim),
      mlp(dim, dim * mlp_ratio, rng) {}

Tensor Rcam::operator()(const Tensor& image, const Tensor& prompt, const Tensor& image_pe,
                        const Tensor& prompt_pe) const {
  if (image.ndim() != 3 || prompt.ndim() != 3 || image.dim(2) != prompt.dim(2) ||
      image.dim(0) != prompt.dim(0))
    throw ShapeError("rcam: image " + shape_string(image.shape()) + " and prompt " +
                     shape_string(prompt.shape()) + " must be [B, M, C] / [B, N, C]");
  if (prompt_pe.shape() != prompt.shape())
    throw ShapeError("rcam: prompt positional embedding must match the prompt tokens");
  const Tensor image_keyed = add(image, image_pe);

  const Tensor p_pos = add(prompt, prompt_pe);
  const Tensor p1 = add(prompt, norm_self(self_attn(p_pos, p_pos, prompt)));
  const Tensor p2 =
      add(p1, norm_prompt_to_image(prompt_to_image(add(p1, prompt_pe), image_keyed, image)));
  const Tensor p3 = add(p2, norm_mlp(mlp(p2)));
  return add(image, norm_image_to_prompt(image_to_prompt(image_keyed, add(p3, prompt_pe), p3)));
}

void Rcam::collect(const std::string& prefix, NamedTensors& out) const {
  self_attn.collect(prefix + ".self_attn", out);
  norm_self.collect(prefix + ".norm_self", out);
  prompt_to_image.collect(prefix + ".prompt_to_image", out);
  norm_prompt_to_image.collect(prefix + ".norm_prompt_to_image", out);
  mlp.collect(prefix + ".mlp", out);
  norm_mlp.collect(prefix + ".norm_mlp", out);
  image_to_prompt.collect(prefix + ".image_to_prompt", out);
  norm_image_to_prompt.collect(prefix + ".norm_image_to_prompt", out);
}

}  // namespace traice3d
