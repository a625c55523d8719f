#include "grad_suite.hpp"

#include "traice3d/decoder.hpp"
#include "traice3d/encoder.hpp"
#include "traice3d/losses.hpp"
#include "traice3d/rcam.hpp"

namespace traice3d::testing {

namespace {

GradProblem unary(Tensor (*op)(const Tensor&), Tensor x) {
  return {[op](const std::vector<Tensor>& in) { return op(in[0]); }, {std::move(x)}};
}

// Away from zero so relu and clamp stay off their kinks.
Tensor off_zero(const Shape& shape, std::mt19937_64& rng) {
  Tensor t = uniform_tensor(shape, rng, 0.05f, 2.0f);
  std::bernoulli_distribution sign(0.5);
  for (float& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

// Binary target with a foreground blob, as a float tensor.
Tensor blob_target(const Shape& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  const Index D = shape[shape.size() - 3], H = shape[shape.size() - 2], W = shape.back();
  std::uniform_int_distribution<Index> cd(0, D - 1), ch(0, H - 1), cw(0, W - 1);
  const Index d0 = cd(rng), h0 = ch(rng), w0 = cw(rng);
  for (Index d = 0; d < D; ++d)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w)
        if (std::abs(d - d0) + std::abs(h - h0) + std::abs(w - w0) <= 2) t.data()[(d * H + h) * W + w] = 1.0f;
  return t;
}

// One straight line along w through a random (d, h); its soft skeleton is
// itself.
Tensor line_target(const Shape& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  const Index D = shape[shape.size() - 3], H = shape[shape.size() - 2], W = shape.back();
  const Index d = std::uniform_int_distribution<Index>(0, D - 1)(rng);
  const Index h = std::uniform_int_distribution<Index>(0, H - 1)(rng);
  for (Index w = 0; w < W; ++w) t.data()[(d * H + h) * W + w] = 1.0f;
  return t;
}

// Probabilities with distinct values so the pooling inside the skeleton has
// no ties within the finite-difference step.
Tensor distinct_probs(const Shape& shape, std::mt19937_64& rng) {
  const Index n = shape_numel(shape);
  return spaced_tensor(shape, rng, 0.05f, 0.9f / static_cast<float>(n));
}

Tensor constant(const Tensor& t) {
  Tensor c = t.clone();
  c.set_requires_grad(false);
  return c;
}

}  // namespace

GradCheck run_grad_problem(const GradProblem& p, std::uint64_t seed) {
  const std::vector<bool> checked = p.checked;
  return gradcheck(p.f, p.inputs, seed, [checked](std::size_t k) { return checked.empty() || checked[k]; });
}

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&cases](std::string name, std::function<GradProblem(std::mt19937_64&)> make) {
    cases.push_back({std::move(name), std::move(make)});
  };

  add_case("add", [](auto& r) {
    return GradProblem{[](const auto& in) { return add(in[0], in[1]); }, {random_tensor({3, 4}, r), random_tensor({4}, r)}};
  });
  add_case("sub", [](auto& r) {
    return GradProblem{[](const auto& in) { return sub(in[0], in[1]); }, {random_tensor({3, 4}, r), random_tensor({3, 4}, r)}};
  });
  add_case("mul", [](auto& r) {
    return GradProblem{[](const auto& in) { return mul(in[0], in[1]); }, {random_tensor({2, 3, 4}, r), random_tensor({3, 4}, r)}};
  });
  add_case("div", [](auto& r) {
    return GradProblem{[](const auto& in) { return div(in[0], in[1]); },
                       {random_tensor({3, 4}, r), uniform_tensor({3, 4}, r, 0.5f, 2.0f)}};
  });
  add_case("minimum", [](auto& r) {
    const Tensor all = spaced_tensor({36}, r, -1.0f, 0.05f);
    return GradProblem{[](const auto& in) { return minimum(in[0], in[1]); },
                       {Tensor({2, 12}, std::vector<float>(all.data(), all.data() + 24)),
                        Tensor({12}, std::vector<float>(all.data() + 24, all.data() + 36))}};
  });
  add_case("scale", [](auto& r) {
    return GradProblem{[](const auto& in) { return scale(in[0], -1.7f); }, {random_tensor({5}, r)}};
  });
  add_case("add_scalar", [](auto& r) {
    return GradProblem{[](const auto& in) { return add_scalar(in[0], 0.3f); }, {random_tensor({5}, r)}};
  });
  add_case("relu", [](auto& r) { return unary(relu, off_zero({4, 5}, r)); });
  add_case("gelu", [](auto& r) { return unary(gelu, random_tensor({4, 5}, r, 2.0f)); });
  add_case("sigmoid", [](auto& r) { return unary(sigmoid, random_tensor({4, 5}, r, 2.0f)); });
  add_case("log", [](auto& r) {
    return GradProblem{[](const auto& in) { return log(in[0]); }, {uniform_tensor({4, 5}, r, 0.2f, 3.0f)}};
  });
  add_case("pow", [](auto& r) {
    return GradProblem{[](const auto& in) { return pow(in[0], 2.5f); }, {uniform_tensor({4, 5}, r, 0.2f, 1.5f)}};
  });
  add_case("clamp", [](auto& r) {
    return GradProblem{[](const auto& in) { return clamp(in[0], -1.0f, 1.0f); }, {off_zero({4, 5}, r)}};
  });
  add_case("matmul", [](auto& r) {
    return GradProblem{[](const auto& in) { return matmul(in[0], in[1]); },
                       {random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r)}};
  });
  add_case("matmul_nt", [](auto& r) {
    return GradProblem{[](const auto& in) { return matmul_nt(in[0], in[1]); },
                       {random_tensor({3, 4}, r), random_tensor({5, 4}, r)}};
  });
  add_case("linear", [](auto& r) {
    return GradProblem{[](const auto& in) { return linear(in[0], in[1], in[2]); },
                       {random_tensor({2, 3, 4}, r), random_tensor({4, 5}, r), random_tensor({5}, r)}};
  });
  add_case("reshape", [](auto& r) {
    return GradProblem{[](const auto& in) { return reshape(in[0], {6, 2}); }, {random_tensor({3, 4}, r)}};
  });
  add_case("permute", [](auto& r) {
    return GradProblem{[](const auto& in) { return permute(in[0], {2, 0, 1}); }, {random_tensor({2, 3, 4}, r)}};
  });
  add_case("concat", [](auto& r) {
    return GradProblem{[](const auto& in) { return concat(in, 1); }, {random_tensor({2, 3, 2}, r), random_tensor({2, 1, 2}, r)}};
  });
  add_case("sum", [](auto& r) {
    return GradProblem{[](const auto& in) { return sum(in[0]); }, {random_tensor({3, 4}, r)}};
  });
  add_case("mean", [](auto& r) {
    return GradProblem{[](const auto& in) { return mean(in[0]); }, {random_tensor({3, 4}, r)}};
  });
  add_case("softmax", [](auto& r) {
    return GradProblem{[](const auto& in) { return softmax(in[0], 1); }, {random_tensor({2, 5, 3}, r, 2.0f)}};
  });
  add_case("layer_norm", [](auto& r) {
    return GradProblem{[](const auto& in) { return layer_norm(in[0], in[1], in[2]); },
                       {random_tensor({3, 6}, r, 2.0f), random_tensor({6}, r), random_tensor({6}, r)}};
  });
  add_case("conv3d_direct_path", [](auto& r) {
    return GradProblem{[](const auto& in) { return conv3d(in[0], in[1], in[2], {1, 1, 1}, {1, 1, 1}); },
                       {random_tensor({1, 2, 3, 4, 4}, r), random_tensor({3, 2, 3, 3, 3}, r, 0.3f), random_tensor({3}, r)}};
  });
  add_case("conv3d_im2col_path", [](auto& r) {
    return GradProblem{[](const auto& in) { return conv3d(in[0], in[1], in[2], {2, 1, 2}, {0, 1, 1}); },
                       {random_tensor({1, 2, 4, 3, 5}, r), random_tensor({3, 2, 2, 3, 3}, r, 0.3f), random_tensor({3}, r)}};
  });
  add_case("conv_transpose3d", [](auto& r) {
    return GradProblem{[](const auto& in) { return conv_transpose3d(in[0], in[1], in[2], {2, 2, 2}); },
                       {random_tensor({1, 3, 2, 2, 2}, r), random_tensor({3, 2, 2, 2, 2}, r, 0.5f), random_tensor({2}, r)}};
  });
  add_case("max_pool3d", [](auto& r) {
    return GradProblem{[](const auto& in) { return max_pool3d(in[0], {3, 3, 3}, {1, 1, 1}); },
                       {spaced_tensor({1, 1, 3, 4, 4}, r, -1.0f, 0.04f)}};
  });
  add_case("min_pool_cross3d", [](auto& r) {
    return GradProblem{[](const auto& in) { return min_pool_cross3d(in[0]); },
                       {spaced_tensor({1, 1, 3, 4, 4}, r, -1.0f, 0.04f)}};
  });
  add_case("batch_norm_training", [](auto& r) {
    return GradProblem{[](const auto& in) {
                         Tensor rm = Tensor::full({3}, 0.0f), rv = Tensor::full({3}, 1.0f);
                         return batch_norm(in[0], in[1], in[2], rm, rv, true);
                       },
                       {random_tensor({2, 3, 2, 2, 2}, r, 2.0f), random_tensor({3}, r), random_tensor({3}, r)}};
  });
  add_case("dropout_training", [](auto& r) {
    const std::uint64_t s = r();
    return GradProblem{[s](const auto& in) {
                         std::mt19937_64 local(s);
                         return dropout(in[0], 0.3f, true, local);
                       },
                       {random_tensor({4, 5}, r)}};
  });
  add_case("attention", [](auto& r) {
    return GradProblem{[](const auto& in) { return scaled_dot_product_attention(in[0], in[1], in[2]); },
                       {random_tensor({2, 3, 4}, r), random_tensor({2, 5, 4}, r), random_tensor({2, 5, 4}, r)}};
  });
  add_case("composite_conv_gelu_layernorm", [](auto& r) {
    return GradProblem{[](const auto& in) {
                         // The harness reduces with a random weighting; a plain sum would
                         // add the constant sum of the layer-norm bias and drown the
                         // bias gradient in rounding.
                         const Tensor y = gelu(conv3d(in[0], in[1], in[2], {1, 1, 1}, {1, 1, 1}));
                         return layer_norm(y, in[3], in[4]);
                       },
                       {random_tensor({1, 2, 2, 3, 4}, r), random_tensor({2, 2, 3, 3, 3}, r, 0.3f), random_tensor({2}, r),
                        random_tensor({4}, r), random_tensor({4}, r)}};
  });
  add_case("transformer_block", [](auto& r) {
    auto block = std::make_shared<TransformerBlock>(8, 8, 2, r);
    return GradProblem{[block](const auto& in) { return (*block)(in[0]); }, {random_tensor({1, 3, 8}, r)}};
  });
  add_case("rcam", [](auto& r) {
    auto rcam = std::make_shared<Rcam>(8, 8, 2, r);
    return GradProblem{[rcam](const auto& in) { return (*rcam)(in[0], in[1], in[2], in[3]); },
                       {random_tensor({1, 2, 8}, r), random_tensor({1, 1, 8}, r), random_tensor({2, 8}, r),
                        random_tensor({1, 1, 8}, r)},
                       {true, true, false, false}};
  });
  add_case("residual_block_eval", [](auto& r) {
    auto block = std::make_shared<ResidualBlock>(2, 3, 0.1f, r);
    return GradProblem{[block](const auto& in) { return (*block)(in[0], ForwardMode{}); },
                       {random_tensor({1, 2, 2, 3, 3}, r)}};
  });

  const Shape vol{1, 1, 3, 5, 5};
  add_case("focal_loss", [vol](auto& r) {
    const Tensor t = blob_target(vol, r);
    return GradProblem{[t](const auto& in) { return focal_loss(in[0], t); }, {uniform_tensor(vol, r, 0.05f, 0.95f)}};
  });
  add_case("dice_loss", [vol](auto& r) {
    const Tensor t = blob_target(vol, r);
    return GradProblem{[t](const auto& in) { return dice_loss(in[0], t); }, {uniform_tensor(vol, r, 0.05f, 0.95f)}};
  });
  add_case("cldice_loss", [vol](auto& r) {
    const Tensor t = line_target(vol, r);
    return GradProblem{[t](const auto& in) { return cldice_loss(in[0], t); }, {distinct_probs(vol, r)}};
  });
  add_case("soma_loss", [vol](auto& r) {
    const Tensor t = blob_target(vol, r);
    return GradProblem{[t](const auto& in) { return soma_loss(in[0], t); }, {uniform_tensor(vol, r, 0.05f, 0.95f)}};
  });
  add_case("branch_loss", [vol](auto& r) {
    const Tensor t = blob_target(vol, r);
    return GradProblem{[t](const auto& in) { return branch_loss(in[0], t); }, {distinct_probs(vol, r)}};
  });
  add_case("loss_through_sigmoid", [](auto& r) {
    const Shape small{1, 1, 2, 4, 4};
    const Tensor t = constant(blob_target(small, r));
    return GradProblem{[t](const auto& in) { return branch_loss(sigmoid(in[0]), t); },
                       {spaced_tensor(small, r, -2.0f, 4.0f / 32.0f)}};
  });
  return cases;
}

}  // namespace traice3d::testing
