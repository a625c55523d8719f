#include <doctest.h>

#include "grad_suite.hpp"

using namespace traice3d::testing;

TEST_CASE("analytic gradients match central differences") {
  for (const GradCase& c : gradient_cases()) {
    for (int seed = 0; seed < grad_seeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919 + 1);
      GradProblem p = c.make(rng);
      const GradCheck r = run_grad_problem(p, static_cast<std::uint64_t>(seed));
      INFO(c.name << " seed " << seed << ": " << r.detail);
      CHECK(r.max_rel_error < grad_tolerance);
    }
  }
}

TEST_CASE("frozen inputs receive no gradient") {
  std::mt19937_64 rng(1);
  traice3d::Tensor frozen = random_tensor({3}, rng);
  traice3d::Tensor live = random_tensor({3}, rng);
  live.set_requires_grad(true);
  traice3d::Graph g;
  traice3d::Tensor loss;
  {
    traice3d::GraphScope scope(g);
    loss = traice3d::sum(traice3d::mul(frozen, live));
  }
  traice3d::backward(loss, g);
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.has_grad());
}

TEST_CASE("the checker flags gradients that miss a path") {
  using traice3d::Tensor;
  // Second factor rebuilt as a constant each call: the tape sees x * c, the
  // finite differences see x^2.
  const TensorFn square = [](const std::vector<Tensor>& in) {
    const Tensor c(in[0].shape(), std::vector<float>(in[0].values().begin(), in[0].values().end()));
    return traice3d::mul(in[0], c);
  };
  const TensorFn nearly = [](const std::vector<Tensor>& in) {
    const Tensor c(in[0].shape(), std::vector<float>(in[0].values().begin(), in[0].values().end()));
    return traice3d::add(in[0], traice3d::scale(c, 5e-3f));
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    CHECK(gradcheck(square, {random_tensor({3, 4}, rng)}, seed).max_rel_error > 0.1);
    CHECK(gradcheck(nearly, {random_tensor({3, 4}, rng)}, seed).max_rel_error > grad_tolerance);
  }
}
