#include <doctest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "traice3d/checkpoint.hpp"
#include "traice3d/optim.hpp"

using namespace traice3d;
using namespace traice3d::testing;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return m;
}

double inner(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (Index i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.data()[i]) * b.data()[i];
  return acc;
}

Tensor batch_one(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, s);
}

}  // namespace

TEST_CASE("tensor storage and shape bookkeeping") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor({2, 3}, {1, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  Tensor shared = t;
  CHECK(shared.same_storage(t));
  Tensor copy = t.clone();
  copy.data()[0] = 9;
  CHECK(t.data()[0] == 1);
  t.set_requires_grad(true);
  CHECK(t.grad_mut().size() == 6);
}

TEST_CASE("matmul examples and triple-loop oracle") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(a, eye), a) == 0.0);
  const Tensor r = matmul(a, Tensor({2, 1}, {5, 6}));
  CHECK(r.data()[0] == 17);
  CHECK(r.data()[1] == 39);
  CHECK_THROWS_AS(matmul(a, Tensor({3, 1})), ShapeError);

  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({7, 5}, rng), y = random_tensor({5, 3}, rng);
  CHECK(max_abs_diff(matmul(x, y), matmul_loops(x, y)) < 1e-5);
  const Tensor yt = permute(y, {1, 0});
  CHECK(max_abs_diff(matmul_nt(x, yt), matmul_loops(x, y)) < 1e-5);
}

TEST_CASE("conv3d identity kernel, constant field and nested-loop oracle") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 4, 5, 6}, rng);
  const Tensor one({1, 1, 1, 1, 1}, {1.0f});
  CHECK(max_abs_diff(conv3d(x, one, Tensor({1}, {0.0f}), {1, 1, 1}, {0, 0, 0}), x) == 0.0);

  const float c = 0.7f;
  const Tensor field = Tensor::full({1, 5, 5, 5}, c);
  const Tensor y = conv3d(field, Tensor::full({1, 1, 3, 3, 3}, 1.0f), Tensor(), {1, 1, 1}, {1, 1, 1});
  CHECK(y.shape() == Shape{1, 5, 5, 5});
  CHECK(y.data()[(2 * 5 + 2) * 5 + 2] == doctest::Approx(27 * c).epsilon(1e-6));
  CHECK(y.data()[0] == doctest::Approx(8 * c).epsilon(1e-6));

  CHECK_THROWS_AS(conv3d(Tensor({1, 2, 2, 2}), Tensor({1, 1, 3, 3, 3}), Tensor(), {1, 1, 1}, {0, 0, 0}),
                  ShapeError);

  struct Case {
    Index cin, cout;
    Extent3 dims, kernel, stride, padding;
  };
  // The first two take the direct stride-1 path, the rest the im2col path.
  const Case cases[] = {
      {2, 3, {5, 6, 7}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
      {4, 4, {4, 5, 3}, {1, 3, 2}, {1, 1, 1}, {0, 1, 1}},
      {17, 16, {4, 4, 4}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
      {3, 2, {6, 7, 8}, {2, 3, 3}, {2, 2, 3}, {1, 0, 1}},
      {1, 4, {4, 16, 16}, {2, 8, 8}, {2, 8, 8}, {0, 0, 0}},
  };
  for (const Case& k : cases) {
    const Tensor in = random_tensor({k.cin, k.dims.d, k.dims.h, k.dims.w}, rng);
    const Tensor w = random_tensor({k.cout, k.cin, k.kernel.d, k.kernel.h, k.kernel.w}, rng);
    const Tensor b = random_tensor({k.cout}, rng);
    CHECK(max_abs_diff(conv3d(in, w, b, k.stride, k.padding), conv3d_direct(in, w, b, k.stride, k.padding)) < 1e-4);
    const Tensor batched = conv3d(batch_one(in), w, b, k.stride, k.padding);
    CHECK(batched.dim(0) == 1);
  }
}

TEST_CASE("conv_transpose3d scatter, shape law, adjoint identity and oracle") {
  const Tensor x({1, 1, 1, 1}, {2.5f});
  const Tensor y = conv_transpose3d(x, Tensor::full({1, 1, 2, 2, 2}, 1.0f), Tensor(), {2, 2, 2});
  CHECK(y.shape() == Shape{1, 2, 2, 2});
  for (float v : y.values()) CHECK(v == 2.5f);

  std::mt19937_64 rng(5);
  const Tensor big = conv_transpose3d(random_tensor({1, 4, 4, 4}, rng), random_tensor({1, 1, 2, 2, 2}, rng),
                                      Tensor(), {2, 2, 2});
  CHECK(big.shape() == Shape{1, 8, 8, 8});

  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 r(static_cast<std::uint64_t>(seed));
    const Extent3 stride{1 + seed % 2, 2, 1 + (seed + 1) % 3};
    const Tensor w = random_tensor({3, 2, 2, 3, 2}, r);
    const Tensor u = random_tensor({2, 5, 7, 6}, r);
    const Tensor cu = conv3d(u, w, Tensor(), stride, {0, 0, 0});
    const Tensor v = random_tensor(cu.shape(), r);
    // conv3d weight [C_out=3, C_in=2] is the transpose weight [C_in=3, C_out=2].
    const Tensor ctv = conv_transpose3d(v, w, Tensor(), stride);
    REQUIRE(ctv.dim(1) <= u.dim(1));
    // Output extents of the transpose can exceed u when the stride does not
    // divide evenly; those voxels never enter the inner product.
    double rhs = 0.0;
    for (Index c = 0; c < u.dim(0); ++c)
      for (Index d = 0; d < ctv.dim(1); ++d)
        for (Index h = 0; h < ctv.dim(2); ++h)
          for (Index q = 0; q < ctv.dim(3); ++q)
            rhs += static_cast<double>(u.data()[((c * u.dim(1) + d) * u.dim(2) + h) * u.dim(3) + q]) *
                   ctv.data()[((c * ctv.dim(1) + d) * ctv.dim(2) + h) * ctv.dim(3) + q];
    const double lhs = inner(cu, v);
    CHECK(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)) < 1e-4);

    const Tensor in = random_tensor({2, 3, 2, 4}, r);
    const Tensor wt = random_tensor({2, 3, 2, 2, 3}, r), bt = random_tensor({3}, r);
    CHECK(max_abs_diff(conv_transpose3d(in, wt, bt, stride), conv_transpose3d_direct(in, wt, bt, stride)) < 1e-4);
  }
}

TEST_CASE("softmax examples") {
  const Tensor half = softmax(Tensor({2}, {0, 0}), 0);
  CHECK(half.data()[0] == doctest::Approx(0.5));
  const Tensor q = softmax(Tensor({2}, {0, static_cast<float>(std::log(3.0))}), 0);
  CHECK(q.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(q.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({4, 6, 5}, rng, 3.0f);
  const Tensor shifted = softmax(add_scalar(x, 12.5f), 1);
  CHECK(max_abs_diff(softmax(x, 1), shifted) < 1e-6);
  const Tensor s = softmax(x, -1);
  for (Index r = 0; r < 24; ++r) {
    double total = 0.0;
    for (Index j = 0; j < 5; ++j) total += s.data()[r * 5 + j];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  CHECK_THROWS(softmax(x, 3));
}

TEST_CASE("layer_norm examples and direct-formula oracle") {
  const Tensor gain = Tensor::full({6}, 1.0f), bias = Tensor::full({6}, 0.0f);
  const Tensor constant = layer_norm(Tensor::full({1, 6}, 3.0f), gain, bias);
  for (float v : constant.values()) CHECK(v == 0.0f);

  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({5, 6}, rng, 2.0f);
  const Tensor y = layer_norm(x, gain, bias);
  for (Index r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (Index j = 0; j < 6; ++j) m += y.data()[r * 6 + j];
    m /= 6;
    for (Index j = 0; j < 6; ++j) v += (y.data()[r * 6 + j] - m) * (y.data()[r * 6 + j] - m);
    v /= 6;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
  const Tensor g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  const Tensor z = layer_norm(x, g, b);
  for (Index r = 0; r < 5; ++r) {
    const Vec row(x.data() + r * 6, x.data() + r * 6 + 6);
    const Vec expect = layer_norm_row(row, g, b);
    for (Index j = 0; j < 6; ++j) CHECK(std::abs(z.data()[r * 6 + j] - expect[static_cast<std::size_t>(j)]) < 1e-5);
  }
}

TEST_CASE("gelu and sigmoid examples") {
  const Tensor g = gelu(Tensor({3}, {0.0f, 10.0f, 1.0f}));
  CHECK(g.data()[0] == 0.0f);
  CHECK(std::abs(g.data()[1] - 10.0) < 1e-6);
  CHECK(std::abs(g.data()[2] - normal_cdf_simpson(1.0)) < 1e-6);
  CHECK(std::abs(g.data()[2] - 0.84134) < 1e-5);

  const Tensor s = sigmoid(Tensor({2}, {0.0f, static_cast<float>(std::log(3.0))}));
  CHECK(s.data()[0] == 0.5f);
  CHECK(s.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({50}, rng, 4.0f);
  const Tensor a = sigmoid(scale(x, -1.0f)), b = sigmoid(x);
  for (Index i = 0; i < 50; ++i) {
    CHECK(std::abs(a.data()[i] - (1.0f - b.data()[i])) < 1e-6);
    CHECK(b.data()[i] > 0.0f);
    CHECK(b.data()[i] < 1.0f);
  }
}

TEST_CASE("elementwise, reshape, permute and concat values") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row({3}, {10, 20, 30});
  CHECK(add(a, row).data()[5] == 36);
  CHECK(mul(a, Tensor::scalar(2)).data()[4] == 10);
  CHECK(div(a, row).data()[0] == doctest::Approx(0.1));
  CHECK(minimum(a, Tensor::full({2, 3}, 3.5f)).data()[4] == 3.5f);
  CHECK(pow(a, 2.0f).data()[2] == 9);
  CHECK(log(a).data()[0] == 0.0f);
  CHECK(clamp(a, 2, 4).data()[0] == 2);
  CHECK(relu(Tensor({2}, {-1, 2})).data()[0] == 0);
  CHECK_THROWS_AS(add(a, Tensor({2})), ShapeError);

  const Tensor p = permute(a, {1, 0});
  CHECK(p.shape() == Shape{3, 2});
  CHECK(p.data()[1] == 4);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
  const Tensor parts[] = {a, Tensor({1, 3}, {7, 8, 9})};
  const Tensor c = concat(parts, 0);
  CHECK(c.shape() == Shape{3, 3});
  CHECK(c.data()[8] == 9);
  CHECK(sum(a).item() == 21);
  CHECK(mean(a).item() == 3.5f);
}

TEST_CASE("max and cross min pooling") {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  const Tensor mx = max_pool3d(x, {3, 3, 3}, {1, 1, 1});
  const Tensor mn = min_pool_cross3d(x);
  auto at = [&](const Tensor& t, Index c, Index d, Index h, Index w) { return t.data()[((c * 3 + d) * 4 + h) * 5 + w]; };
  for (Index c = 0; c < 2; ++c)
    for (Index d = 0; d < 3; ++d)
      for (Index h = 0; h < 4; ++h)
        for (Index w = 0; w < 5; ++w) {
          float best = -1e30f, low = at(x, c, d, h, w);
          for (Index a = -1; a <= 1; ++a)
            for (Index b = -1; b <= 1; ++b)
              for (Index e = -1; e <= 1; ++e) {
                const Index dd = d + a, hh = h + b, ww = w + e;
                if (dd < 0 || hh < 0 || ww < 0 || dd >= 3 || hh >= 4 || ww >= 5) continue;
                best = std::max(best, at(x, c, dd, hh, ww));
                if (std::abs(a) + std::abs(b) + std::abs(e) == 1) low = std::min(low, at(x, c, dd, hh, ww));
              }
          CHECK(at(mx, c, d, h, w) == best);
          CHECK(at(mn, c, d, h, w) == low);
        }
}

TEST_CASE("backward examples and graph rules") {
  Tensor a({3}, {1, 2, 3}, true), b({3}, {4, 5, 6}, true);
  Graph g;
  Tensor loss;
  {
    GraphScope scope(g);
    loss = sum(mul(a, b));
  }
  backward(loss, g);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.grad()[i] == b.data()[i]);
    CHECK(b.grad()[i] == a.data()[i]);
  }
  CHECK_THROWS_AS(backward(loss, g), GraphError);

  Graph g2;
  Tensor vec;
  {
    GraphScope scope(g2);
    vec = mul(a, b);
  }
  CHECK_THROWS_AS(backward(vec, g2), GraphError);

  // Grads accumulate across graphs.
  Graph g3;
  {
    GraphScope scope(g3);
    loss = sum(mul(a, b));
  }
  backward(loss, g3);
  CHECK(a.grad()[0] == 8);

  Tensor x({1}, {0.0f}, true);
  Graph g4;
  {
    GraphScope scope(g4);
    loss = sum(gelu(x));
  }
  backward(loss, g4);
  const float h = 1e-3f;
  const double fd = (gelu(Tensor({1}, {h})).item() - gelu(Tensor({1}, {-h})).item()) / (2.0 * h);
  CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(std::abs(x.grad()[0] - fd) < 1e-4);
}

TEST_CASE("non-finite values raise NumericError") {
  CHECK_THROWS_AS(log(Tensor({2}, {1.0f, 0.0f})), NumericError);
  CHECK_THROWS_AS(div(Tensor({1}, {1.0f}), Tensor({1}, {0.0f})), NumericError);
  CHECK_THROWS_AS(pow(Tensor({1}, {-1.0f}), 0.5f), NumericError);
}

TEST_CASE("replayed forward and backward give bitwise-identical grads") {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tensor x = random_tensor({1, 2, 4, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 3, 3, 3}, rng, 0.3f);
    w.set_requires_grad(true);
    Tensor gain = Tensor::full({4}, 1.0f), bias = Tensor::full({4}, 0.0f);
    Graph g;
    Tensor loss;
    {
      GraphScope scope(g);
      loss = sum(layer_norm(gelu(conv3d(x, w, Tensor(), {1, 1, 1}, {1, 1, 1})), gain, bias));
    }
    backward(loss, g);
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("batch norm statistics and dropout modes") {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 3, 4, 4, 4}, rng, 2.0f);
  Tensor rm = Tensor::full({3}, 0.0f), rv = Tensor::full({3}, 1.0f);
  const Tensor g = Tensor::full({3}, 1.0f), b = Tensor::full({3}, 0.0f);
  const Tensor y = batch_norm(x, g, b, rm, rv, true);
  for (Index c = 0; c < 3; ++c) {
    double m = 0.0, sq = 0.0;
    for (Index n = 0; n < 2; ++n)
      for (Index i = 0; i < 64; ++i) {
        const double v = y.data()[(n * 3 + c) * 64 + i];
        m += v;
        sq += v * v;
      }
    CHECK(std::abs(m / 128) < 1e-5);
    CHECK(std::abs(sq / 128 - 1.0) < 1e-3);
    double xm = 0.0;
    for (Index n = 0; n < 2; ++n)
      for (Index i = 0; i < 64; ++i) xm += x.data()[(n * 3 + c) * 64 + i];
    CHECK(rm.data()[c] == doctest::Approx(0.1 * xm / 128).epsilon(1e-4));
  }
  const Tensor before = rm.clone();
  const Tensor e = batch_norm(x, g, b, rm, rv, false);
  CHECK(max_abs_diff(before, rm) == 0.0);
  CHECK(e.data()[0] == doctest::Approx((x.data()[0] - rm.data()[0]) / std::sqrt(rv.data()[0] + 1e-5)).epsilon(1e-5));

  const Tensor ones = Tensor::full({1000}, 1.0f);
  CHECK(max_abs_diff(dropout(ones, 0.3f, false, rng), ones) == 0.0);
  const Tensor d = dropout(ones, 0.3f, true, rng);
  int zeros = 0;
  for (float v : d.values()) {
    CHECK((v == 0.0f || std::abs(v - 1.0f / 0.7f) < 1e-6));
    zeros += v == 0.0f;
  }
  CHECK(zeros > 220);
  CHECK(zeros < 380);
}

TEST_CASE("adamw examples") {
  AdamWConfig no_decay;
  no_decay.weight_decay = 0.0f;
  Tensor p({3}, {1, -2, 3}, true);
  p.zero_grad();
  std::vector<Tensor> params{p};
  OptimizerState s{no_decay, 0, {}, {}};
  adamw_step(params, s, 0.1f);
  CHECK(p.data()[1] == -2.0f);
  CHECK(s.step == 1);

  Tensor q({2}, {1.5f, -4.0f});
  std::vector<Tensor> qs{q};
  OptimizerState sd{AdamWConfig{}, 0, {}, {}};
  adamw_step(qs, sd, 0.01f);
  CHECK(q.data()[0] == doctest::Approx(1.5 * (1 - 0.01 * 0.01)).epsilon(1e-7));

  // Scalar trace of the first step on a constant gradient.
  const double lr = 1e-3, g = 0.37, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double m = (1 - b1) * g, v = (1 - b2) * g * g;
  const double expect = 2.0 - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  Tensor r({1}, {2.0f}, true);
  r.grad_mut()[0] = static_cast<float>(g);
  std::vector<Tensor> rs{r};
  OptimizerState sr{no_decay, 0, {}, {}};
  adamw_step(rs, sr, static_cast<float>(lr));
  CHECK(std::abs(r.data()[0] - expect) < 1e-6);
  CHECK(std::abs(std::abs(r.data()[0] - 2.0) - lr) < 1e-6);
  adamw_step(rs, sr, static_cast<float>(lr));
  CHECK(sr.step == 2);
}

TEST_CASE("checkpoint container roundtrip and format errors") {
  std::mt19937_64 rng(1);
  NamedTensors named{{"a.weight", random_tensor({2, 3}, rng), true}, {"b", random_tensor({4}, rng), false}};
  const Checkpoint ck = make_checkpoint(named, {{"stage", "soma"}, {"epoch", 3}});
  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "TR3D");
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.metadata.at("epoch") == 3);
  REQUIRE(back.find("a.weight") != nullptr);
  CHECK(max_abs_diff(*back.find("a.weight"), named[0].tensor) == 0.0);
  CHECK_THROWS(deserialize_checkpoint("TR3X" + bytes.substr(4)));
  CHECK_THROWS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)));

  NamedTensors target{{"a.weight", Tensor({2, 3}), true}, {"b", Tensor({5}), false}};
  CHECK_THROWS_WITH_AS(load_into(back, target), doctest::Contains("b"), std::exception);
  NamedTensors missing{{"c", Tensor({1}), true}};
  CHECK_THROWS_WITH_AS(load_into(back, missing), doctest::Contains("c"), std::exception);
}
