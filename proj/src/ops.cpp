#include "traice3d/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace traice3d {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_graph()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}

Tensor finish(Tensor out, const char* op, bool track) {
  check_finite(out, op);
  out.set_requires_grad(track);
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Elementwise binary op with suffix broadcasting. `fwd(x, y)` computes the
// value, `dx(x, y, out)` / `dy(x, y, out)` the local partials.
template <class F, class DX, class DY>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F fwd, DX dx, DY dy) {
  Shape out_shape;
  if (is_suffix(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  }
  Tensor out(out_shape);
  const Index n = out.numel(), na = a.numel(), nb = b.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  if (na == n && nb == n) {
    for (Index i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (nb == 1) {
    for (Index i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[0]);
  } else {
    for (Index i = 0; i < n; ++i) po[i] = fwd(pa[i % na], pb[i % nb]);
  }
  const bool track = tracking({&a, &b});
  out = finish(out, name, track);
  if (track) {
    active_graph()->record(out, {a, b}, [a = Tensor(a), b = Tensor(b), out, dx, dy, n, na, nb]() mutable {
      const float* g = out.grad().data();
      const float* xa = a.data();
      const float* xb = b.data();
      const float* o = out.data();
      const bool same = na == n && nb == n;
      if (a.requires_grad()) {
        float* ga = a.grad_mut().data();
        if (same) {
          for (Index i = 0; i < n; ++i) ga[i] += g[i] * dx(xa[i], xb[i], o[i]);
        } else {
          for (Index i = 0; i < n; ++i) ga[i % na] += g[i] * dx(xa[i % na], xb[i % nb], o[i]);
        }
      }
      if (b.requires_grad()) {
        float* gb = b.grad_mut().data();
        if (same) {
          for (Index i = 0; i < n; ++i) gb[i] += g[i] * dy(xa[i], xb[i], o[i]);
        } else {
          for (Index i = 0; i < n; ++i) gb[i % nb] += g[i] * dy(xa[i % na], xb[i % nb], o[i]);
        }
      }
    });
  }
  return out;
}

// Elementwise unary op; `df(x, y)` is dy/dx given input x and output y.
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  Tensor out(x.shape());
  const Index n = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = f(px[i]);
  const bool track = tracking({&x});
  out = finish(out, name, track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out, df, n]() mutable {
      const float* g = out.grad().data();
      const float* px = x.data();
      const float* po = out.data();
      float* gx = x.grad_mut().data();
      for (Index i = 0; i < n; ++i) gx[i] += g[i] * df(px[i], po[i]);
    });
  }
  return out;
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError("axis out of range");
  return axis;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](float x, float y) { return x / y; },
      [](float, float y, float) { return 1.0f / y; },
      [](float x, float y, float) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](float x, float y) { return std::min(x, y); },
      [](float x, float y, float) { return x <= y ? 1.0f : 0.0f; },
      [](float x, float y, float) { return x <= y ? 0.0f : 1.0f; });
}

Tensor scale(const Tensor& a, float factor) {
  return unary(
      a, "scale", [factor](float x) { return x * factor; },
      [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& a, float value) {
  return unary(
      a, "add_scalar", [value](float x) { return x + value; }, [](float, float) { return 1.0f; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      x, "gelu",
      [](float v) {
        const double d = v;
        return static_cast<float>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
      },
      [](float v, float) {
        const double d = v;
        const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        return static_cast<float>(cdf + d * inv_sqrt_2pi * std::exp(-0.5 * d * d));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor pow(const Tensor& x, float exponent) {
  return unary(
      x, "pow", [exponent](float v) { return std::pow(v, exponent); },
      [exponent](float v, float) {
        if (exponent == 0.0f) return 0.0f;
        if (exponent == 1.0f) return 1.0f;
        return exponent * std::pow(v, exponent - 1.0f);
      });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  return unary(
      x, "clamp", [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float v, float) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

namespace {

struct MatmulDims {
  Index batch, m, k, n;
  bool b_shared;  // b is a single [k, n] matrix used for every batch entry
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* name) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError(std::string(name) + ": operands must be at least 2-d");
  MatmulDims d{};
  d.m = a.dim(-2);
  d.k = a.dim(-1);
  const Index bk = b_transposed ? b.dim(-1) : b.dim(-2);
  d.n = b_transposed ? b.dim(-2) : b.dim(-1);
  if (bk != d.k)
    throw ShapeError(std::string(name) + ": inner extents differ, " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  d.batch = a.numel() / (d.m * d.k);
  d.b_shared = b.ndim() == 2;
  if (!d.b_shared) {
    const Shape ab(a.shape().begin(), a.shape().end() - 2);
    const Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (ab != bb)
      throw ShapeError(std::string(name) + ": batch extents differ, " + shape_string(a.shape()) +
                       " vs " + shape_string(b.shape()));
  }
  return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool bt, const char* name) {
  const MatmulDims d = matmul_dims(a, b, bt, name);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  Tensor out(out_shape);
  const Index b_rows = bt ? d.n : d.k, b_cols = bt ? d.k : d.n;
  if (d.b_shared) {
    ConstMatMap A(a.data(), d.batch * d.m, d.k);
    ConstMatMap B(b.data(), b_rows, b_cols);
    MatMap C(out.data(), d.batch * d.m, d.n);
    if (bt)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  } else {
    for (Index i = 0; i < d.batch; ++i) {
      ConstMatMap A(a.data() + i * d.m * d.k, d.m, d.k);
      ConstMatMap B(b.data() + i * d.k * d.n, b_rows, b_cols);
      MatMap C(out.data() + i * d.m * d.n, d.m, d.n);
      if (bt)
        C.noalias() = A * B.transpose();
      else
        C.noalias() = A * B;
    }
  }
  const bool track = tracking({&a, &b});
  out = finish(out, name, track);
  if (track) {
    active_graph()->record(out, {a, b}, [a = Tensor(a), b = Tensor(b), out, d, bt, b_rows, b_cols]() mutable {
      const Index batches = d.b_shared ? 1 : d.batch;
      const Index rows = d.b_shared ? d.batch * d.m : d.m;
      for (Index i = 0; i < batches; ++i) {
        ConstMatMap G(out.grad().data() + i * rows * d.n, rows, d.n);
        ConstMatMap A(a.data() + i * rows * d.k, rows, d.k);
        ConstMatMap B(b.data() + i * d.k * d.n, b_rows, b_cols);
        if (a.requires_grad()) {
          MatMap GA(a.grad_mut().data() + i * rows * d.k, rows, d.k);
          if (bt)
            GA.noalias() += G * B;
          else
            GA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
          MatMap GB(b.grad_mut().data() + i * d.k * d.n, b_rows, b_cols);
          if (bt)
            GB.noalias() += G.transpose() * A;
          else
            GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, "matmul"); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true, "matmul_nt"); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  Tensor out(std::move(shape), std::vector<float>(x.values().begin(), x.values().end()));
  const bool track = tracking({&x});
  out.set_requires_grad(track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace {

// For each output linear index, the corresponding input linear index.
std::vector<Index> permute_map(const Shape& in, const std::vector<int>& order, Shape& out_shape) {
  const int n = static_cast<int>(in.size());
  if (static_cast<int>(order.size()) != n) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::vector<Index> in_stride(static_cast<std::size_t>(n), 1);
  for (int i = n - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
  out_shape.assign(static_cast<std::size_t>(n), 0);
  std::vector<Index> stride(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int src = order[static_cast<std::size_t>(i)];
    if (src < 0 || src >= n || seen[src]) throw ShapeError("permute: invalid axis order");
    seen[src] = true;
    out_shape[i] = in[src];
    stride[i] = in_stride[src];
  }
  const Index total = shape_numel(in);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> counter(static_cast<std::size_t>(n), 0);
  Index src = 0;
  for (Index i = 0; i < total; ++i) {
    map[i] = src;
    for (int ax = n - 1; ax >= 0; --ax) {
      ++counter[ax];
      src += stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  Shape out_shape;
  auto map = std::make_shared<std::vector<Index>>(permute_map(x.shape(), order, out_shape));
  Tensor out(out_shape);
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < map->size(); ++i) po[i] = px[(*map)[i]];
  const bool track = tracking({&x});
  out.set_requires_grad(track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out, map]() mutable {
      const float* g = out.grad().data();
      float* gx = x.grad_mut().data();
      for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += g[i];
    });
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int nd = parts[0].ndim();
  axis = normalize_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw ShapeError("concat: extent mismatch " + shape_string(p.shape()) + " vs " +
                         shape_string(parts[0].shape()));
    out_shape[axis] += p.dim(axis);
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
  Tensor out(out_shape);
  const Index out_block = out_shape[axis] * inner;
  Index offset = 0;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<Index> offsets;
  for (const Tensor& p : parts) {
    const Index block = p.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * block, block, out.data() + o * out_block + offset);
    offsets.push_back(offset);
    offset += block;
  }
  bool track = false;
  if (active_graph())
    for (const Tensor& p : parts) track = track || p.requires_grad();
  out.set_requires_grad(track);
  if (track) {
    active_graph()->record(out, inputs, [inputs, out, offsets, outer, inner, out_block, axis]() mutable {
      const float* g = out.grad().data();
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor& p = inputs[k];
        if (!p.requires_grad()) continue;
        const Index block = p.dim(axis) * inner;
        float* gp = p.grad_mut().data();
        for (Index o = 0; o < outer; ++o)
          for (Index j = 0; j < block; ++j) gp[o * block + j] += g[o * out_block + offsets[k] + j];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  const bool track = tracking({&x});
  out = finish(out, "sum", track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out]() mutable {
      const float g = out.grad()[0];
      for (float& v : x.grad_mut()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.ndim());
  Index outer = 1, inner = 1;
  const Index n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (Index j = 0; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
      double total = 0.0;
      for (Index j = 0; j < n; ++j) {
        const float e = std::exp(px[base + j * inner] - mx);
        po[base + j * inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (Index j = 0; j < n; ++j) po[base + j * inner] *= inv;
    }
  }
  const bool track = tracking({&x});
  out = finish(out, "softmax", track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out, outer, inner, n]() mutable {
      const float* g = out.grad().data();
      const float* y = out.data();
      float* gx = x.grad_mut().data();
      for (Index o = 0; o < outer; ++o) {
        for (Index in = 0; in < inner; ++in) {
          const Index base = o * n * inner + in;
          double dot = 0.0;
          for (Index j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (Index j = 0; j < n; ++j) {
            const Index idx = base + j * inner;
            gx[idx] += y[idx] * static_cast<float>(g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const Index n = x.dim(-1);
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias length must equal the last extent " +
                     std::to_string(n));
  const Index rows = x.numel() / n;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const float* row = px + r * n;
    double mu = 0.0;
    for (Index j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (Index j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<float>(rs);
    for (Index j = 0; j < n; ++j) {
      const float h = static_cast<float>((row[j] - mu) * rs);
      (*xhat)[r * n + j] = h;
      po[r * n + j] = h * pg[j] + pb[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  out = finish(out, "layer_norm", track);
  if (track) {
    active_graph()->record(out, {x, gain, bias}, [x = Tensor(x), gain = Tensor(gain), bias = Tensor(bias), out, xhat, rstd, rows, n]() mutable {
      const float* g = out.grad().data();
      const float* pg = gain.data();
      const float* h = xhat->data();
      if (gain.requires_grad()) {
        float* gg = gain.grad_mut().data();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < n; ++j) gg[j] += g[r * n + j] * h[r * n + j];
      }
      if (bias.requires_grad()) {
        float* gb = bias.grad_mut().data();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
      if (x.requires_grad()) {
        float* gx = x.grad_mut().data();
        for (Index r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (Index j = 0; j < n; ++j) {
            const double dh = static_cast<double>(g[r * n + j]) * pg[j];
            m1 += dh;
            m2 += dh * h[r * n + j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (Index j = 0; j < n; ++j) {
            const double dh = static_cast<double>(g[r * n + j]) * pg[j];
            gx[r * n + j] += static_cast<float>((*rstd)[r] * (dh - m1 - h[r * n + j] * m2));
          }
        }
      }
    });
  }
  return out;
}

namespace {

// Geometry shared by im2col / col2im: a C-channel "image" of extent
// (D, H, W) sampled by a kernel into an output grid (od, oh, ow).
struct ColGeometry {
  Index channels;
  Extent3 image, kernel, stride, padding, grid;
  Index kernel_size() const { return kernel.d * kernel.h * kernel.w; }
  Index rows() const { return channels * kernel_size(); }
  Index plane() const { return grid.h * grid.w; }
};

// Valid output-width range [lo, hi) whose input column lies inside the image.
std::pair<Index, Index> valid_span(Index out_w, Index in_w, Index stride, Index pad, Index offset) {
  Index lo = 0;
  if (pad > offset) lo = (pad - offset + stride - 1) / stride;
  Index hi = 0;
  if (in_w - 1 + pad - offset >= 0) hi = (in_w - 1 + pad - offset) / stride + 1;
  lo = std::min(lo, out_w);
  hi = std::clamp(hi, lo, out_w);
  return {lo, hi};
}

// Fills col[rows, planes * plane] for output depth planes [d0, d1).
void im2col(const float* img, const ColGeometry& g, Index d0, Index d1, float* col) {
  const Index cols = (d1 - d0) * g.plane();
  Index row = 0;
  for (Index c = 0; c < g.channels; ++c) {
    const float* chan = img + c * g.image.d * g.image.h * g.image.w;
    for (Index a = 0; a < g.kernel.d; ++a)
      for (Index b = 0; b < g.kernel.h; ++b)
        for (Index e = 0; e < g.kernel.w; ++e, ++row) {
          float* dst = col + row * cols;
          const auto [lo, hi] = valid_span(g.grid.w, g.image.w, g.stride.w, g.padding.w, e);
          for (Index od = d0; od < d1; ++od) {
            const Index id = od * g.stride.d - g.padding.d + a;
            for (Index oh = 0; oh < g.grid.h; ++oh) {
              const Index ih = oh * g.stride.h - g.padding.h + b;
              float* out = dst + ((od - d0) * g.grid.h + oh) * g.grid.w;
              if (id < 0 || id >= g.image.d || ih < 0 || ih >= g.image.h) {
                std::fill_n(out, g.grid.w, 0.0f);
                continue;
              }
              const float* src = chan + (id * g.image.h + ih) * g.image.w + e - g.padding.w;
              std::fill(out, out + lo, 0.0f);
              if (g.stride.w == 1) {
                std::copy(src + lo, src + hi, out + lo);
              } else {
                for (Index ow = lo; ow < hi; ++ow) out[ow] = src[ow * g.stride.w];
              }
              std::fill(out + hi, out + g.grid.w, 0.0f);
            }
          }
        }
  }
}

void col2im(const float* col, const ColGeometry& g, Index d0, Index d1, float* img) {
  const Index cols = (d1 - d0) * g.plane();
  Index row = 0;
  for (Index c = 0; c < g.channels; ++c) {
    float* chan = img + c * g.image.d * g.image.h * g.image.w;
    for (Index a = 0; a < g.kernel.d; ++a)
      for (Index b = 0; b < g.kernel.h; ++b)
        for (Index e = 0; e < g.kernel.w; ++e, ++row) {
          const float* src = col + row * cols;
          const auto [lo, hi] = valid_span(g.grid.w, g.image.w, g.stride.w, g.padding.w, e);
          for (Index od = d0; od < d1; ++od) {
            const Index id = od * g.stride.d - g.padding.d + a;
            if (id < 0 || id >= g.image.d) continue;
            for (Index oh = 0; oh < g.grid.h; ++oh) {
              const Index ih = oh * g.stride.h - g.padding.h + b;
              if (ih < 0 || ih >= g.image.h) continue;
              const float* in = src + ((od - d0) * g.grid.h + oh) * g.grid.w;
              float* dst = chan + (id * g.image.h + ih) * g.image.w + e - g.padding.w;
              if (g.stride.w == 1) {
                for (Index ow = lo; ow < hi; ++ow) dst[ow] += in[ow];
              } else {
                for (Index ow = lo; ow < hi; ++ow) dst[ow * g.stride.w] += in[ow];
              }
            }
          }
        }
  }
}

// Output depth planes per im2col chunk, bounding the column buffer size.
Index planes_per_chunk(const ColGeometry& g) {
  constexpr Index budget = Index{1} << 24;  // floats
  const Index per_plane = std::max<Index>(1, g.rows() * g.plane());
  return std::clamp<Index>(budget / per_plane, 1, g.grid.d);
}

Tensor as_batched(const Tensor& t) {
  if (t.ndim() == 5) return t;
  if (t.ndim() == 4) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return reshape(t, s);
  }
  throw ShapeError("expected a [N,C,D,H,W] or [C,D,H,W] volume, got " + shape_string(t.shape()));
}

Tensor unbatch_like(const Tensor& out, const Tensor& input) {
  if (input.ndim() == 5) return out;
  return reshape(out, Shape(out.shape().begin() + 1, out.shape().end()));
}

// Zero-padded copy of a [C, D, H, W] image.
std::vector<float> pad_image(const float* img, Index channels, Extent3 image, Extent3 pad) {
  const Extent3 p{image.d + 2 * pad.d, image.h + 2 * pad.h, image.w + 2 * pad.w};
  std::vector<float> out(static_cast<std::size_t>(channels * p.d * p.h * p.w), 0.0f);
  for (Index c = 0; c < channels; ++c)
    for (Index d = 0; d < image.d; ++d)
      for (Index h = 0; h < image.h; ++h) {
        const float* src = img + ((c * image.d + d) * image.h + h) * image.w;
        std::copy(src, src + image.w,
                  out.data() + ((c * p.d + d + pad.d) * p.h + h + pad.h) * p.w + pad.w);
      }
  return out;
}

using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

// Stride-1 convolution by row-wise AXPY over a padded image. Faster than
// im2col + GEMM when the channel counts are small and the volume is large.
bool use_direct(const ColGeometry& g, Index cout) {
  return g.stride == Extent3{1, 1, 1} && g.channels * cout <= 256;
}

void direct_forward(const float* padded, const ColGeometry& g, const float* weight, Index cout,
                    float* out) {
  const Extent3 p{g.image.d + 2 * g.padding.d, g.image.h + 2 * g.padding.h,
                  g.image.w + 2 * g.padding.w};
  const Index kv = g.kernel_size();
  for (Index o = 0; o < cout; ++o)
    for (Index d = 0; d < g.grid.d; ++d)
      for (Index h = 0; h < g.grid.h; ++h) {
        VecMap y(out + ((o * g.grid.d + d) * g.grid.h + h) * g.grid.w, g.grid.w);
        for (Index c = 0; c < g.channels; ++c) {
          const float* wk = weight + (o * g.channels + c) * kv;
          for (Index a = 0; a < g.kernel.d; ++a)
            for (Index b = 0; b < g.kernel.h; ++b) {
              const float* row = padded + ((c * p.d + d + a) * p.h + h + b) * p.w;
              for (Index e = 0; e < g.kernel.w; ++e)
                y += wk[(a * g.kernel.h + b) * g.kernel.w + e] * ConstVecMap(row + e, g.grid.w);
            }
        }
      }
}

// Accumulates weight grads and, when `grad_padded` is non-null, the padded input grad.
void direct_backward(const float* padded, const ColGeometry& g, const float* weight, Index cout,
                     const float* gout, float* grad_weight, float* grad_padded) {
  const Extent3 p{g.image.d + 2 * g.padding.d, g.image.h + 2 * g.padding.h,
                  g.image.w + 2 * g.padding.w};
  const Index kv = g.kernel_size();
  std::vector<double> gw(static_cast<std::size_t>(cout * g.channels * kv), 0.0);
  for (Index o = 0; o < cout; ++o)
    for (Index d = 0; d < g.grid.d; ++d)
      for (Index h = 0; h < g.grid.h; ++h) {
        ConstVecMap gy(gout + ((o * g.grid.d + d) * g.grid.h + h) * g.grid.w, g.grid.w);
        for (Index c = 0; c < g.channels; ++c) {
          const Index base = (o * g.channels + c) * kv;
          for (Index a = 0; a < g.kernel.d; ++a)
            for (Index b = 0; b < g.kernel.h; ++b) {
              const Index off = ((c * p.d + d + a) * p.h + h + b) * p.w;
              for (Index e = 0; e < g.kernel.w; ++e) {
                const Index k = base + (a * g.kernel.h + b) * g.kernel.w + e;
                if (grad_weight) gw[k] += gy.dot(ConstVecMap(padded + off + e, g.grid.w));
                if (grad_padded) VecMap(grad_padded + off + e, g.grid.w) += weight[k] * gy;
              }
            }
        }
      }
  if (grad_weight)
    for (std::size_t k = 0; k < gw.size(); ++k) grad_weight[k] += static_cast<float>(gw[k]);
}

Index out_extent(Index in, Index k, Index s, Index p, const char* axis) {
  if (s < 1) throw ShapeError("conv3d: stride must be >= 1");
  if (k > in + 2 * p)
    throw ShapeError(std::string("conv3d: kernel larger than padded input along ") + axis);
  return (in + 2 * p - k) / s + 1;
}

}  // namespace

Tensor conv3d(const Tensor& input_any, const Tensor& weight, const Tensor& bias, Extent3 stride,
              Extent3 padding) {
  const Tensor input = as_batched(input_any);
  if (weight.ndim() != 5) throw ShapeError("conv3d: weight must be [C_out,C_in,kd,kh,kw]");
  const Index batch = input.dim(0), cin = input.dim(1);
  const Index cout = weight.dim(0);
  if (weight.dim(1) != cin)
    throw ShapeError("conv3d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(cin));
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv3d: bias length mismatch");
  ColGeometry g{cin,
                {input.dim(2), input.dim(3), input.dim(4)},
                {weight.dim(2), weight.dim(3), weight.dim(4)},
                stride,
                padding,
                {}};
  g.grid = {out_extent(g.image.d, g.kernel.d, stride.d, padding.d, "depth"),
            out_extent(g.image.h, g.kernel.h, stride.h, padding.h, "height"),
            out_extent(g.image.w, g.kernel.w, stride.w, padding.w, "width")};
  const Index in_vol = cin * g.image.d * g.image.h * g.image.w;
  const Index out_sp = g.grid.d * g.plane();
  Tensor out(Shape{batch, cout, g.grid.d, g.grid.h, g.grid.w});
  const Index chunk = planes_per_chunk(g);
  const bool direct = use_direct(g, cout);
  std::vector<float> col;
  ConstMatMap W(weight.data(), cout, g.rows());
  for (Index n = 0; n < batch; ++n) {
    if (direct) {
      const std::vector<float> padded = pad_image(input.data() + n * in_vol, cin, g.image, padding);
      direct_forward(padded.data(), g, weight.data(), cout, out.data() + n * cout * out_sp);
    }
    for (Index d0 = 0; d0 < g.grid.d && !direct; d0 += chunk) {
      const Index d1 = std::min(g.grid.d, d0 + chunk);
      const Index cols = (d1 - d0) * g.plane();
      col.resize(static_cast<std::size_t>(g.rows() * cols));
      im2col(input.data() + n * in_vol, g, d0, d1, col.data());
      ConstMatMap C(col.data(), g.rows(), cols);
      Eigen::Map<RowMat, 0, Eigen::OuterStride<>> Y(out.data() + n * cout * out_sp + d0 * g.plane(),
                                                    cout, cols, Eigen::OuterStride<>(out_sp));
      Y.noalias() = W * C;
    }
    if (bias.defined())
      for (Index o = 0; o < cout; ++o) {
        float* y = out.data() + (n * cout + o) * out_sp;
        const float b = bias.data()[o];
        for (Index i = 0; i < out_sp; ++i) y[i] += b;
      }
  }
  const bool track = tracking({&input, &weight, &bias});
  out = finish(out, "conv3d", track);
  if (track) {
    active_graph()->record(out, {input, weight, bias}, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, g, batch, cout, in_vol, out_sp, chunk, direct]() mutable {
      std::vector<float> col, dcol;
      ConstMatMap W(weight.data(), cout, g.rows());
      for (Index n = 0; n < batch; ++n) {
        const float* gout = out.grad().data() + n * cout * out_sp;
        if (direct) {
          const std::vector<float> padded =
              pad_image(input.data() + n * in_vol, g.channels, g.image, g.padding);
          std::vector<float> gpad;
          if (input.requires_grad()) gpad.assign(padded.size(), 0.0f);
          direct_backward(padded.data(), g, weight.data(), cout, gout,
                          weight.requires_grad() ? weight.grad_mut().data() : nullptr,
                          input.requires_grad() ? gpad.data() : nullptr);
          if (input.requires_grad()) {
            const Extent3 p{g.image.d + 2 * g.padding.d, g.image.h + 2 * g.padding.h,
                            g.image.w + 2 * g.padding.w};
            float* gx = input.grad_mut().data() + n * in_vol;
            for (Index c = 0; c < g.channels; ++c)
              for (Index d = 0; d < g.image.d; ++d)
                for (Index h = 0; h < g.image.h; ++h) {
                  const float* src = gpad.data() +
                                     ((c * p.d + d + g.padding.d) * p.h + h + g.padding.h) * p.w +
                                     g.padding.w;
                  float* dst = gx + ((c * g.image.d + d) * g.image.h + h) * g.image.w;
                  for (Index w = 0; w < g.image.w; ++w) dst[w] += src[w];
                }
          }
        }
        for (Index d0 = 0; d0 < g.grid.d && !direct; d0 += chunk) {
          const Index d1 = std::min(g.grid.d, d0 + chunk);
          const Index cols = (d1 - d0) * g.plane();
          Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> G(gout + d0 * g.plane(), cout, cols,
                                                              Eigen::OuterStride<>(out_sp));
          if (weight.requires_grad()) {
            col.resize(static_cast<std::size_t>(g.rows() * cols));
            im2col(input.data() + n * in_vol, g, d0, d1, col.data());
            ConstMatMap C(col.data(), g.rows(), cols);
            MatMap GW(weight.grad_mut().data(), cout, g.rows());
            GW.noalias() += G * C.transpose();
          }
          if (input.requires_grad()) {
            dcol.resize(static_cast<std::size_t>(g.rows() * cols));
            MatMap DC(dcol.data(), g.rows(), cols);
            DC.noalias() = W.transpose() * G;
            col2im(dcol.data(), g, d0, d1, input.grad_mut().data() + n * in_vol);
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          float* gb = bias.grad_mut().data();
          for (Index o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (Index i = 0; i < out_sp; ++i) acc += gout[o * out_sp + i];
            gb[o] += static_cast<float>(acc);
          }
        }
      }
    });
  }
  return unbatch_like(out, input_any);
}

Tensor conv_transpose3d(const Tensor& input_any, const Tensor& weight, const Tensor& bias,
                        Extent3 stride) {
  const Tensor input = as_batched(input_any);
  if (weight.ndim() != 5) throw ShapeError("conv_transpose3d: weight must be [C_in,C_out,kd,kh,kw]");
  if (stride.d < 1 || stride.h < 1 || stride.w < 1)
    throw ShapeError("conv_transpose3d: stride must be >= 1");
  const Index batch = input.dim(0), cin = input.dim(1);
  if (weight.dim(0) != cin)
    throw ShapeError("conv_transpose3d: weight expects " + std::to_string(weight.dim(0)) +
                     " input channels, got " + std::to_string(cin));
  const Index cout = weight.dim(1);
  if (bias.defined() && bias.numel() != cout)
    throw ShapeError("conv_transpose3d: bias length mismatch");
  const Extent3 kernel{weight.dim(2), weight.dim(3), weight.dim(4)};
  const Extent3 grid{input.dim(2), input.dim(3), input.dim(4)};
  const Extent3 image{(grid.d - 1) * stride.d + kernel.d, (grid.h - 1) * stride.h + kernel.h,
                      (grid.w - 1) * stride.w + kernel.w};
  const ColGeometry g{cout, image, kernel, stride, Extent3{0, 0, 0}, grid};
  const Index in_sp = grid.d * g.plane();
  const Index out_vol = cout * image.d * image.h * image.w;
  Tensor out(Shape{batch, cout, image.d, image.h, image.w});
  const Index chunk = planes_per_chunk(g);
  ConstMatMap W(weight.data(), cin, g.rows());
  std::vector<float> col;
  for (Index n = 0; n < batch; ++n) {
    for (Index d0 = 0; d0 < grid.d; d0 += chunk) {
      const Index d1 = std::min(grid.d, d0 + chunk);
      const Index cols = (d1 - d0) * g.plane();
      col.resize(static_cast<std::size_t>(g.rows() * cols));
      Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> X(input.data() + n * cin * in_sp + d0 * g.plane(),
                                                          cin, cols, Eigen::OuterStride<>(in_sp));
      MatMap C(col.data(), g.rows(), cols);
      C.noalias() = W.transpose() * X;
      col2im(col.data(), g, d0, d1, out.data() + n * out_vol);
    }
    if (bias.defined()) {
      const Index sp = image.d * image.h * image.w;
      for (Index o = 0; o < cout; ++o) {
        float* y = out.data() + n * out_vol + o * sp;
        for (Index i = 0; i < sp; ++i) y[i] += bias.data()[o];
      }
    }
  }
  const bool track = tracking({&input, &weight, &bias});
  out = finish(out, "conv_transpose3d", track);
  if (track) {
    active_graph()->record(out, {input, weight, bias}, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, g, batch, cin, cout, in_sp, out_vol, chunk]() mutable {
      std::vector<float> col;
      ConstMatMap W(weight.data(), cin, g.rows());
      for (Index n = 0; n < batch; ++n) {
        const float* gout = out.grad().data() + n * out_vol;
        for (Index d0 = 0; d0 < g.grid.d; d0 += chunk) {
          const Index d1 = std::min(g.grid.d, d0 + chunk);
          const Index cols = (d1 - d0) * g.plane();
          col.resize(static_cast<std::size_t>(g.rows() * cols));
          im2col(gout, g, d0, d1, col.data());
          ConstMatMap C(col.data(), g.rows(), cols);
          if (input.requires_grad()) {
            Eigen::Map<RowMat, 0, Eigen::OuterStride<>> GX(
                input.grad_mut().data() + n * cin * in_sp + d0 * g.plane(), cin, cols,
                Eigen::OuterStride<>(in_sp));
            GX.noalias() += W * C;
          }
          if (weight.requires_grad()) {
            Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> X(
                input.data() + n * cin * in_sp + d0 * g.plane(), cin, cols, Eigen::OuterStride<>(in_sp));
            MatMap GW(weight.grad_mut().data(), cin, g.rows());
            GW.noalias() += X * C.transpose();
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          const Index sp = g.image.d * g.image.h * g.image.w;
          float* gb = bias.grad_mut().data();
          for (Index o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (Index i = 0; i < sp; ++i) acc += gout[o * sp + i];
            gb[o] += static_cast<float>(acc);
          }
        }
      }
    });
  }
  return unbatch_like(out, input_any);
}

Tensor max_pool3d(const Tensor& x, Extent3 kernel, Extent3 padding) {
  if (x.ndim() < 3) throw ShapeError("max_pool3d: expected at least 3 axes");
  if (padding.d >= kernel.d || padding.h >= kernel.h || padding.w >= kernel.w)
    throw ShapeError("max_pool3d: padding must be smaller than the kernel");
  const Index D = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  const Index od = D + 2 * padding.d - kernel.d + 1, oh = H + 2 * padding.h - kernel.h + 1,
              ow = W + 2 * padding.w - kernel.w + 1;
  if (od < 1 || oh < 1 || ow < 1) throw ShapeError("max_pool3d: kernel larger than padded input");
  const Index planes = x.numel() / (D * H * W);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 3] = od;
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor out(out_shape);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.numel()));
  const float* px = x.data();
  float* po = out.data();
  // Separable passes along w, h, then d. Each keeps the first maximum in scan
  // order, which matches a lexicographic scan of the full window.
  std::vector<float> v1(static_cast<std::size_t>(D * H * ow)), v2(static_cast<std::size_t>(D * oh * ow));
  std::vector<Index> i1(v1.size()), i2(v2.size());
  auto window = [](Index o, Index pad, Index k, Index extent) {
    return std::pair<Index, Index>{std::max<Index>(0, o - pad), std::min(extent, o - pad + k)};
  };
  for (Index p = 0; p < planes; ++p) {
    const Index base = p * D * H * W;
    for (Index d = 0; d < D; ++d)
      for (Index h = 0; h < H; ++h) {
        const float* row = px + base + (d * H + h) * W;
        for (Index w = 0; w < ow; ++w) {
          const auto [lo, hi] = window(w, padding.w, kernel.w, W);
          Index best = lo;
          for (Index t = lo + 1; t < hi; ++t)
            if (row[t] > row[best]) best = t;
          const auto k = static_cast<std::size_t>((d * H + h) * ow + w);
          v1[k] = row[best];
          i1[k] = base + (d * H + h) * W + best;
        }
      }
    for (Index d = 0; d < D; ++d)
      for (Index h = 0; h < oh; ++h) {
        const auto [lo, hi] = window(h, padding.h, kernel.h, H);
        for (Index w = 0; w < ow; ++w) {
          auto best = static_cast<std::size_t>((d * H + lo) * ow + w);
          for (Index t = lo + 1; t < hi; ++t) {
            const auto k = static_cast<std::size_t>((d * H + t) * ow + w);
            if (v1[k] > v1[best]) best = k;
          }
          const auto k = static_cast<std::size_t>((d * oh + h) * ow + w);
          v2[k] = v1[best];
          i2[k] = i1[best];
        }
      }
    for (Index d = 0; d < od; ++d) {
      const auto [lo, hi] = window(d, padding.d, kernel.d, D);
      for (Index h = 0; h < oh; ++h)
        for (Index w = 0; w < ow; ++w) {
          auto best = static_cast<std::size_t>((lo * oh + h) * ow + w);
          for (Index t = lo + 1; t < hi; ++t) {
            const auto k = static_cast<std::size_t>((t * oh + h) * ow + w);
            if (v2[k] > v2[best]) best = k;
          }
          const Index o = p * od * oh * ow + (d * oh + h) * ow + w;
          po[o] = v2[best];
          (*arg)[static_cast<std::size_t>(o)] = i2[best];
        }
    }
  }
  const bool track = tracking({&x});
  out = finish(out, "max_pool3d", track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out, arg]() mutable {
      const float* g = out.grad().data();
      float* gx = x.grad_mut().data();
      for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += g[i];
    });
  }
  return out;
}

Tensor min_pool_cross3d(const Tensor& x) {
  if (x.ndim() < 3) throw ShapeError("min_pool_cross3d: expected at least 3 axes");
  const Index D = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  const Index planes = x.numel() / (D * H * W);
  Tensor out(x.shape());
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
  const float* px = x.data();
  float* po = out.data();
  for (Index p = 0; p < planes; ++p)
    for (Index d = 0; d < D; ++d)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          const Index i = ((p * D + d) * H + h) * W + w;
          Index best = i;
          auto visit = [&](bool ok, Index j) {
            if (ok && px[j] < px[best]) best = j;
          };
          // Scan order d-, d+, h-, h+, w-, w+ after the centre.
          visit(d > 0, i - H * W);
          visit(d + 1 < D, i + H * W);
          visit(h > 0, i - W);
          visit(h + 1 < H, i + W);
          visit(w > 0, i - 1);
          visit(w + 1 < W, i + 1);
          po[i] = px[best];
          (*arg)[static_cast<std::size_t>(i)] = best;
        }
  const bool track = tracking({&x});
  out = finish(out, "min_pool_cross3d", track);
  if (track) {
    active_graph()->record(out, {x}, [x = Tensor(x), out, arg]() mutable {
      const float* g = out.grad().data();
      float* gx = x.grad_mut().data();
      for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += g[i];
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum, float eps) {
  if (x.ndim() < 2) throw ShapeError("batch_norm: expected [N, C, ...]");
  const Index N = x.dim(0), C = x.dim(1);
  const Index S = x.numel() / (N * C);
  if (gain.numel() != C || bias.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm: parameter length must equal channel count");
  const Index M = N * S;
  std::vector<float> mu(static_cast<std::size_t>(C)), rs(static_cast<std::size_t>(C));
  const float* px = x.data();
  for (Index c = 0; c < C; ++c) {
    if (training) {
      double m = 0.0;
      for (Index n = 0; n < N; ++n)
        for (Index s = 0; s < S; ++s) m += px[(n * C + c) * S + s];
      m /= static_cast<double>(M);
      double v = 0.0;
      for (Index n = 0; n < N; ++n)
        for (Index s = 0; s < S; ++s) {
          const double dv = px[(n * C + c) * S + s] - m;
          v += dv * dv;
        }
      const double unbiased = M > 1 ? v / static_cast<double>(M - 1) : 0.0;
      v /= static_cast<double>(M);
      mu[c] = static_cast<float>(m);
      rs[c] = static_cast<float>(1.0 / std::sqrt(v + eps));
      float& rm = running_mean.data()[c];
      float& rv = running_var.data()[c];
      rm = (1.0f - momentum) * rm + momentum * static_cast<float>(m);
      rv = (1.0f - momentum) * rv + momentum * static_cast<float>(unbiased);
    } else {
      mu[c] = running_mean.data()[c];
      rs[c] = 1.0f / std::sqrt(running_var.data()[c] + eps);
    }
  }
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(x.numel()));
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index s = 0; s < S; ++s) {
        const Index i = (n * C + c) * S + s;
        const float h = (px[i] - mu[c]) * rs[c];
        (*xhat)[i] = h;
        out.data()[i] = h * gain.data()[c] + bias.data()[c];
      }
  const bool track = tracking({&x, &gain, &bias});
  out = finish(out, "batch_norm", track);
  if (track) {
    active_graph()->record(out, {x, gain, bias}, [x = Tensor(x), gain = Tensor(gain), bias = Tensor(bias), out, xhat, rs, N, C, S, M, training]() mutable {
      const float* g = out.grad().data();
      const float* h = xhat->data();
      for (Index c = 0; c < C; ++c) {
        double sg = 0.0, sgh = 0.0;
        for (Index n = 0; n < N; ++n)
          for (Index s = 0; s < S; ++s) {
            const Index i = (n * C + c) * S + s;
            sg += g[i];
            sgh += static_cast<double>(g[i]) * h[i];
          }
        if (gain.requires_grad()) gain.grad_mut()[c] += static_cast<float>(sgh);
        if (bias.requires_grad()) bias.grad_mut()[c] += static_cast<float>(sg);
        if (!x.requires_grad()) continue;
        float* gx = x.grad_mut().data();
        const double k = static_cast<double>(gain.data()[c]) * rs[c];
        for (Index n = 0; n < N; ++n)
          for (Index s = 0; s < S; ++s) {
            const Index i = (n * C + c) * S + s;
            if (training)
              gx[i] += static_cast<float>(k * (g[i] - sg / M - h[i] * sgh / M));
            else
              gx[i] += static_cast<float>(k * g[i]);
          }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, float rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0.0f) return x;
  if (rate >= 1.0f) throw std::invalid_argument("dropout rate must be in [0, 1)");
  Tensor mask(x.shape());
  std::bernoulli_distribution keep(1.0 - rate);
  const float s = 1.0f / (1.0f - rate);
  for (float& m : mask.values()) m = keep(rng) ? s : 0.0f;
  return mul(x, mask);
}

}  // namespace traice3d
