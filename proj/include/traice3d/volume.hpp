#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "traice3d/ops.hpp"

namespace traice3d {

/// Integer voxel coordinate in (depth, height, width) order.
struct Voxel {
  Index d = 0, h = 0, w = 0;
  friend bool operator==(const Voxel&, const Voxel&) = default;
  friend auto operator<=>(const Voxel&, const Voxel&) = default;
};

/// Physical voxel size in micrometres, (x, y, z) = (width, height, depth).
struct Spacing {
  double x = 0.4, y = 0.4, z = 1.1;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Dense single-channel volume, row-major over (d, h, w).
template <class T>
struct Volume {
  Extent3 dims;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(Extent3 extent, T fill = T{})
      : dims(extent), data(static_cast<std::size_t>(extent.d * extent.h * extent.w), fill) {
    if (extent.d <= 0 || extent.h <= 0 || extent.w <= 0)
      throw std::invalid_argument("volume extents must be positive");
  }

  Index size() const { return static_cast<Index>(data.size()); }
  Index index(Index d, Index h, Index w) const { return (d * dims.h + h) * dims.w + w; }
  bool contains(Index d, Index h, Index w) const {
    return d >= 0 && h >= 0 && w >= 0 && d < dims.d && h < dims.h && w < dims.w;
  }
  bool contains(const Voxel& v) const { return contains(v.d, v.h, v.w); }
  T& operator()(Index d, Index h, Index w) { return data[static_cast<std::size_t>(index(d, h, w))]; }
  const T& operator()(Index d, Index h, Index w) const {
    return data[static_cast<std::size_t>(index(d, h, w))];
  }
  T& operator[](const Voxel& v) { return (*this)(v.d, v.h, v.w); }
  const T& operator[](const Voxel& v) const { return (*this)(v.d, v.h, v.w); }
  Voxel voxel(Index flat) const {
    return {flat / (dims.h * dims.w), (flat / dims.w) % dims.h, flat % dims.w};
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using Image = Volume<float>;
using Mask = Volume<std::uint8_t>;

/// Copies a volume into a [1, 1, D, H, W] tensor.
template <class T>
Tensor to_tensor(const Volume<T>& v) {
  std::vector<float> values(v.data.begin(), v.data.end());
  return Tensor({1, 1, v.dims.d, v.dims.h, v.dims.w}, std::move(values));
}

/// Reads the last three axes of a tensor holding exactly one volume.
inline Image image_from_tensor(const Tensor& t) {
  if (t.ndim() < 3) throw ShapeError("expected a volumetric tensor, got " + shape_string(t.shape()));
  Image out({t.dim(-3), t.dim(-2), t.dim(-1)});
  if (t.numel() != out.size())
    throw ShapeError("tensor " + shape_string(t.shape()) + " holds more than one volume");
  std::copy(t.data(), t.data() + t.numel(), out.data.begin());
  return out;
}

/// Voxels with value > threshold.
template <class T>
Mask binarize(const Volume<T>& v, double threshold = 0.5) {
  Mask out(v.dims);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    out.data[i] = static_cast<double>(v.data[i]) > threshold ? 1 : 0;
  return out;
}

template <class T>
std::vector<Voxel> foreground(const Volume<T>& v) {
  std::vector<Voxel> out;
  for (Index i = 0; i < v.size(); ++i)
    if (v.data[static_cast<std::size_t>(i)] != T{}) out.push_back(v.voxel(i));
  return out;
}

template <class T>
Index count_foreground(const Volume<T>& v) {
  Index n = 0;
  for (const T& x : v.data) n += x != T{} ? 1 : 0;
  return n;
}

}  // namespace traice3d
