#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traice3d/volume.hpp"

namespace traice3d {

/// Synthetic microglia-like volume generator settings. Lengths and radii are
/// in in-plane voxels; depth extents are scaled by `depth_scale`.
struct SynthConfig {
  Extent3 dims{16, 64, 64};
  int cells_min = 4, cells_max = 6;
  double min_separation = 12.0;
  int placement_retries = 1000;
  double soma_radius_min = 4.0, soma_radius_max = 5.5;
  double depth_scale = 0.7;
  int branches_min = 4, branches_max = 8;
  double branch_length_min = 16.0, branch_length_max = 32.0;
  double branch_radius_min = 1.5, branch_radius_max = 2.4;
  double branch_min_radius = 0.8;
  double taper = 0.5;
  double branching_probability = 0.08;
  double persistence = 0.85;
  double brightness_min = 0.6, brightness_max = 1.0;
  double branch_gain = 0.65;
  double noise_sigma = 0.05;
  double signal_noise = 0.05;
  double blur_sigma = 0.8;
  double background_level = 0.08;
  double background_gradient = 0.08;
  Spacing voxel_size{};

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
/// Missing fields keep their defaults; errors name the offending field.
SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& path = "data");

struct Cell {
  Mask mask;
  Mask soma;
  Voxel centroid;
  int branches = 0;
};

struct VolumeSample {
  Image image;
  Mask soma_mask;
  std::vector<Mask> cell_masks;
  std::vector<Voxel> soma_centroids;
  Spacing voxel_size{};
  std::uint64_t seed = 0;
};

/// One cell with its soma centred at `center`.
Cell generate_cell(std::mt19937_64& rng, const SynthConfig& cfg, const Voxel& center);
/// One cell at a random interior position.
Cell generate_cell(std::mt19937_64& rng, const SynthConfig& cfg);

/// Places a random number of cells with pairwise soma separation and renders
/// the image. Throws std::runtime_error when placement fails.
VolumeSample generate_volume(std::mt19937_64& rng, const SynthConfig& cfg);
/// Same with exactly `cells` cells.
VolumeSample generate_volume(std::mt19937_64& rng, const SynthConfig& cfg, int cells);
/// Two cells whose mask bounding boxes overlap, by rejection sampling.
VolumeSample generate_overlap_volume(std::mt19937_64& rng, const SynthConfig& cfg, int max_tries = 200);

/// Per-cell brightness, somas at full gain and branches at `branch_gain`,
/// Gaussian blur, background ramp, additive and signal-dependent noise,
/// clipped to [0, 1].
Image render_intensity(const std::vector<Mask>& cells, const Mask& soma_mask, const SynthConfig& cfg,
                       std::mt19937_64& rng);

/// Separable Gaussian blur with per-axis sigma in voxels (0 skips an axis).
Image gaussian_blur(const Image& img, double sigma_d, double sigma_h, double sigma_w);

// Tiling ------------------------------------------------------------------

/// Start offsets along one axis: stride floor(tile (1 - overlap)), last tile
/// clamped to the boundary.
std::vector<Index> tile_starts(Index extent, Index tile, double overlap);
std::vector<Extent3> tile_offsets(Extent3 volume, Extent3 tile, double overlap);

enum class TileMode { training, inference };

struct Tile {
  Extent3 offset;
  VolumeSample sample;
};

inline constexpr double min_foreground_fraction = 0.05;

/// Fraction of voxels covered by any cell mask.
double foreground_fraction(const VolumeSample& s);

template <class T>
Volume<T> crop(const Volume<T>& v, Extent3 offset, Extent3 dims) {
  if (offset.d < 0 || offset.h < 0 || offset.w < 0 || offset.d + dims.d > v.dims.d ||
      offset.h + dims.h > v.dims.h || offset.w + dims.w > v.dims.w)
    throw std::out_of_range("crop window exceeds the volume");
  Volume<T> out(dims);
  for (Index d = 0; d < dims.d; ++d)
    for (Index h = 0; h < dims.h; ++h)
      for (Index w = 0; w < dims.w; ++w) out(d, h, w) = v(offset.d + d, offset.h + h, offset.w + w);
  return out;
}

/// Crops every volume of a sample. Cells are kept when their centroid lies
/// inside the window.
VolumeSample crop_sample(const VolumeSample& s, Extent3 offset, Extent3 dims);

/// Training mode drops tiles whose foreground fraction is below 5%.
std::vector<Tile> tile_volume(const VolumeSample& s, Extent3 tile, double overlap, TileMode mode);

// Intensity normalization and augmentation --------------------------------

/// 256-bin CDF remapping onto [0, 1]. Inputs occupying one bin are returned
/// unchanged.
Image histogram_equalize(const Image& img);

struct AugmentSet {
  bool flip = false, affine = false, noise = false, blur = false, gamma = false;
  static AugmentSet all() { return {true, true, true, true, true}; }
  /// Names from {flip, affine, noise, blur, gamma}.
  static AugmentSet parse(const std::vector<std::string>& names);
  std::vector<std::string> names() const;
  friend bool operator==(const AugmentSet&, const AugmentSet&) = default;
};

struct AugmentParams {
  double flip_probability = 0.5;
  double max_rotation = 3.14159265358979323846;  // radians about the depth axis
  double scale_min = 0.9, scale_max = 1.1;
  double noise_sigma_max = 0.05;
  double blur_sigma_max = 0.8;
  double gamma_min = 0.7, gamma_max = 1.5;
};

/// Image, label masks and landmark points that move together.
struct AugmentSample {
  Image image;
  std::vector<Mask> masks;
  std::vector<Voxel> points;
};

/// Flips along one axis: index i maps to extent - 1 - i. axis 0 = depth.
AugmentSample flip(const AugmentSample& s, int axis);
/// Rotation by `angle` about the depth axis through the volume centre and
/// isotropic in-plane scaling. Bilinear for the image, nearest for masks,
/// zero outside. Points follow the forward map, clamped to the volume.
AugmentSample affine(const AugmentSample& s, double angle, double scale);
/// v -> v^g on an image in [0, 1].
Image apply_gamma(const Image& img, double g);

AugmentSample augment(const AugmentSample& s, std::mt19937_64& rng, const AugmentSet& ops,
                      const AugmentParams& params = {});

// Per-cell crops -----------------------------------------------------------

struct CellCrop {
  Image image;
  Mask target;
  Voxel prompt;
  Extent3 offset;
};

/// Window start that centres `center` in a crop, clamped to the volume.
Extent3 centred_offset(const Voxel& center, Extent3 crop, Extent3 volume);

/// Crop centred on cell `cell` with uniform jitter up to `jitter` of the crop
/// extent per axis. The label is that cell's mask alone.
CellCrop crop_around_cell(const VolumeSample& s, int cell, Extent3 crop_dims, std::mt19937_64& rng,
                          double jitter = 0.1);

// Storage ------------------------------------------------------------------

void write_v3d(const std::filesystem::path& path, const Image& v);
void write_v3d(const std::filesystem::path& path, const Mask& v);
Image read_v3d_image(const std::filesystem::path& path);
Mask read_v3d_mask(const std::filesystem::path& path);

/// One directory: image.v3d, soma.v3d, cell_{k}.v3d, meta.json.
void write_sample(const std::filesystem::path& dir, const VolumeSample& s);
VolumeSample read_sample(const std::filesystem::path& dir);

/// Seed of volume `index` derived from a dataset seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace traice3d
