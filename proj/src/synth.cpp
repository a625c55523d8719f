#include "traice3d/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "traice3d/json_fields.hpp"

namespace traice3d {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("synth config: " + what);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Index round_index(double v) { return static_cast<Index>(std::lround(v)); }

}  // namespace

void SynthConfig::validate() const {
  require(dims.d > 0 && dims.h > 0 && dims.w > 0, "dims must be positive");
  require(cells_min >= 0 && cells_min <= cells_max, "cells range is empty");
  require(min_separation >= 0.0, "min_separation must be >= 0");
  require(placement_retries >= 1, "placement_retries must be >= 1");
  require(soma_radius_min > 0.0 && soma_radius_min <= soma_radius_max, "soma radius range is empty");
  require(2.0 * soma_radius_max < static_cast<double>(std::min(dims.h, dims.w)),
          "soma radius exceeds the volume");
  require(2.0 * soma_radius_max * depth_scale < static_cast<double>(dims.d),
          "soma depth extent exceeds the volume");
  require(depth_scale > 0.0, "depth_scale must be positive");
  require(branches_min >= 0 && branches_min <= branches_max, "branch count range is empty");
  require(branch_length_min > 0.0 && branch_length_min <= branch_length_max,
          "branch length range is empty");
  require(branch_radius_min > 0.0 && branch_radius_min <= branch_radius_max,
          "branch radius range is empty");
  require(branch_min_radius > 0.0, "branch_min_radius must be positive");
  require(taper >= 0.0 && taper < 1.0, "taper must lie in [0, 1)");
  require(branching_probability >= 0.0 && branching_probability <= 1.0,
          "branching_probability must lie in [0, 1]");
  require(persistence >= 0.0 && persistence <= 1.0, "persistence must lie in [0, 1]");
  require(brightness_min >= 0.0 && brightness_min <= brightness_max && brightness_max <= 1.0,
          "brightness range must lie in [0, 1]");
  require(branch_gain >= 0.0 && branch_gain <= 1.0, "branch_gain must lie in [0, 1]");
  require(noise_sigma >= 0.0 && signal_noise >= 0.0 && blur_sigma >= 0.0, "noise and blur must be >= 0");
  require(background_level >= 0.0 && background_gradient >= 0.0, "background terms must be >= 0");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"dims", json_fields::whd_json(c.dims)},
          {"cells_min", c.cells_min},
          {"cells_max", c.cells_max},
          {"min_separation", c.min_separation},
          {"placement_retries", c.placement_retries},
          {"soma_radius_min", c.soma_radius_min},
          {"soma_radius_max", c.soma_radius_max},
          {"depth_scale", c.depth_scale},
          {"branches_min", c.branches_min},
          {"branches_max", c.branches_max},
          {"branch_length_min", c.branch_length_min},
          {"branch_length_max", c.branch_length_max},
          {"branch_radius_min", c.branch_radius_min},
          {"branch_radius_max", c.branch_radius_max},
          {"branch_min_radius", c.branch_min_radius},
          {"taper", c.taper},
          {"branching_probability", c.branching_probability},
          {"persistence", c.persistence},
          {"brightness_min", c.brightness_min},
          {"brightness_max", c.brightness_max},
          {"branch_gain", c.branch_gain},
          {"noise_sigma", c.noise_sigma},
          {"signal_noise", c.signal_noise},
          {"blur_sigma", c.blur_sigma},
          {"background_level", c.background_level},
          {"background_gradient", c.background_gradient},
          {"voxel_size", {c.voxel_size.x, c.voxel_size.y, c.voxel_size.z}}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& path) {
  using json_fields::field;
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(
      j,
      {"dims", "cells_min", "cells_max", "min_separation", "placement_retries", "soma_radius_min",
       "soma_radius_max", "depth_scale", "branches_min", "branches_max", "branch_length_min",
       "branch_length_max", "branch_radius_min", "branch_radius_max", "branch_min_radius", "taper",
       "branching_probability", "persistence", "brightness_min", "brightness_max", "branch_gain",
       "noise_sigma", "signal_noise", "blur_sigma", "background_level", "background_gradient",
       "voxel_size"},
      path);
  SynthConfig c;
  if (j.contains("dims")) c.dims = json_fields::whd(j.at("dims"), path + ".dims");
  c.cells_min = field(j, "cells_min", c.cells_min, path);
  c.cells_max = field(j, "cells_max", c.cells_max, path);
  c.min_separation = field(j, "min_separation", c.min_separation, path);
  c.placement_retries = field(j, "placement_retries", c.placement_retries, path);
  c.soma_radius_min = field(j, "soma_radius_min", c.soma_radius_min, path);
  c.soma_radius_max = field(j, "soma_radius_max", c.soma_radius_max, path);
  c.depth_scale = field(j, "depth_scale", c.depth_scale, path);
  c.branches_min = field(j, "branches_min", c.branches_min, path);
  c.branches_max = field(j, "branches_max", c.branches_max, path);
  c.branch_length_min = field(j, "branch_length_min", c.branch_length_min, path);
  c.branch_length_max = field(j, "branch_length_max", c.branch_length_max, path);
  c.branch_radius_min = field(j, "branch_radius_min", c.branch_radius_min, path);
  c.branch_radius_max = field(j, "branch_radius_max", c.branch_radius_max, path);
  c.branch_min_radius = field(j, "branch_min_radius", c.branch_min_radius, path);
  c.taper = field(j, "taper", c.taper, path);
  c.branching_probability = field(j, "branching_probability", c.branching_probability, path);
  c.persistence = field(j, "persistence", c.persistence, path);
  c.brightness_min = field(j, "brightness_min", c.brightness_min, path);
  c.brightness_max = field(j, "brightness_max", c.brightness_max, path);
  c.branch_gain = field(j, "branch_gain", c.branch_gain, path);
  c.noise_sigma = field(j, "noise_sigma", c.noise_sigma, path);
  c.signal_noise = field(j, "signal_noise", c.signal_noise, path);
  c.blur_sigma = field(j, "blur_sigma", c.blur_sigma, path);
  c.background_level = field(j, "background_level", c.background_level, path);
  c.background_gradient = field(j, "background_gradient", c.background_gradient, path);
  if (j.contains("voxel_size")) {
    const auto& v = j.at("voxel_size");
    if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number())
      throw std::invalid_argument(path + ".voxel_size: expected [x, y, z] in micrometres");
    c.voxel_size = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return c;
}

// Cells ---------------------------------------------------------------------

namespace {

struct Vec3 {
  double d = 0, h = 0, w = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.d + b.d, a.h + b.h, a.w + b.w}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.d, s * a.h, s * a.w}; }

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(v.d * v.d + v.h * v.h + v.w * v.w);
  if (n < 1e-12) return {0, 0, 1};
  return (1.0 / n) * v;
}

// Mostly in-plane unit direction; the depth component is kept small.
Vec3 random_direction(std::mt19937_64& rng) {
  const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double phi = std::normal_distribution<double>(0.0, 0.35)(rng);
  return {std::sin(phi), std::cos(phi) * std::sin(theta), std::cos(phi) * std::cos(theta)};
}

Voxel round_voxel(Vec3 p) { return {round_index(p.d), round_index(p.h), round_index(p.w)}; }

// Ellipsoidal ball with in-plane radius r and depth radius r * depth_scale.
// The voxel nearest the centre is always set so consecutive stamps stay
// 26-connected.
void stamp(Mask& m, Vec3 c, double r, double depth_scale) {
  const Voxel centre = round_voxel(c);
  if (m.contains(centre)) m[centre] = 1;
  const double rd = r * depth_scale;
  for (Index d = static_cast<Index>(std::floor(c.d - rd)); d <= static_cast<Index>(std::ceil(c.d + rd)); ++d)
    for (Index h = static_cast<Index>(std::floor(c.h - r)); h <= static_cast<Index>(std::ceil(c.h + r)); ++h)
      for (Index w = static_cast<Index>(std::floor(c.w - r)); w <= static_cast<Index>(std::ceil(c.w + r)); ++w) {
        if (!m.contains(d, h, w)) continue;
        const double dd = (static_cast<double>(d) - c.d) / rd;
        const double dh = (static_cast<double>(h) - c.h) / r;
        const double dw = (static_cast<double>(w) - c.w) / r;
        if (dd * dd + dh * dh + dw * dw <= 1.0) m(d, h, w) = 1;
      }
}

struct Segment {
  Vec3 pos, dir;
  double length, radius;
  bool primary;
};

constexpr int max_segments = 48;

}  // namespace

Cell generate_cell(std::mt19937_64& rng, const SynthConfig& cfg, const Voxel& center) {
  cfg.validate();
  Cell cell{Mask(cfg.dims), Mask(cfg.dims), center, 0};
  const double rx = uniform(rng, cfg.soma_radius_min, cfg.soma_radius_max);
  const double ry = uniform(rng, cfg.soma_radius_min, cfg.soma_radius_max);
  const double rz = 0.5 * (rx + ry) * cfg.depth_scale;
  const Vec3 c{static_cast<double>(center.d), static_cast<double>(center.h), static_cast<double>(center.w)};
  for (Index d = 0; d < cfg.dims.d; ++d)
    for (Index h = 0; h < cfg.dims.h; ++h)
      for (Index w = 0; w < cfg.dims.w; ++w) {
        const double a = (static_cast<double>(d) - c.d) / rz;
        const double b = (static_cast<double>(h) - c.h) / ry;
        const double e = (static_cast<double>(w) - c.w) / rx;
        if (a * a + b * b + e * e <= 1.0) cell.soma(d, h, w) = 1;
      }
  cell.mask = cell.soma;

  cell.branches = uniform_int(rng, cfg.branches_min, cfg.branches_max);
  std::vector<Segment> pending;
  for (int b = 0; b < cell.branches; ++b)
    pending.push_back({c, random_direction(rng), uniform(rng, cfg.branch_length_min, cfg.branch_length_max),
                       uniform(rng, cfg.branch_radius_min, cfg.branch_radius_max), true});
  const double soma_reach = std::max(rx, ry);
  int segments = cell.branches;
  while (!pending.empty()) {
    const Segment s = pending.back();
    pending.pop_back();
    const bool primary = s.primary;
    // Primary branches start at the soma centre; only the part beyond the
    // soma surface counts toward the length.
    const double steps = s.length + (primary ? soma_reach : 0.0);
    Vec3 pos = s.pos, dir = s.dir;
    for (int t = 0; t < static_cast<int>(steps); ++t) {
      const double along = primary ? std::max(0.0, t - soma_reach) : static_cast<double>(t);
      const double r = std::max(cfg.branch_min_radius, s.radius * (1.0 - cfg.taper * along / s.length));
      if (!cell.mask.contains(round_voxel(pos))) break;
      stamp(cell.mask, pos, r, cfg.depth_scale);
      const Vec3 turn = random_direction(rng);
      dir = normalized(cfg.persistence * dir + (1.0 - cfg.persistence) * turn);
      pos = pos + Vec3{dir.d * cfg.depth_scale, dir.h, dir.w};
      const bool outside = along > 2.0;
      if (outside && segments < max_segments && uniform(rng, 0.0, 1.0) < cfg.branching_probability) {
        const double angle = uniform(rng, 0.5, 1.0) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
        const Vec3 child{dir.d, dir.h * std::cos(angle) - dir.w * std::sin(angle),
                         dir.h * std::sin(angle) + dir.w * std::cos(angle)};
        pending.push_back({pos, normalized(child), (s.length - along) * uniform(rng, 0.5, 0.8), r * 0.8, false});
        ++segments;
      }
    }
  }
  // Rounded mean of the soma voxels, or the centre if that falls outside.
  double sd = 0, sh = 0, sw = 0;
  const std::vector<Voxel> vox = foreground(cell.soma);
  for (const Voxel& v : vox) {
    sd += static_cast<double>(v.d);
    sh += static_cast<double>(v.h);
    sw += static_cast<double>(v.w);
  }
  const double n = static_cast<double>(vox.size());
  const Voxel mean{round_index(sd / n), round_index(sh / n), round_index(sw / n)};
  cell.centroid = cell.soma[mean] ? mean : center;
  return cell;
}

namespace {

struct Margins {
  Index d, h, w;
};

Margins soma_margins(const SynthConfig& cfg) {
  const auto r = static_cast<Index>(std::ceil(cfg.soma_radius_max));
  const auto rd = static_cast<Index>(std::ceil(cfg.soma_radius_max * cfg.depth_scale));
  return {std::min(rd, (cfg.dims.d - 1) / 2), std::min(r, (cfg.dims.h - 1) / 2), std::min(r, (cfg.dims.w - 1) / 2)};
}

Voxel random_center(std::mt19937_64& rng, const SynthConfig& cfg) {
  const Margins m = soma_margins(cfg);
  auto pick = [&](Index extent, Index margin) {
    return std::uniform_int_distribution<Index>(margin, extent - 1 - margin)(rng);
  };
  const Index d = pick(cfg.dims.d, m.d);
  const Index h = pick(cfg.dims.h, m.h);
  const Index w = pick(cfg.dims.w, m.w);
  return {d, h, w};
}

double voxel_distance(const Voxel& a, const Voxel& b) {
  const double dd = static_cast<double>(a.d - b.d), dh = static_cast<double>(a.h - b.h),
               dw = static_cast<double>(a.w - b.w);
  return std::sqrt(dd * dd + dh * dh + dw * dw);
}

}  // namespace

Cell generate_cell(std::mt19937_64& rng, const SynthConfig& cfg) {
  cfg.validate();
  const Voxel c = random_center(rng, cfg);
  return generate_cell(rng, cfg, c);
}

VolumeSample generate_volume(std::mt19937_64& rng, const SynthConfig& cfg) {
  cfg.validate();
  return generate_volume(rng, cfg, uniform_int(rng, cfg.cells_min, cfg.cells_max));
}

VolumeSample generate_volume(std::mt19937_64& rng, const SynthConfig& cfg, int cells) {
  cfg.validate();
  if (cells < 0) throw std::invalid_argument("cell count must be >= 0");
  std::vector<Voxel> centers;
  for (int k = 0; k < cells; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      const Voxel c = random_center(rng, cfg);
      placed = std::all_of(centers.begin(), centers.end(),
                           [&](const Voxel& o) { return voxel_distance(c, o) >= cfg.min_separation; });
      if (placed) centers.push_back(c);
    }
    if (!placed)
      throw std::runtime_error("could not place " + std::to_string(cells) + " somas with separation " +
                               std::to_string(cfg.min_separation) + " after " +
                               std::to_string(cfg.placement_retries) + " retries");
  }
  VolumeSample s;
  s.voxel_size = cfg.voxel_size;
  s.soma_mask = Mask(cfg.dims);
  for (const Voxel& c : centers) {
    Cell cell = generate_cell(rng, cfg, c);
    for (std::size_t i = 0; i < cell.soma.data.size(); ++i) s.soma_mask.data[i] |= cell.soma.data[i];
    s.soma_centroids.push_back(cell.centroid);
    s.cell_masks.push_back(std::move(cell.mask));
  }
  s.image = render_intensity(s.cell_masks, s.soma_mask, cfg, rng);
  return s;
}

namespace {

struct Box {
  Voxel lo, hi;
};

Box bounding_box(const Mask& m) {
  Box b{{m.dims.d, m.dims.h, m.dims.w}, {-1, -1, -1}};
  for (const Voxel& v : foreground(m)) {
    b.lo = {std::min(b.lo.d, v.d), std::min(b.lo.h, v.h), std::min(b.lo.w, v.w)};
    b.hi = {std::max(b.hi.d, v.d), std::max(b.hi.h, v.h), std::max(b.hi.w, v.w)};
  }
  return b;
}

bool boxes_overlap(const Box& a, const Box& b) {
  return a.lo.d <= b.hi.d && b.lo.d <= a.hi.d && a.lo.h <= b.hi.h && b.lo.h <= a.hi.h &&
         a.lo.w <= b.hi.w && b.lo.w <= a.hi.w;
}

}  // namespace

VolumeSample generate_overlap_volume(std::mt19937_64& rng, const SynthConfig& cfg, int max_tries) {
  for (int t = 0; t < max_tries; ++t) {
    VolumeSample s = generate_volume(rng, cfg, 2);
    if (boxes_overlap(bounding_box(s.cell_masks[0]), bounding_box(s.cell_masks[1]))) return s;
  }
  throw std::runtime_error("no overlapping two-cell volume after " + std::to_string(max_tries) + " tries");
}

// Rendering ---------------------------------------------------------------

Image gaussian_blur(const Image& img, double sigma_d, double sigma_h, double sigma_w) {
  Image out = img;
  const Extent3 e = img.dims;
  auto pass = [&](double sigma, Index extent, Index stride, Index lines, auto line_start) {
    if (sigma <= 0.0 || extent == 1) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
      k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    std::vector<float> buf(static_cast<std::size_t>(extent));
    for (Index l = 0; l < lines; ++l) {
      float* base = out.data.data() + line_start(l);
      for (Index i = 0; i < extent; ++i) buf[static_cast<std::size_t>(i)] = base[i * stride];
      for (Index i = 0; i < extent; ++i) {
        double acc = 0.0, norm = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const Index j = i + t;
          if (j < 0 || j >= extent) continue;
          const double w = k[static_cast<std::size_t>(t + radius)];
          acc += w * buf[static_cast<std::size_t>(j)];
          norm += w;
        }
        base[i * stride] = static_cast<float>(acc / norm);
      }
    }
  };
  pass(sigma_w, e.w, 1, e.d * e.h, [&](Index l) { return l * e.w; });
  pass(sigma_h, e.h, e.w, e.d * e.w, [&](Index l) { return (l / e.w) * e.h * e.w + l % e.w; });
  pass(sigma_d, e.d, e.h * e.w, e.h * e.w, [&](Index l) { return l; });
  return out;
}

Image render_intensity(const std::vector<Mask>& cells, const Mask& soma_mask, const SynthConfig& cfg,
                       std::mt19937_64& rng) {
  cfg.validate();
  Image signal(cfg.dims, 0.0f);
  for (const Mask& cell : cells) {
    if (cell.dims != cfg.dims) throw std::invalid_argument("cell mask dims differ from the volume");
    const double brightness = uniform(rng, cfg.brightness_min, cfg.brightness_max);
    for (std::size_t i = 0; i < cell.data.size(); ++i) {
      if (!cell.data[i]) continue;
      const double gain = soma_mask.data[i] ? 1.0 : cfg.branch_gain;
      signal.data[i] = std::max(signal.data[i], static_cast<float>(brightness * gain));
    }
  }
  if (cfg.blur_sigma > 0.0)
    signal = gaussian_blur(signal, cfg.blur_sigma * cfg.depth_scale, cfg.blur_sigma, cfg.blur_sigma);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Image out(cfg.dims);
  const Extent3 e = cfg.dims;
  for (Index d = 0; d < e.d; ++d)
    for (Index h = 0; h < e.h; ++h)
      for (Index w = 0; w < e.w; ++w) {
        const double s = signal(d, h, w);
        const double ramp = 0.5 * (static_cast<double>(h) / std::max<Index>(1, e.h - 1) +
                                   static_cast<double>(w) / std::max<Index>(1, e.w - 1));
        double v = s + cfg.background_level + cfg.background_gradient * ramp;
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * gauss(rng);
        if (cfg.signal_noise > 0.0) v += cfg.signal_noise * std::sqrt(std::max(0.0, s)) * gauss(rng);
        out(d, h, w) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

// Tiling --------------------------------------------------------------------

std::vector<Index> tile_starts(Index extent, Index tile, double overlap) {
  if (tile <= 0 || tile > extent) throw std::invalid_argument("tile extent must lie in [1, volume extent]");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("overlap must lie in [0, 1)");
  const Index stride = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(tile) * (1.0 - overlap))));
  std::vector<Index> starts;
  for (Index s = 0;; s += stride) {
    if (s + tile >= extent) {
      starts.push_back(extent - tile);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

std::vector<Extent3> tile_offsets(Extent3 volume, Extent3 tile, double overlap) {
  std::vector<Extent3> out;
  for (Index d : tile_starts(volume.d, tile.d, overlap))
    for (Index h : tile_starts(volume.h, tile.h, overlap))
      for (Index w : tile_starts(volume.w, tile.w, overlap)) out.push_back({d, h, w});
  return out;
}

double foreground_fraction(const VolumeSample& s) {
  const Index n = s.image.size() > 0 ? s.image.size() : s.soma_mask.size();
  if (n == 0) return 0.0;
  Index fg = 0;
  for (Index i = 0; i < n; ++i) {
    bool any = false;
    for (const Mask& m : s.cell_masks) any = any || m.data[static_cast<std::size_t>(i)];
    fg += any ? 1 : 0;
  }
  return static_cast<double>(fg) / static_cast<double>(n);
}

VolumeSample crop_sample(const VolumeSample& s, Extent3 offset, Extent3 dims) {
  VolumeSample out;
  out.image = crop(s.image, offset, dims);
  out.soma_mask = crop(s.soma_mask, offset, dims);
  out.voxel_size = s.voxel_size;
  out.seed = s.seed;
  for (std::size_t k = 0; k < s.cell_masks.size(); ++k) {
    const Voxel c = s.soma_centroids[k];
    const Voxel local{c.d - offset.d, c.h - offset.h, c.w - offset.w};
    if (!out.soma_mask.contains(local)) continue;
    out.cell_masks.push_back(crop(s.cell_masks[k], offset, dims));
    out.soma_centroids.push_back(local);
  }
  return out;
}

std::vector<Tile> tile_volume(const VolumeSample& s, Extent3 tile, double overlap, TileMode mode) {
  std::vector<Tile> out;
  for (const Extent3& off : tile_offsets(s.image.dims, tile, overlap)) {
    VolumeSample t = crop_sample(s, off, tile);
    // The filter counts every cell's voxels, not only cells kept by centroid.
    if (mode == TileMode::training) {
      Index fg = 0;
      for (Index d = 0; d < tile.d; ++d)
        for (Index h = 0; h < tile.h; ++h)
          for (Index w = 0; w < tile.w; ++w) {
            bool any = false;
            for (const Mask& m : s.cell_masks) any = any || m(off.d + d, off.h + h, off.w + w);
            fg += any ? 1 : 0;
          }
      if (static_cast<double>(fg) < min_foreground_fraction * static_cast<double>(tile.d * tile.h * tile.w))
        continue;
    }
    out.push_back({off, std::move(t)});
  }
  return out;
}

// Normalization and augmentation ------------------------------------------

Image histogram_equalize(const Image& img) {
  constexpr int bins = 256;
  std::array<Index, bins> hist{};
  auto bin_of = [](float v) { return std::clamp(static_cast<int>(v * bins), 0, bins - 1); };
  for (float v : img.data) ++hist[static_cast<std::size_t>(bin_of(v))];
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](Index c) { return c > 0; });
  if (occupied <= 1) return img;
  std::array<Index, bins> cdf{};
  Index running = 0, cdf_min = -1;
  for (int b = 0; b < bins; ++b) {
    running += hist[static_cast<std::size_t>(b)];
    cdf[static_cast<std::size_t>(b)] = running;
    if (cdf_min < 0 && hist[static_cast<std::size_t>(b)] > 0) cdf_min = running;
  }
  const double denom = static_cast<double>(running - cdf_min);
  Image out = img;
  for (float& v : out.data)
    v = static_cast<float>(static_cast<double>(cdf[static_cast<std::size_t>(bin_of(v))] - cdf_min) / denom);
  return out;
}

AugmentSet AugmentSet::parse(const std::vector<std::string>& names) {
  AugmentSet s;
  for (const std::string& n : names) {
    if (n == "flip") s.flip = true;
    else if (n == "affine") s.affine = true;
    else if (n == "noise") s.noise = true;
    else if (n == "blur") s.blur = true;
    else if (n == "gamma") s.gamma = true;
    else throw std::invalid_argument("unknown augmentation '" + n + "' (expected flip|affine|noise|blur|gamma)");
  }
  return s;
}

std::vector<std::string> AugmentSet::names() const {
  std::vector<std::string> out;
  if (flip) out.push_back("flip");
  if (affine) out.push_back("affine");
  if (noise) out.push_back("noise");
  if (blur) out.push_back("blur");
  if (gamma) out.push_back("gamma");
  return out;
}

namespace {

template <class T>
Volume<T> flip_volume(const Volume<T>& v, int axis) {
  Volume<T> out(v.dims);
  const Extent3 e = v.dims;
  for (Index d = 0; d < e.d; ++d)
    for (Index h = 0; h < e.h; ++h)
      for (Index w = 0; w < e.w; ++w) {
        const Index sd = axis == 0 ? e.d - 1 - d : d;
        const Index sh = axis == 1 ? e.h - 1 - h : h;
        const Index sw = axis == 2 ? e.w - 1 - w : w;
        out(d, h, w) = v(sd, sh, sw);
      }
  return out;
}

}  // namespace

AugmentSample flip(const AugmentSample& s, int axis) {
  if (axis < 0 || axis > 2) throw std::invalid_argument("flip axis must be 0, 1 or 2");
  AugmentSample out;
  out.image = flip_volume(s.image, axis);
  for (const Mask& m : s.masks) out.masks.push_back(flip_volume(m, axis));
  const Extent3 e = s.image.dims;
  for (Voxel p : s.points) {
    if (axis == 0) p.d = e.d - 1 - p.d;
    if (axis == 1) p.h = e.h - 1 - p.h;
    if (axis == 2) p.w = e.w - 1 - p.w;
    out.points.push_back(p);
  }
  return out;
}

AugmentSample affine(const AugmentSample& s, double angle, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("affine scale must be positive");
  const Extent3 e = s.image.dims;
  const double ch = 0.5 * static_cast<double>(e.h - 1), cw = 0.5 * static_cast<double>(e.w - 1);
  const double ca = std::cos(angle), sa = std::sin(angle);
  AugmentSample out;
  out.image = Image(e, 0.0f);
  for (std::size_t k = 0; k < s.masks.size(); ++k) out.masks.emplace_back(e, 0);
  for (Index h = 0; h < e.h; ++h)
    for (Index w = 0; w < e.w; ++w) {
      // Inverse map: output (h, w) samples the input at R^-1 (p - c) / s + c.
      const double y = static_cast<double>(h) - ch, x = static_cast<double>(w) - cw;
      const double sy = (ca * y + sa * x) / scale + ch;
      const double sx = (-sa * y + ca * x) / scale + cw;
      const Index ny = round_index(sy), nx = round_index(sx);
      const bool nearest_ok = ny >= 0 && ny < e.h && nx >= 0 && nx < e.w;
      const auto y0 = static_cast<Index>(std::floor(sy)), x0 = static_cast<Index>(std::floor(sx));
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (Index d = 0; d < e.d; ++d) {
        double acc = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const Index yy = y0 + a, xx = x0 + b;
            if (yy < 0 || yy >= e.h || xx < 0 || xx >= e.w) continue;
            acc += (a ? fy : 1.0 - fy) * (b ? fx : 1.0 - fx) * s.image(d, yy, xx);
          }
        out.image(d, h, w) = static_cast<float>(acc);
        if (nearest_ok)
          for (std::size_t k = 0; k < s.masks.size(); ++k) out.masks[k](d, h, w) = s.masks[k](d, ny, nx);
      }
    }
  for (const Voxel& p : s.points) {
    const double y = static_cast<double>(p.h) - ch, x = static_cast<double>(p.w) - cw;
    const double ty = scale * (ca * y - sa * x) + ch;
    const double tx = scale * (sa * y + ca * x) + cw;
    out.points.push_back({p.d, std::clamp<Index>(round_index(ty), 0, e.h - 1),
                          std::clamp<Index>(round_index(tx), 0, e.w - 1)});
  }
  return out;
}

Image apply_gamma(const Image& img, double g) {
  if (!(g > 0.0)) throw std::invalid_argument("gamma must be positive");
  Image out = img;
  for (float& v : out.data) v = static_cast<float>(std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), g));
  return out;
}

AugmentSample augment(const AugmentSample& s, std::mt19937_64& rng, const AugmentSet& ops,
                      const AugmentParams& params) {
  AugmentSample out = s;
  if (ops.flip)
    for (int axis = 0; axis < 3; ++axis)
      if (uniform(rng, 0.0, 1.0) < params.flip_probability) out = flip(out, axis);
  if (ops.affine) {
    const double angle = uniform(rng, -params.max_rotation, params.max_rotation);
    const double scale = uniform(rng, params.scale_min, params.scale_max);
    out = affine(out, angle, scale);
  }
  if (ops.blur) {
    const double sigma = uniform(rng, 0.0, params.blur_sigma_max);
    out.image = gaussian_blur(out.image, 0.5 * sigma, sigma, sigma);
  }
  if (ops.noise) {
    const double sigma = uniform(rng, 0.0, params.noise_sigma_max);
    std::normal_distribution<double> gauss(0.0, sigma > 0.0 ? sigma : 1.0);
    if (sigma > 0.0)
      for (float& v : out.image.data) v = static_cast<float>(std::clamp(v + gauss(rng), 0.0, 1.0));
  }
  if (ops.gamma) out.image = apply_gamma(out.image, uniform(rng, params.gamma_min, params.gamma_max));
  return out;
}

// Crops ---------------------------------------------------------------------

Extent3 centred_offset(const Voxel& center, Extent3 crop_dims, Extent3 volume) {
  if (crop_dims.d > volume.d || crop_dims.h > volume.h || crop_dims.w > volume.w)
    throw std::invalid_argument("crop dims exceed the volume");
  return {std::clamp<Index>(center.d - crop_dims.d / 2, 0, volume.d - crop_dims.d),
          std::clamp<Index>(center.h - crop_dims.h / 2, 0, volume.h - crop_dims.h),
          std::clamp<Index>(center.w - crop_dims.w / 2, 0, volume.w - crop_dims.w)};
}

CellCrop crop_around_cell(const VolumeSample& s, int cell, Extent3 crop_dims, std::mt19937_64& rng,
                          double jitter) {
  if (cell < 0 || cell >= static_cast<int>(s.cell_masks.size()))
    throw std::out_of_range("cell index " + std::to_string(cell) + " out of range (volume has " +
                            std::to_string(s.cell_masks.size()) + " cells)");
  const Voxel c = s.soma_centroids[static_cast<std::size_t>(cell)];
  auto shift = [&](Index extent) {
    const auto j = static_cast<Index>(std::floor(jitter * static_cast<double>(extent)));
    return j > 0 ? std::uniform_int_distribution<Index>(-j, j)(rng) : Index{0};
  };
  const Index jd = shift(crop_dims.d), jh = shift(crop_dims.h), jw = shift(crop_dims.w);
  const Extent3 off = centred_offset({c.d + jd, c.h + jh, c.w + jw}, crop_dims, s.image.dims);
  CellCrop out;
  out.offset = off;
  out.image = crop(s.image, off, crop_dims);
  out.target = crop(s.cell_masks[static_cast<std::size_t>(cell)], off, crop_dims);
  out.prompt = {c.d - off.d, c.h - off.h, c.w - off.w};
  return out;
}

// Storage -------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "V3D I/O assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(path.string() + ": truncated V3D header");
  return v;
}

template <class T>
void write_volume(const std::filesystem::path& path, const Volume<T>& v, std::uint8_t dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("V3D1", 4);
  write_pod(os, dtype);
  write_pod(os, std::uint32_t{3});
  for (Index e : {v.dims.d, v.dims.h, v.dims.w}) write_pod(os, static_cast<std::uint64_t>(e));
  os.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

template <class T>
Volume<T> read_volume(const std::filesystem::path& path, std::uint8_t dtype) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "V3D1", 4) != 0) throw std::runtime_error(path.string() + ": not a V3D file");
  const auto code = read_pod<std::uint8_t>(is, path);
  if (code != dtype)
    throw std::runtime_error(path.string() + ": dtype code " + std::to_string(code) + ", expected " +
                             std::to_string(dtype));
  const auto ndim = read_pod<std::uint32_t>(is, path);
  if (ndim != 3) throw std::runtime_error(path.string() + ": expected 3 axes, found " + std::to_string(ndim));
  Extent3 e;
  e.d = static_cast<Index>(read_pod<std::uint64_t>(is, path));
  e.h = static_cast<Index>(read_pod<std::uint64_t>(is, path));
  e.w = static_cast<Index>(read_pod<std::uint64_t>(is, path));
  Volume<T> v(e);
  is.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!is) throw std::runtime_error(path.string() + ": truncated payload");
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing bytes");
  return v;
}

}  // namespace

void write_v3d(const std::filesystem::path& path, const Image& v) { write_volume(path, v, 0); }
void write_v3d(const std::filesystem::path& path, const Mask& v) { write_volume(path, v, 1); }
Image read_v3d_image(const std::filesystem::path& path) { return read_volume<float>(path, 0); }
Mask read_v3d_mask(const std::filesystem::path& path) { return read_volume<std::uint8_t>(path, 1); }

void write_sample(const std::filesystem::path& dir, const VolumeSample& s) {
  std::filesystem::create_directories(dir);
  write_v3d(dir / "image.v3d", s.image);
  write_v3d(dir / "soma.v3d", s.soma_mask);
  nlohmann::json centroids = nlohmann::json::array();
  for (std::size_t k = 0; k < s.cell_masks.size(); ++k) {
    write_v3d(dir / ("cell_" + std::to_string(k) + ".v3d"), s.cell_masks[k]);
    const Voxel& c = s.soma_centroids[k];
    centroids.push_back({c.w, c.h, c.d});
  }
  const nlohmann::json meta{{"cells", s.cell_masks.size()},
                            {"centroids_xyz", centroids},
                            {"dims", json_fields::whd_json(s.image.dims)},
                            {"seed", s.seed},
                            {"voxel_size", {s.voxel_size.x, s.voxel_size.y, s.voxel_size.z}}};
  std::ofstream os(dir / "meta.json");
  os << meta.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + (dir / "meta.json").string());
}

VolumeSample read_sample(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "meta.json").string() + ": " + e.what());
  }
  VolumeSample s;
  s.image = read_v3d_image(dir / "image.v3d");
  s.soma_mask = read_v3d_mask(dir / "soma.v3d");
  s.seed = meta.value("seed", std::uint64_t{0});
  const auto& vs = meta.at("voxel_size");
  s.voxel_size = {vs[0].get<double>(), vs[1].get<double>(), vs[2].get<double>()};
  const auto cells = meta.at("cells").get<std::size_t>();
  const auto& cs = meta.at("centroids_xyz");
  if (cs.size() != cells) throw std::runtime_error((dir / "meta.json").string() + ": centroid count mismatch");
  for (std::size_t k = 0; k < cells; ++k) {
    s.cell_masks.push_back(read_v3d_mask(dir / ("cell_" + std::to_string(k) + ".v3d")));
    s.soma_centroids.push_back({cs[k][2].get<Index>(), cs[k][1].get<Index>(), cs[k][0].get<Index>()});
  }
  for (const Mask& m : s.cell_masks)
    if (m.dims != s.image.dims) throw std::runtime_error(dir.string() + ": cell mask dims differ from the image");
  if (s.soma_mask.dims != s.image.dims) throw std::runtime_error(dir.string() + ": soma mask dims differ from the image");
  return s;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined key.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace traice3d
