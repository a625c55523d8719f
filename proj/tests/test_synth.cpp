#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "traice3d/metrics.hpp"
#include "traice3d/synth.hpp"

using namespace traice3d;

namespace {

bool subset(const Mask& a, const Mask& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] && !b.data[i]) return false;
  return true;
}

Mask union_of(const std::vector<Mask>& masks, Extent3 dims) {
  Mask u(dims);
  for (const Mask& m : masks)
    for (std::size_t i = 0; i < m.data.size(); ++i) u.data[i] |= m.data[i];
  return u;
}

double snr(const VolumeSample& s) {
  const Mask fg = union_of(s.cell_masks, s.image.dims);
  double sf = 0, sb = 0, sbb = 0;
  Index nf = 0, nb = 0;
  for (std::size_t i = 0; i < fg.data.size(); ++i) {
    const double v = s.image.data[i];
    if (fg.data[i]) {
      sf += v;
      ++nf;
    } else {
      sb += v;
      sbb += v * v;
      ++nb;
    }
  }
  const double mb = sb / static_cast<double>(nb);
  const double sd = std::sqrt(sbb / static_cast<double>(nb) - mb * mb);
  return (sf / static_cast<double>(nf) - mb) / sd;
}

/// Rank-based CDF remapping: the share of voxels in bins up to the value's
/// own, counted above the lowest occupied bin.
Image equalize_oracle(const Image& img) {
  std::vector<int> bins(img.data.size());
  for (std::size_t i = 0; i < bins.size(); ++i) bins[i] = std::min(255, std::max(0, static_cast<int>(img.data[i] * 256)));
  std::vector<int> sorted = bins;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  const double lowest = static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), sorted.front()) - sorted.begin());
  Image out = img;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const double rank = static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), bins[i]) - sorted.begin());
    out.data[i] = static_cast<float>((rank - lowest) / (n - lowest));
  }
  return out;
}

std::vector<Index> histogram(const Image& img) {
  std::vector<Index> h(256, 0);
  for (float v : img.data) ++h[static_cast<std::size_t>(std::min(255, static_cast<int>(v * 256)))];
  return h;
}

}  // namespace

TEST_CASE("cell generation") {
  SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const Cell c = generate_cell(a, cfg), d = generate_cell(b, cfg);
    CHECK(c.mask == d.mask);
    CHECK(c.centroid == d.centroid);
    CHECK(subset(c.soma, c.mask));
    CHECK(c.soma[c.centroid]);
    CHECK(c.branches >= cfg.branches_min);
    CHECK(c.branches <= cfg.branches_max);
    CHECK(connected_components(c.mask).size() == 1);
  }
}

TEST_CASE("volume generation invariants") {
  SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::mt19937_64 rng(seed), again(seed);
    const VolumeSample s = generate_volume(rng, cfg);
    const VolumeSample t = generate_volume(again, cfg);
    CHECK(s.image == t.image);
    CHECK(s.soma_mask == t.soma_mask);
    const auto k = static_cast<int>(s.cell_masks.size());
    CHECK(k >= cfg.cells_min);
    CHECK(k <= cfg.cells_max);
    REQUIRE(s.soma_centroids.size() == s.cell_masks.size());
    CHECK(s.image.dims == cfg.dims);
    for (int i = 0; i < k; ++i) {
      const Mask& m = s.cell_masks[static_cast<std::size_t>(i)];
      CHECK(m.dims == cfg.dims);
      CHECK(m[s.soma_centroids[static_cast<std::size_t>(i)]]);
      CHECK(s.soma_mask[s.soma_centroids[static_cast<std::size_t>(i)]]);
      CHECK(connected_components(m).size() == 1);
      for (int j = i + 1; j < k; ++j) {
        const Voxel a = s.soma_centroids[static_cast<std::size_t>(i)], b = s.soma_centroids[static_cast<std::size_t>(j)];
        const double dist = std::sqrt(static_cast<double>((a.d - b.d) * (a.d - b.d) + (a.h - b.h) * (a.h - b.h) +
                                                          (a.w - b.w) * (a.w - b.w)));
        CHECK(dist >= cfg.min_separation);
      }
    }
    CHECK(subset(s.soma_mask, union_of(s.cell_masks, cfg.dims)));
    for (float v : s.image.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }

  std::mt19937_64 rng(9);
  const VolumeSample empty = generate_volume(rng, cfg, 0);
  CHECK(empty.cell_masks.empty());
  CHECK(count_foreground(empty.soma_mask) == 0);

  SynthConfig crowded = cfg;
  crowded.min_separation = 200.0;
  crowded.placement_retries = 20;
  CHECK_THROWS_AS(generate_volume(rng, crowded, 2), std::runtime_error);
}

TEST_CASE("overlap volumes") {
  SynthConfig cfg;
  cfg.dims = {16, 96, 96};
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(seed);
    const VolumeSample s = generate_overlap_volume(rng, cfg);
    REQUIRE(s.cell_masks.size() == 2);
    auto box = [](const Mask& m) {
      Voxel lo{1 << 20, 1 << 20, 1 << 20}, hi{-1, -1, -1};
      for (const Voxel& v : foreground(m)) {
        lo = {std::min(lo.d, v.d), std::min(lo.h, v.h), std::min(lo.w, v.w)};
        hi = {std::max(hi.d, v.d), std::max(hi.h, v.h), std::max(hi.w, v.w)};
      }
      return std::pair{lo, hi};
    };
    const auto [la, ha] = box(s.cell_masks[0]);
    const auto [lb, hb] = box(s.cell_masks[1]);
    CHECK(la.d <= hb.d);
    CHECK(lb.d <= ha.d);
    CHECK(la.h <= hb.h);
    CHECK(lb.h <= ha.h);
    CHECK(la.w <= hb.w);
    CHECK(lb.w <= ha.w);
  }
}

TEST_CASE("rendering") {
  SynthConfig clean;
  clean.noise_sigma = clean.signal_noise = clean.blur_sigma = 0.0;
  clean.background_level = clean.background_gradient = 0.0;
  clean.brightness_min = clean.brightness_max = 1.0;
  clean.branch_gain = 1.0;
  std::mt19937_64 rng(10);
  const VolumeSample s = generate_volume(rng, clean, 3);
  const Mask u = union_of(s.cell_masks, clean.dims);
  for (std::size_t i = 0; i < u.data.size(); ++i) REQUIRE(s.image.data[i] == static_cast<float>(u.data[i]));

  std::vector<double> snrs;
  for (double sigma : {0.02, 0.05, 0.1}) {
    SynthConfig cfg;
    cfg.noise_sigma = sigma;
    std::mt19937_64 r(11);
    snrs.push_back(snr(generate_volume(r, cfg, 4)));
  }
  CHECK(snrs[0] > snrs[1]);
  CHECK(snrs[1] > snrs[2]);
}

TEST_CASE("tiling") {
  CHECK(tile_starts(512, 256, 0.5) == std::vector<Index>{0, 128, 256});
  CHECK(tile_starts(16, 16, 0.5) == std::vector<Index>{0});
  CHECK(tile_starts(100, 64, 0.5) == std::vector<Index>{0, 32, 36});
  CHECK(tile_offsets({16, 512, 512}, {16, 256, 256}, 0.5).size() == 9);

  VolumeSample big;
  big.image = Image({16, 512, 512});
  big.soma_mask = Mask({16, 512, 512});
  big.cell_masks.push_back(Mask({16, 512, 512}, 1));
  big.soma_centroids.push_back({8, 256, 256});
  CHECK(tile_volume(big, {16, 256, 256}, 0.5, TileMode::inference).size() == 9);
  const auto whole = tile_volume(big, {16, 512, 512}, 0.5, TileMode::inference);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0].offset == Extent3{0, 0, 0});

  // 4% foreground is dropped in training mode and kept in inference mode.
  VolumeSample sparse;
  const Extent3 dims{16, 64, 64};
  sparse.image = Image(dims);
  sparse.soma_mask = Mask(dims);
  Mask cell(dims);
  const Index four_percent = dims.d * dims.h * dims.w * 4 / 100;
  for (Index i = 0; i < four_percent; ++i) cell.data[static_cast<std::size_t>(i)] = 1;
  sparse.cell_masks.push_back(cell);
  sparse.soma_centroids.push_back({0, 0, 0});
  CHECK(tile_volume(sparse, dims, 0.5, TileMode::training).empty());
  CHECK(tile_volume(sparse, dims, 0.5, TileMode::inference).size() == 1);
  const Index six_percent = dims.d * dims.h * dims.w * 6 / 100;
  for (Index i = 0; i < six_percent; ++i) sparse.cell_masks[0].data[static_cast<std::size_t>(i)] = 1;
  CHECK(tile_volume(sparse, dims, 0.5, TileMode::training).size() == 1);

  std::mt19937_64 rng(12);
  std::uniform_int_distribution<Index> extent(20, 90);
  std::uniform_real_distribution<double> overlap(0.0, 0.75);
  for (int trial = 0; trial < 30; ++trial) {
    const Extent3 vol{extent(rng) / 4, extent(rng), extent(rng)};
    const Extent3 tile{std::max<Index>(1, vol.d / 2), std::max<Index>(1, vol.h / 3), std::max<Index>(1, vol.w / 2)};
    Volume<int> cover(vol, 0);
    for (const Extent3& off : tile_offsets(vol, tile, overlap(rng))) {
      CHECK(off.d + tile.d <= vol.d);
      CHECK(off.h + tile.h <= vol.h);
      CHECK(off.w + tile.w <= vol.w);
      for (Index d = 0; d < tile.d; ++d)
        for (Index h = 0; h < tile.h; ++h)
          for (Index w = 0; w < tile.w; ++w) ++cover(off.d + d, off.h + h, off.w + w);
    }
    CHECK(std::all_of(cover.data.begin(), cover.data.end(), [](int c) { return c >= 1; }));
  }
}

TEST_CASE("histogram equalization") {
  const Extent3 dims{16, 64, 64};
  Image constant(dims, 0.3f);
  CHECK(histogram_equalize(constant) == constant);

  Image gradient(dims);
  const auto n = static_cast<double>(gradient.size());
  for (Index i = 0; i < gradient.size(); ++i) {
    const double x = static_cast<double>(i) / n;
    gradient.data[static_cast<std::size_t>(i)] = static_cast<float>(0.75 * x + 0.25 * x * x);
  }
  const Image eq = histogram_equalize(gradient);
  const Image oracle = equalize_oracle(gradient);
  for (std::size_t i = 0; i < eq.data.size(); ++i) {
    REQUIRE(eq.data[i] >= 0.0f);
    REQUIRE(eq.data[i] <= 1.0f);
    REQUIRE(std::abs(eq.data[i] - oracle.data[i]) < 1e-6f);
  }
  const auto h = histogram(eq);
  const double mean_mass = n / 256.0;
  CHECK(static_cast<double>(*std::max_element(h.begin(), h.end())) <= 2.0 * mean_mass);

  std::mt19937_64 rng(13);
  Image noisy(dims);
  std::uniform_real_distribution<float> u(0.2f, 0.4f);
  for (float& v : noisy.data) v = u(rng);
  const Image eqn = histogram_equalize(noisy), on = equalize_oracle(noisy);
  for (std::size_t i = 0; i < eqn.data.size(); ++i) REQUIRE(std::abs(eqn.data[i] - on.data[i]) < 1e-6f);
  CHECK(*std::min_element(eqn.data.begin(), eqn.data.end()) == 0.0f);
  CHECK(*std::max_element(eqn.data.begin(), eqn.data.end()) == 1.0f);
}

TEST_CASE("augmentation") {
  SynthConfig cfg;
  std::mt19937_64 rng(14);
  const VolumeSample s = generate_volume(rng, cfg, 3);
  const AugmentSample a{s.image, s.cell_masks, s.soma_centroids};
  for (int axis = 0; axis < 3; ++axis) {
    const AugmentSample f = flip(a, axis);
    const AugmentSample ff = flip(f, axis);
    CHECK(ff.image == a.image);
    CHECK(ff.masks == a.masks);
    CHECK(ff.points == a.points);
    for (std::size_t k = 0; k < a.masks.size(); ++k) {
      CHECK(count_foreground(f.masks[k]) == count_foreground(a.masks[k]));
      CHECK(f.masks[k][f.points[k]] == a.masks[k][a.points[k]]);
    }
  }
  CHECK_THROWS(flip(a, 3));

  const Image g = apply_gamma(s.image, 2.0);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    REQUIRE(g.data[i] >= 0.0f);
    REQUIRE(g.data[i] <= 1.0f);
  }
  for (std::size_t i = 1; i < g.data.size(); i += 97)
    if (s.image.data[i] < s.image.data[i - 1]) CHECK(g.data[i] <= g.data[i - 1]);

  const AugmentSample ident = affine(a, 0.0, 1.0);
  CHECK(ident.masks == a.masks);
  CHECK(ident.points == a.points);

  // Image equal to the mask: a spatial-only pipeline keeps them aligned.
  AugmentSample paired{Image(cfg.dims), {s.cell_masks[0]}, {s.soma_centroids[0]}};
  for (std::size_t i = 0; i < paired.image.data.size(); ++i) paired.image.data[i] = s.cell_masks[0].data[i];
  for (int trial = 0; trial < 4; ++trial) {
    AugmentSet ops;
    ops.flip = true;
    const AugmentSample out = augment(paired, rng, ops);
    for (std::size_t i = 0; i < out.image.data.size(); ++i)
      REQUIRE(out.image.data[i] == static_cast<float>(out.masks[0].data[i]));
  }

  for (int trial = 0; trial < 4; ++trial) {
    const AugmentSample out = augment(a, rng, AugmentSet::all());
    CHECK(out.image.dims == a.image.dims);
    for (float v : out.image.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    for (const Mask& m : out.masks)
      for (auto v : m.data) REQUIRE(v <= 1);
    for (const Voxel& p : out.points) CHECK(out.image.contains(p));
  }
  CHECK(AugmentSet::parse({"flip", "gamma"}).names() == std::vector<std::string>{"flip", "gamma"});
  CHECK_THROWS(AugmentSet::parse({"elastic"}));
}

TEST_CASE("per-cell crops") {
  SynthConfig cfg;
  cfg.dims = {16, 96, 96};
  std::mt19937_64 rng(15);
  const VolumeSample s = generate_volume(rng, cfg, 4);
  const Extent3 crop_dims{16, 64, 64};
  for (int k = 0; k < 4; ++k) {
    const CellCrop c = crop_around_cell(s, k, crop_dims, rng, 0.0);
    const Voxel centre = s.soma_centroids[static_cast<std::size_t>(k)];
    CHECK(c.offset == centred_offset(centre, crop_dims, cfg.dims));
    CHECK(c.image.dims == crop_dims);
    CHECK(c.target.contains(c.prompt));
    CHECK(c.target[c.prompt]);
    for (int trial = 0; trial < 5; ++trial) {
      const CellCrop j = crop_around_cell(s, k, crop_dims, rng);
      CHECK(j.target.contains(j.prompt));
      CHECK(std::abs(j.offset.h - c.offset.h) <= 6);
      CHECK(std::abs(j.offset.w - c.offset.w) <= 6);
      CHECK(s.soma_mask[{j.prompt.d + j.offset.d, j.prompt.h + j.offset.h, j.prompt.w + j.offset.w}]);
    }
  }
  CHECK_THROWS_AS(crop_around_cell(s, 4, crop_dims, rng), std::out_of_range);
  CHECK(centred_offset({8, 2, 90}, crop_dims, cfg.dims) == Extent3{0, 0, 32});

  std::mt19937_64 orng(16);
  const VolumeSample ov = generate_overlap_volume(orng, cfg);
  const CellCrop a = crop_around_cell(ov, 0, crop_dims, orng, 0.0), b = crop_around_cell(ov, 1, crop_dims, orng, 0.0);
  Index differing = 0;
  for (Index d = 0; d < crop_dims.d; ++d)
    for (Index h = 0; h < crop_dims.h; ++h)
      for (Index w = 0; w < crop_dims.w; ++w) {
        const Voxel g{a.offset.d + d, a.offset.h + h, a.offset.w + w};
        const Voxel lb{g.d - b.offset.d, g.h - b.offset.h, g.w - b.offset.w};
        if (!b.target.contains(lb)) continue;
        differing += a.target(d, h, w) != b.target[lb] ? 1 : 0;
      }
  CHECK(differing > 0);
}

TEST_CASE("V3D storage") {
  const auto dir = std::filesystem::temp_directory_path() / "traice3d_test_synth";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Image img({2, 3, 4});
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 24.0f;
  write_v3d(dir / "img.v3d", img);
  CHECK(read_v3d_image(dir / "img.v3d") == img);

  std::ifstream is(dir / "img.v3d", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 4 + 1 + 4 + 3 * 8 + 24 * 4);
  CHECK(std::memcmp(bytes.data(), "V3D1", 4) == 0);
  CHECK(bytes[4] == 0);
  std::uint32_t ndim;
  std::memcpy(&ndim, bytes.data() + 5, 4);
  CHECK(ndim == 3);
  std::uint64_t extents[3];
  std::memcpy(extents, bytes.data() + 9, 24);
  CHECK(extents[0] == 2);
  CHECK(extents[1] == 3);
  CHECK(extents[2] == 4);
  CHECK_THROWS(read_v3d_mask(dir / "img.v3d"));

  std::mt19937_64 rng(17);
  const VolumeSample s = generate_volume(rng, SynthConfig{}, 2);
  write_sample(dir / "vol", s);
  const VolumeSample back = read_sample(dir / "vol");
  CHECK(back.image == s.image);
  CHECK(back.soma_mask == s.soma_mask);
  CHECK(back.cell_masks == s.cell_masks);
  CHECK(back.soma_centroids == s.soma_centroids);
  CHECK(back.voxel_size == s.voxel_size);

  std::ofstream(dir / "bad.v3d", std::ios::binary) << "V3D";
  CHECK_THROWS(read_v3d_image(dir / "bad.v3d"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("synth config validation and JSON") {
  SynthConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  const SynthConfig back = synth_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  SynthConfig bad = cfg;
  bad.cells_min = 5;
  bad.cells_max = 3;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS_WITH(synth_config_from_json({{"noise_sigma", "x"}}), doctest::Contains("data.noise_sigma"));
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
}
