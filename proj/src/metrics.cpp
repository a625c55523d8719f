#include "traice3d/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

namespace traice3d {

DetectionMetrics detection_metrics(const std::vector<Voxel>& predicted,
                                   const std::vector<Voxel>& truth, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("matching radius must be positive");
  DetectionMetrics m;
  if (predicted.empty() && truth.empty()) {
    m.accuracy = m.f1 = m.precision = m.recall = 1.0;
    return m;
  }
  struct Pair {
    double dist;
    Voxel p, t;
    std::size_t pi, ti;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j) {
      const double dd = static_cast<double>(predicted[i].d - truth[j].d);
      const double dh = static_cast<double>(predicted[i].h - truth[j].h);
      const double dw = static_cast<double>(predicted[i].w - truth[j].w);
      const double dist = std::sqrt(dd * dd + dh * dh + dw * dw);
      if (dist <= radius) pairs.push_back({dist, predicted[i], truth[j], i, j});
    }
  // Ordering by coordinates keeps the result independent of list order.
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.dist, a.p, a.t) < std::tie(b.dist, b.p, b.t);
  });
  std::vector<bool> used_p(predicted.size()), used_t(truth.size());
  for (const Pair& pr : pairs) {
    if (used_p[pr.pi] || used_t[pr.ti]) continue;
    used_p[pr.pi] = used_t[pr.ti] = true;
    ++m.true_positives;
  }
  m.false_positives = static_cast<Index>(predicted.size()) - m.true_positives;
  m.false_negatives = static_cast<Index>(truth.size()) - m.true_positives;
  const double tp = static_cast<double>(m.true_positives);
  if (!predicted.empty()) m.precision = tp / static_cast<double>(predicted.size());
  if (!truth.empty()) m.recall = tp / static_cast<double>(truth.size());
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  m.accuracy = tp / static_cast<double>(m.true_positives + m.false_positives + m.false_negatives);
  return m;
}

namespace {

void require_same_dims(const Mask& a, const Mask& b, const char* name) {
  if (a.dims != b.dims) throw std::invalid_argument(std::string(name) + ": mask dims differ");
}

}  // namespace

double dice_score(const Mask& pred, const Mask& truth) {
  require_same_dims(pred, truth, "dice_score");
  Index inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
    inter += (p && t) ? 1 : 0;
    total += (p ? 1 : 0) + (t ? 1 : 0);
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double intersection_over_union(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "intersection_over_union");
  Index inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

double physical_sq(const Voxel& a, const Voxel& b, const Spacing& s) {
  const double dz = static_cast<double>(a.d - b.d) * s.z;
  const double dy = static_cast<double>(a.h - b.h) * s.y;
  const double dx = static_cast<double>(a.w - b.w) * s.x;
  return dx * dx + dy * dy + dz * dz;
}

// Directed distance with early break: a point stops scanning B as soon as it
// is closer than the running maximum. Shuffling B makes early breaks likely.
double directed_sq(const std::vector<Voxel>& a, std::vector<Voxel> b, const Spacing& s) {
  std::mt19937_64 rng(0x48d1);
  std::shuffle(b.begin(), b.end(), rng);
  double worst = 0.0;
  for (const Voxel& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Voxel& q : b) {
      best = std::min(best, physical_sq(p, q, s));
      if (best < worst) break;
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

double hausdorff(const std::vector<Voxel>& a, const std::vector<Voxel>& b, const Spacing& spacing) {
  if (a.empty() || b.empty()) throw std::invalid_argument("hausdorff: empty point set");
  return std::sqrt(std::max(directed_sq(a, b, spacing), directed_sq(b, a, spacing)));
}

double hausdorff(const Mask& a, const Mask& b, const Spacing& spacing) {
  return hausdorff(foreground(a), foreground(b), spacing);
}

namespace {

constexpr std::array<Voxel, 26> neighbours26 = [] {
  std::array<Voxel, 26> out{};
  int k = 0;
  for (Index d = -1; d <= 1; ++d)
    for (Index h = -1; h <= 1; ++h)
      for (Index w = -1; w <= 1; ++w)
        if (d || h || w) out[static_cast<std::size_t>(k++)] = {d, h, w};
  return out;
}();

}  // namespace

std::vector<std::vector<Voxel>> connected_components(const Mask& mask) {
  std::vector<std::vector<Voxel>> out;
  std::vector<std::uint8_t> seen(mask.data.size(), 0);
  std::vector<Voxel> stack;
  for (Index i = 0; i < mask.size(); ++i) {
    if (!mask.data[static_cast<std::size_t>(i)] || seen[static_cast<std::size_t>(i)]) continue;
    std::vector<Voxel> comp;
    seen[static_cast<std::size_t>(i)] = 1;
    stack.push_back(mask.voxel(i));
    while (!stack.empty()) {
      const Voxel v = stack.back();
      stack.pop_back();
      comp.push_back(v);
      for (const Voxel& o : neighbours26) {
        const Voxel n{v.d + o.d, v.h + o.h, v.w + o.w};
        if (!mask.contains(n)) continue;
        const auto idx = static_cast<std::size_t>(mask.index(n.d, n.h, n.w));
        if (mask.data[idx] && !seen[idx]) {
          seen[idx] = 1;
          stack.push_back(n);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

namespace {

// 3x3x3 neighbourhood, index (d+1)*9 + (h+1)*3 + (w+1); centre is 13.
using Cube = std::array<bool, 27>;

int cube_index(Index d, Index h, Index w) { return static_cast<int>((d + 1) * 9 + (h + 1) * 3 + (w + 1)); }

Cube gather(const Mask& m, const Voxel& v) {
  Cube c{};
  for (Index d = -1; d <= 1; ++d)
    for (Index h = -1; h <= 1; ++h)
      for (Index w = -1; w <= 1; ++w) {
        const Voxel n{v.d + d, v.h + h, v.w + w};
        c[static_cast<std::size_t>(cube_index(d, h, w))] = m.contains(n) && m[n] != 0;
      }
  return c;
}

Voxel cube_offset(int i) { return {i / 9 - 1, (i / 3) % 3 - 1, i % 3 - 1}; }

int taxicab(const Voxel& o) {
  return static_cast<int>(std::abs(o.d) + std::abs(o.h) + std::abs(o.w));
}

// Components of the cells selected by `member`, adjacent when their offsets
// differ by at most one along every axis (26) or along exactly one axis (6).
// With `seeds`, only components touching a seed cell are counted.
int count_components(const std::array<bool, 27>& member, bool six, const std::array<bool, 27>* seeds) {
  std::array<bool, 27> seen{};
  int count = 0;
  for (int start = 0; start < 27; ++start) {
    if (!member[start] || seen[start]) continue;
    bool touches = seeds == nullptr;
    int stack[27];
    int top = 0;
    stack[top++] = start;
    seen[start] = true;
    while (top) {
      const int c = stack[--top];
      if (seeds && (*seeds)[c]) touches = true;
      const Voxel a = cube_offset(c);
      for (int n = 0; n < 27; ++n) {
        if (!member[n] || seen[n]) continue;
        const Voxel b = cube_offset(n);
        const Voxel diff{b.d - a.d, b.h - a.h, b.w - a.w};
        const bool adjacent = six ? taxicab(diff) == 1
                                  : std::max({std::abs(diff.d), std::abs(diff.h), std::abs(diff.w)}) == 1;
        if (adjacent) {
          seen[n] = true;
          stack[top++] = n;
        }
      }
    }
    if (touches) ++count;
  }
  return count;
}

// (26, 6) simple point: removing it changes neither the foreground nor the
// background topology.
bool is_simple(const Cube& c) {
  std::array<bool, 27> fg{}, bg{}, faces{};
  for (int i = 0; i < 27; ++i) {
    if (i == 13) continue;
    const int t = taxicab(cube_offset(i));
    fg[i] = c[i];
    bg[i] = !c[i] && t <= 2;
    faces[i] = t == 1;
  }
  return count_components(fg, false, nullptr) == 1 && count_components(bg, true, &faces) == 1;
}

int neighbour_count(const Cube& c) {
  int n = 0;
  for (int i = 0; i < 27; ++i) n += (i != 13 && c[i]) ? 1 : 0;
  return n;
}

}  // namespace

Mask skeletonize(const Mask& mask) {
  Mask skel = binarize(mask, 0.0);
  constexpr std::array<Voxel, 6> directions{
      {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Voxel& dir : directions) {
      std::vector<Voxel> candidates;
      for (Index i = 0; i < skel.size(); ++i) {
        if (!skel.data[static_cast<std::size_t>(i)]) continue;
        const Voxel v = skel.voxel(i);
        const Voxel n{v.d + dir.d, v.h + dir.h, v.w + dir.w};
        if (!skel.contains(n) || !skel[n]) candidates.push_back(v);
      }
      for (const Voxel& v : candidates) {
        const Cube c = gather(skel, v);
        if (neighbour_count(c) <= 1 || !is_simple(c)) continue;
        skel[v] = 0;
        changed = true;
      }
    }
  }
  return skel;
}

double skeleton_length(const Mask& skeleton, const Spacing& spacing) {
  const std::vector<Voxel> pts = foreground(skeleton);
  std::vector<Index> id(skeleton.data.size(), -1);
  for (std::size_t i = 0; i < pts.size(); ++i)
    id[static_cast<std::size_t>(skeleton.index(pts[i].d, pts[i].h, pts[i].w))] = static_cast<Index>(i);
  struct Edge {
    double len;
    Index a, b;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (const Voxel& o : neighbours26) {
      const Voxel n{pts[i].d + o.d, pts[i].h + o.h, pts[i].w + o.w};
      if (!skeleton.contains(n)) continue;
      const Index j = id[static_cast<std::size_t>(skeleton.index(n.d, n.h, n.w))];
      if (j > static_cast<Index>(i)) edges.push_back({std::sqrt(physical_sq(pts[i], n, spacing)), static_cast<Index>(i), j});
    }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.len < y.len; });
  std::vector<Index> parent(pts.size());
  std::iota(parent.begin(), parent.end(), Index{0});
  auto root = [&](Index x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  double total = 0.0;
  for (const Edge& e : edges) {
    const Index ra = root(e.a), rb = root(e.b);
    if (ra == rb) continue;
    parent[static_cast<std::size_t>(ra)] = rb;
    total += e.len;
  }
  return total;
}

double apld(const Mask& pred, const Mask& truth, const Spacing& spacing) {
  require_same_dims(pred, truth, "apld");
  const double gt = skeleton_length(skeletonize(truth), spacing);
  if (!(gt > 0.0)) throw std::invalid_argument("apld: ground-truth skeleton is empty");
  const double pl = skeleton_length(skeletonize(pred), spacing);
  return std::abs(pl - gt) / gt;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double v = 0.0;
  for (double x : values) v += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(v / n);
  return s;
}

}  // namespace traice3d
