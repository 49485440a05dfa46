#include "sat3d/volgrid/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace sat3d::volgrid {

Volume znormalize(const Volume& v) {
  Volume out = v;
  for (int c = 0; c < v.data.channels(); ++c) {
    const auto in = v.data.channel(c);
    auto dst = out.data.channel(c);
    const auto mask = (in > 0.0f);
    const std::int64_t n = mask.count();
    if (n == 0) throw DegenerateInputError("znormalize: no voxel with value > 0");
    const double mean = mask.select(in.cast<double>(), 0.0).sum() / double(n);
    const double var =
        mask.select((in.cast<double>() - mean).square(), 0.0).sum() / double(n);
    const double stddev = std::sqrt(var);
    if (stddev < 1e-8) {
      dst.setZero();
      continue;
    }
    dst = mask.select(((in.cast<double>() - mean) / stddev).cast<float>(), 0.0f);
  }
  return out;
}

namespace {

int axis_offset(int size, int target, double centre, bool has_fg, int bmin, int bmax) {
  if (size <= target) return -((target - size) / 2);
  if (!has_fg) centre = (size - 1) / 2.0;
  // Nearest integer start, ties toward the lower index.
  int start = int(std::ceil(centre - (target - 1) / 2.0 - 0.5));
  if (has_fg && bmax - bmin + 1 <= target) start = std::clamp(start, bmax - target + 1, bmin);
  return std::clamp(start, 0, size - target);
}

}  // namespace

Voxel crop_offset(const BinaryMask& m, Extent3 target) {
  const Extent3 e = m.extent();
  std::array<double, 3> sum{};
  Voxel lo{e.h, e.w, e.d}, hi{-1, -1, -1};
  std::int64_t n = 0;
  for (std::int64_t off = 0; off < e.count(); ++off) {
    if (!m.data.values()[off]) continue;
    const Voxel v = e.voxel(off);
    for (int a = 0; a < 3; ++a) {
      sum[a] += v[a];
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
    ++n;
  }
  Voxel offset{};
  for (int a = 0; a < 3; ++a)
    offset[a] = axis_offset(e[a], target[a], n ? sum[a] / double(n) : 0.0, n > 0, lo[a], hi[a]);
  return offset;
}

template <typename Scalar>
Grid<Scalar> extract(const Grid<Scalar>& g, const Voxel& origin, Extent3 extent, Scalar fill) {
  Grid<Scalar> out(g.channels(), extent, fill);
  const Extent3 src = g.extent();
  for (int c = 0; c < g.channels(); ++c)
    for (int i = 0; i < extent.h; ++i) {
      const int si = i + origin[0];
      if (si < 0 || si >= src.h) continue;
      for (int j = 0; j < extent.w; ++j) {
        const int sj = j + origin[1];
        if (sj < 0 || sj >= src.w) continue;
        const int k0 = std::max(0, -origin[2]);
        const int k1 = std::min(extent.d, src.d - origin[2]);
        for (int k = k0; k < k1; ++k) out(c, i, j, k) = g(c, si, sj, k + origin[2]);
      }
    }
  return out;
}

template <typename Scalar>
Grid<Scalar> place_back(const Grid<Scalar>& g, Extent3 original, const Voxel& offset,
                        Scalar fill) {
  return extract(g, Voxel{-offset[0], -offset[1], -offset[2]}, original, fill);
}

CropResult crop_or_pad(const Volume& v, const BinaryMask& m, Extent3 target) {
  if (!(v.extent() == m.extent())) throw ShapeError("crop_or_pad: volume and mask shapes differ");
  CropResult r;
  r.offset = crop_offset(m, target);
  r.volume.data = extract(v.data, r.offset, target, 0.0f);
  r.volume.spacing = v.spacing;
  r.volume.modality = v.modality;
  r.mask.data = extract(m.data, r.offset, target, std::uint8_t(0));
  r.mask.spacing = m.spacing;
  return r;
}

AugmentParams draw_augmentation(std::uint64_t seed) {
  // mt19937_64 output is fully specified by the standard; the bit slicing keeps
  // the draw identical across standard library implementations.
  std::mt19937_64 rng(seed);
  const std::uint64_t r = rng();
  AugmentParams p;
  for (int a = 0; a < 3; ++a) p.flip[a] = (r >> a) & 1u;
  p.quarter_turns = int((r >> 3) & 3u);
  p.rotation_axis = int((r >> 8) % 3u);
  return p;
}

namespace {

template <typename Scalar>
Grid<Scalar> flip_axis(const Grid<Scalar>& g, int axis) {
  Grid<Scalar> out(g.channels(), g.extent());
  const Extent3 e = g.extent();
  for (int c = 0; c < g.channels(); ++c)
    for (int i = 0; i < e.h; ++i)
      for (int j = 0; j < e.w; ++j)
        for (int k = 0; k < e.d; ++k) {
          Voxel s{i, j, k};
          s[axis] = e[axis] - 1 - s[axis];
          out(c, i, j, k) = g(c, s[0], s[1], s[2]);
        }
  return out;
}

std::pair<int, int> rotation_plane(int axis) {
  return axis == 0 ? std::pair{1, 2} : (axis == 1 ? std::pair{0, 2} : std::pair{0, 1});
}

// One quarter turn in plane (p, q): out[.., a, .., b, ..] = in[.., b, .., n_q - 1 - a, ..]
// where n_q is the input extent along q.
template <typename Scalar>
Grid<Scalar> rot90(const Grid<Scalar>& g, int p, int q) {
  const Extent3 e = g.extent();
  std::array<int, 3> dims{e.h, e.w, e.d};
  std::swap(dims[p], dims[q]);
  const Extent3 oe{dims[0], dims[1], dims[2]};
  Grid<Scalar> out(g.channels(), oe);
  for (int c = 0; c < g.channels(); ++c)
    for (int i = 0; i < oe.h; ++i)
      for (int j = 0; j < oe.w; ++j)
        for (int k = 0; k < oe.d; ++k) {
          const Voxel o{i, j, k};
          Voxel s = o;
          s[p] = o[q];
          s[q] = e[q] - 1 - o[p];
          out(c, i, j, k) = g(c, s[0], s[1], s[2]);
        }
  return out;
}

Spacing augment_spacing(Spacing s, const AugmentParams& p) {
  if (p.quarter_turns % 2 == 1) {
    auto [a, b] = rotation_plane(p.rotation_axis);
    std::array<double, 3> v{s.sx, s.sy, s.sz};
    std::swap(v[a], v[b]);
    s = {v[0], v[1], v[2]};
  }
  return s;
}

}  // namespace

template <typename Scalar>
Grid<Scalar> apply_augmentation(const Grid<Scalar>& g, const AugmentParams& p) {
  Grid<Scalar> out = g;
  for (int a = 0; a < 3; ++a)
    if (p.flip[a]) out = flip_axis(out, a);
  const auto [pa, qa] = rotation_plane(p.rotation_axis);
  for (int t = 0; t < p.quarter_turns; ++t) out = rot90(out, pa, qa);
  return out;
}

Augmented augment(const Volume& v, const BinaryMask& m, std::uint64_t seed) {
  if (!(v.extent() == m.extent())) throw ShapeError("augment: volume and mask shapes differ");
  Augmented r;
  r.params = draw_augmentation(seed);
  r.volume.data = apply_augmentation(v.data, r.params);
  r.volume.spacing = augment_spacing(v.spacing, r.params);
  r.volume.modality = v.modality;
  r.mask.data = apply_augmentation(m.data, r.params);
  r.mask.spacing = augment_spacing(m.spacing, r.params);
  return r;
}

template Grid<float> extract(const Grid<float>&, const Voxel&, Extent3, float);
template Grid<std::uint8_t> extract(const Grid<std::uint8_t>&, const Voxel&, Extent3,
                                    std::uint8_t);
template Grid<float> place_back(const Grid<float>&, Extent3, const Voxel&, float);
template Grid<std::uint8_t> place_back(const Grid<std::uint8_t>&, Extent3, const Voxel&,
                                       std::uint8_t);
template Grid<float> apply_augmentation(const Grid<float>&, const AugmentParams&);
template Grid<std::uint8_t> apply_augmentation(const Grid<std::uint8_t>&, const AugmentParams&);

}  // namespace sat3d::volgrid
