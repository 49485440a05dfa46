#include "sat3d/volgrid/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace sat3d::volgrid {

namespace {

// Uniform double in [0, 1) from the top 53 bits; portable across stdlibs.
double unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

// Box-Muller; deterministic given the engine.
double normal(std::mt19937_64& rng) {
  const double u1 = std::max(unit(rng), 1e-300);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void validate(const PhantomSpec& s) {
  if (s.grid.h < 1 || s.grid.w < 1 || s.grid.d < 1) throw SpecError("phantom grid must be >= 1");
  if (s.min_lesions < 0 || s.max_lesions < s.min_lesions)
    throw SpecError("phantom lesion count range is invalid");
  if (s.min_radius < 1.0 || s.max_radius < s.min_radius)
    throw SpecError("phantom radius range must satisfy 1 <= min <= max");
  if (s.boundary_noise < 0.0 || s.boundary_noise >= 1.0)
    throw SpecError("boundary noise must be in [0, 1)");
  if (s.image_noise < 0.0) throw SpecError("image noise must be >= 0");
  if (!s.spacing.valid()) throw SpecError("phantom spacing must be positive");
  const double reach = s.max_radius * (1.0 + s.boundary_noise);
  for (int a = 0; a < 3; ++a)
    if (2.0 * reach + 1.0 > s.grid[a])
      throw SpecError("lesion radius does not fit inside the phantom grid");
}

}  // namespace

bool lesion_contains(const Lesion& l, double boundary_noise, double x, double y, double z) {
  const double u = (x - l.centre[0]) / l.radii[0];
  const double v = (y - l.centre[1]) / l.radii[1];
  const double w = (z - l.centre[2]) / l.radii[2];
  const double r2 = u * u + v * v + w * w;
  double scale = 1.0;
  if (boundary_noise > 0.0 && r2 > 0.0) {
    const double polar = std::acos(std::clamp(w / std::sqrt(r2), -1.0, 1.0));
    const double azimuth = std::atan2(v, u);
    scale += boundary_noise * std::sin(l.freq_polar * polar + l.phase_polar) *
             std::cos(l.freq_azimuth * azimuth + l.phase_azimuth);
  }
  return r2 <= scale * scale;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  const int count =
      spec.min_lesions + int(rng() % std::uint64_t(spec.max_lesions - spec.min_lesions + 1));

  Phantom p;
  const double reach_scale = 1.0 + spec.boundary_noise;
  for (int n = 0; n < count; ++n) {
    Lesion l;
    for (int a = 0; a < 3; ++a) l.radii[a] = uniform(rng, spec.min_radius, spec.max_radius);
    for (int a = 0; a < 3; ++a) {
      const double reach = l.radii[a] * reach_scale;
      l.centre[a] = uniform(rng, reach, spec.grid[a] - 1 - reach);
    }
    l.freq_polar = 2 + int(rng() % 2);
    l.freq_azimuth = 2 + int(rng() % 3);
    l.phase_polar = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    l.phase_azimuth = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    p.lesions.push_back(l);
  }

  const Extent3 e = spec.grid;
  p.volume.data = ScalarGrid(1, e, float(spec.background));
  p.volume.spacing = spec.spacing;
  p.volume.modality = "phantom";
  p.mask = BinaryMask(e, spec.spacing);

  for (const Lesion& l : p.lesions) {
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      const double reach = l.radii[a] * reach_scale;
      lo[a] = std::max(0, int(std::floor(l.centre[a] - reach)));
      hi[a] = std::min(e[a] - 1, int(std::ceil(l.centre[a] + reach)));
    }
    for (int i = lo[0]; i <= hi[0]; ++i)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int k = lo[2]; k <= hi[2]; ++k)
          if (lesion_contains(l, spec.boundary_noise, i, j, k)) p.mask.at({i, j, k}) = 1;
  }

  auto& vals = p.volume.data.values();
  const auto& labels = p.mask.data.values();
  for (std::int64_t n = 0; n < vals.size(); ++n) {
    if (labels[n]) vals[n] += float(spec.contrast);
    if (spec.image_noise > 0.0) vals[n] += float(spec.image_noise * normal(rng));
  }
  return p;
}

}  // namespace sat3d::volgrid
