#pragma once

#include <cstdint>
#include <vector>

#include "sat3d/grid.hpp"

namespace sat3d::volgrid {

// Synthetic lesion phantom: ellipsoidal blobs whose radius is modulated by a
// low-frequency angular sinusoid (the "boundary noise"), on a flat background.
struct PhantomSpec {
  Extent3 grid = cube(64);
  int min_lesions = 1;
  int max_lesions = 1;
  double min_radius = 6.0;  // voxels, per ellipsoid semi-axis
  double max_radius = 12.0;
  double boundary_noise = 0.15;  // relative radial perturbation amplitude
  double contrast = 1.0;
  double background = 1.0;
  double image_noise = 0.1;  // std of additive Gaussian intensity noise
  Spacing spacing = isotropic(1.0);
  std::uint64_t seed = 0;
};

struct Lesion {
  std::array<double, 3> centre{};
  std::array<double, 3> radii{};
  int freq_polar = 2;
  int freq_azimuth = 3;
  double phase_polar = 0.0;
  double phase_azimuth = 0.0;
};

struct Phantom {
  Volume volume;
  BinaryMask mask;
  std::vector<Lesion> lesions;
};

// Throws SpecError when the spec is inconsistent or a lesion cannot fit.
Phantom generate_phantom(const PhantomSpec& spec);

// Membership test for a single lesion (exposed for oracle tests).
bool lesion_contains(const Lesion& l, double boundary_noise, double x, double y, double z);

}  // namespace sat3d::volgrid
