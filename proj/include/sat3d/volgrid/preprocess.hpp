#pragma once

#include <array>
#include <cstdint>

#include "sat3d/grid.hpp"

namespace sat3d::volgrid {

// Z-score normalisation over the voxels with value > 0, per channel. Voxels
// with value <= 0 are set to 0. A zero-variance channel maps to 0 as well.
Volume znormalize(const Volume& v);

struct CropResult {
  Volume volume;
  BinaryMask mask;
  // Input index = output index + offset (negative along padded axes).
  Voxel offset{};
};

// Crop (centred on the mask foreground centroid) or zero-pad symmetrically so
// the spatial extent equals `target`. Foreground is never cut away when its
// bounding box fits inside the target.
CropResult crop_or_pad(const Volume& v, const BinaryMask& m, Extent3 target);

// Computes only the placement offset crop_or_pad would use.
Voxel crop_offset(const BinaryMask& m, Extent3 target);

// Copies `g` into a grid of extent `original`, inverting crop_or_pad's placement.
// Voxels with no preimage are filled with `fill`.
template <typename Scalar>
Grid<Scalar> place_back(const Grid<Scalar>& g, Extent3 original, const Voxel& offset,
                        Scalar fill = Scalar(0));

// Extract a sub-grid starting at `origin` (may reach outside; outside reads `fill`).
template <typename Scalar>
Grid<Scalar> extract(const Grid<Scalar>& g, const Voxel& origin, Extent3 extent,
                     Scalar fill = Scalar(0));

struct AugmentParams {
  std::array<bool, 3> flip{false, false, false};
  int rotation_axis = 0;  // rotation happens in the plane orthogonal to this axis
  int quarter_turns = 0;  // 0..3

  bool identity() const {
    return !flip[0] && !flip[1] && !flip[2] && quarter_turns == 0;
  }
};

// Flip each axis with p = 0.5, then rotate by a uniformly drawn multiple of 90
// degrees about a uniformly drawn axis. Fully determined by `seed`.
AugmentParams draw_augmentation(std::uint64_t seed);

template <typename Scalar>
Grid<Scalar> apply_augmentation(const Grid<Scalar>& g, const AugmentParams& p);

struct Augmented {
  Volume volume;
  BinaryMask mask;
  AugmentParams params;
};

Augmented augment(const Volume& v, const BinaryMask& m, std::uint64_t seed);

}  // namespace sat3d::volgrid
