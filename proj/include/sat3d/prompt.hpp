#pragma once

#include <vector>

#include "sat3d/grid.hpp"

namespace sat3d {

struct PointPrompt {
  Voxel coord{};
  int label = 1;  // 1 positive (foreground), 0 negative
  friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

// Per-episode refinement state. At step 0 there are no points and both dense
// prompts are blank.
struct PromptState {
  std::vector<PointPrompt> points;
  BinaryMask prev_mask;      // previous prediction
  BinaryMask prev_conf_bin;  // previous critic confidence, binarised
  int step = 0;

  PromptState() = default;
  explicit PromptState(Extent3 extent, Spacing spacing = isotropic(1.0))
      : prev_mask(extent, spacing), prev_conf_bin(extent, spacing) {}
};

}  // namespace sat3d
