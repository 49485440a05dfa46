#pragma once

#include <vector>

#include "sat3d/netblocks/config.hpp"
#include "sat3d/netblocks/layers.hpp"

namespace sat3d::netblocks {

// Voxel-wise real/fake scorer: strided conv encoder, trilinear-upsampling conv
// decoder, logistic output at the input resolution.
class Critic {
 public:
  Critic() = default;
  Critic(nn::ParameterStore& store, const CriticConfig& cfg, std::uint64_t seed);
  // prob: (H*W*D) x 1 in [0,1]  ->  (H*W*D) x 1 in [0,1]
  nn::Var operator()(const nn::Var& prob, const Extent3& extent) const;

 private:
  float leak_ = 0.2f;
  std::vector<Conv3d> down_, up_;
  Linear head_;
};

// Z: 1 where confidence > T. T must lie in (0, 1).
BinaryMask binarize_confidence(const ConfidenceMap& c, double T = 0.3);

}  // namespace sat3d::netblocks
