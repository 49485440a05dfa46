#pragma once

#include <vector>

#include "sat3d/netblocks/config.hpp"
#include "sat3d/netblocks/layers.hpp"

namespace sat3d::netblocks {

// Feature grid produced by the image encoder: (h*w*d) x E tokens in C order.
struct ImageEmbedding {
  nn::Var features;
  Extent3 extent;
  Spacing source_spacing = isotropic(1.0);
  int channels() const { return int(features.cols()); }
};

// Token permutation that groups a grid into (optionally cyclically shifted)
// windows. Row r of the windowed layout is row `order[r]` of the grid layout.
struct WindowLayout {
  Extent3 window;       // effective window per axis
  Voxel shift{};        // effective shift per axis
  int tokens = 0;       // voxels per window
  nn::IndexList order;  // windowed row -> grid row
  nn::IndexList inverse;
  nn::IndexList regions;       // per windowed row, empty when unshifted
  nn::IndexList bias_index;    // tokens*tokens rows into the relative bias table
};

WindowLayout make_window_layout(const Extent3& grid, int window, bool shifted);

class SwinBlock {
 public:
  SwinBlock() = default;
  SwinBlock(nn::ParameterStore& store, const std::string& name, int channels, int heads,
            int window, double mlp_ratio, std::uint64_t seed);
  nn::Var operator()(const nn::Var& x, const WindowLayout& layout) const;

 private:
  int heads_ = 1;
  int channels_ = 0;
  LayerNorm norm1_, norm2_;
  Linear qkv_, proj_, fc1_, fc2_;
  nn::Var bias_table_;  // (2w-1)^3 x heads
};

// Concatenates each 2x2x2 neighbourhood and projects 8C -> 2C.
class PatchMerging {
 public:
  PatchMerging() = default;
  PatchMerging(nn::ParameterStore& store, const std::string& name, int channels,
               std::uint64_t seed);
  nn::Var operator()(const nn::Var& x, const Extent3& in) const;

 private:
  LayerNorm norm_;
  Linear reduction_;
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::uint64_t seed);
  // image: (H*W*D) x 1 intensities.
  ImageEmbedding operator()(const nn::Var& image, const Extent3& extent) const;
  // Per-stage outputs, used to check the channel-doubling contract.
  std::vector<ImageEmbedding> stages(const nn::Var& image, const Extent3& extent) const;

 private:
  EncoderConfig cfg_;
  Conv3d patch_embed_;
  LayerNorm patch_norm_;
  std::vector<std::vector<SwinBlock>> blocks_;
  std::vector<PatchMerging> merges_;
  LayerNorm out_norm_;
};

}  // namespace sat3d::netblocks
