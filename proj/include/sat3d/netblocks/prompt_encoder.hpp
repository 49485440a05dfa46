#pragma once

#include <vector>

#include "sat3d/netblocks/config.hpp"
#include "sat3d/netblocks/layers.hpp"
#include "sat3d/prompt.hpp"

namespace sat3d::netblocks {

struct PromptEmbedding {
  nn::Var sparse;  // points x E, undefined when there are no points
  nn::Var dense;   // (h*w*d) x E on the embedding grid
  Extent3 extent;
  std::size_t points = 0;
};

// Fixed random Fourier features of coordinates in [0,1]^3.
class FourierEncoding {
 public:
  FourierEncoding() = default;
  FourierEncoding(nn::ParameterStore& store, const std::string& name, int width, double scale,
                  std::uint64_t seed);
  // coords: n x 3 in [0,1] -> n x width
  nn::Matrix operator()(const nn::Matrix& coords) const;
  // Encoding of every voxel centre of a grid, C order.
  nn::Matrix grid(const Extent3& e) const;

 private:
  nn::Var gaussian_;  // 3 x width/2
};

class PromptEncoder {
 public:
  PromptEncoder() = default;
  PromptEncoder(nn::ParameterStore& store, const ModelConfig& cfg);

  // Throws PromptBoundsError for points outside the crop. Empty (default
  // constructed) or all-zero dense inputs count as blank.
  PromptEmbedding operator()(const std::vector<PointPrompt>& points, const LabelGrid& prev_mask,
                             const LabelGrid& prev_conf) const;
  nn::Var point_tokens(const std::vector<PointPrompt>& points) const;
  nn::Var image_positional() const;  // positional encoding of the embedding grid
  bool blank(const LabelGrid& g) const;

 private:
  nn::Var downscale(const std::vector<Conv3d>& convs, const std::vector<LayerNorm>& norms,
                    const LabelGrid& g) const;

  Extent3 crop_, emb_;
  int width_ = 0;
  FourierEncoding pe_;
  nn::Var label_embed_[2];
  nn::Var no_mask_embed_;
  std::vector<Conv3d> mask_convs_, conf_convs_;
  std::vector<LayerNorm> mask_norms_, conf_norms_;
  Linear fuse_;
  nn::Matrix image_pe_;
};

}  // namespace sat3d::netblocks
