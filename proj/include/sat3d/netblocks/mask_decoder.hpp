#pragma once

#include <vector>

#include "sat3d/netblocks/config.hpp"
#include "sat3d/netblocks/encoder.hpp"
#include "sat3d/netblocks/layers.hpp"
#include "sat3d/netblocks/prompt_encoder.hpp"

namespace sat3d::netblocks {

// Projected multi-head attention; internal width is E / downsample.
class ProjectedAttention {
 public:
  ProjectedAttention() = default;
  ProjectedAttention(nn::ParameterStore& store, const std::string& name, int width, int heads,
                     int downsample, std::uint64_t seed);
  nn::Var operator()(const nn::Var& q, const nn::Var& k, const nn::Var& v) const;

 private:
  int heads_ = 1;
  Linear q_, k_, v_, out_;
};

// One layer of the two-way transformer: token self-attention, token-to-image
// cross-attention, token MLP, image-to-token cross-attention.
class TwoWayLayer {
 public:
  TwoWayLayer() = default;
  TwoWayLayer(nn::ParameterStore& store, const std::string& name, const DecoderConfig& cfg,
              int width, bool skip_first_pe, std::uint64_t seed);
  void operator()(nn::Var& queries, nn::Var& keys, const nn::Var& query_pe,
                  const nn::Var& key_pe) const;

 private:
  bool skip_first_pe_ = false;
  ProjectedAttention self_attn_, token_to_image_, image_to_token_;
  LayerNorm norm1_, norm2_, norm3_, norm4_;
  Linear mlp1_, mlp2_;
};

class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(nn::ParameterStore& store, const ModelConfig& cfg);
  // Returns crop-resolution logits, (H*W*D) x 1.
  nn::Var operator()(const ImageEmbedding& image, const PromptEmbedding& prompts,
                     const nn::Var& image_pe) const;

 private:
  Extent3 crop_;
  int width_ = 0;
  nn::Var mask_token_;
  std::vector<TwoWayLayer> layers_;
  ProjectedAttention final_attn_;
  LayerNorm final_norm_;
  ConvTranspose2 up1_, up2_;
  LayerNorm up_norm_;
  Linear hyper1_, hyper2_, hyper3_;
};

}  // namespace sat3d::netblocks
