#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "sat3d/grid.hpp"

namespace sat3d::netblocks {

// Hierarchical shifted-window encoder. Stage i (0-based) runs at
// embed_dim * 2^i channels on a grid downsampled by patch_size * 2^i.
struct EncoderConfig {
  int patch_size = 2;
  int embed_dim = 48;
  std::vector<int> depths{2, 2, 2, 2};
  std::vector<int> heads{3, 6, 12, 24};
  int window = 4;
  double mlp_ratio = 4.0;

  int stages() const { return int(depths.size()); }
  int downsample() const { return patch_size << (stages() - 1); }
  int stage_channels(int stage) const { return embed_dim << stage; }
  int output_channels() const { return stage_channels(stages() - 1); }
  Extent3 output_extent(const Extent3& input) const;
  // Throws ConfigError when `input` violates the patch/window divisibility rules.
  void validate(const Extent3& input) const;
};

struct PromptEncoderConfig {
  int mask_hidden = 4;    // channels after the first dense downscaling conv
  int mask_channels = 16; // channels after the second
  double fourier_scale = 1.0;
};

struct DecoderConfig {
  int layers = 2;
  int heads = 8;
  int mlp_dim = 1536;
  int cross_downsample = 2;
};

struct CriticConfig {
  std::vector<int> channels{8, 16, 32, 64};
  float leak = 0.2f;
};

struct ModelConfig {
  Extent3 crop = cube(128);
  EncoderConfig encoder;
  PromptEncoderConfig prompt;
  DecoderConfig decoder;
  CriticConfig critic;
  std::uint64_t seed = 0;           // parameter initialisation
  std::uint64_t fourier_seed = 17;  // fixed point/grid positional encoding

  int embedding_dim() const { return encoder.output_channels(); }
  Extent3 embedding_extent() const { return encoder.output_extent(crop); }
  void validate() const;

  // A small configuration for fast tests and desk-scale runs at the given crop.
  static ModelConfig desk(int crop_side);
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace sat3d::netblocks
