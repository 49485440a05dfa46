#include "sat3d/netblocks/config.hpp"

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

Extent3 EncoderConfig::output_extent(const Extent3& input) const {
  const int f = downsample();
  return {input.h / f, input.w / f, input.d / f};
}

void EncoderConfig::validate(const Extent3& input) const {
  if (patch_size < 1 || embed_dim < 1 || window < 1 || stages() < 1)
    throw ConfigError("encoder sizes must be positive");
  if (heads.size() != depths.size()) throw ConfigError("encoder depths/heads length mismatch");
  for (int s = 0; s < stages(); ++s)
    if (heads[s] < 1 || stage_channels(s) % heads[s] != 0)
      throw ConfigError("stage " + std::to_string(s) + " channels not divisible by heads");
  const int f = downsample();
  for (int a = 0; a < 3; ++a) {
    if (input[a] % f != 0)
      throw ConfigError("input side " + std::to_string(input[a]) + " not divisible by " +
                        std::to_string(f));
    for (int s = 0; s < stages(); ++s) {
      const int g = input[a] / (patch_size << s);
      if (g > window && g % window != 0)
        throw ConfigError("stage " + std::to_string(s) + " grid side " + std::to_string(g) +
                          " not divisible by window " + std::to_string(window));
    }
  }
}

void ModelConfig::validate() const {
  encoder.validate(crop);
  const int e = embedding_dim();
  if (e % 8 != 0) throw ConfigError("embedding width must be divisible by 8");
  if (decoder.layers < 1 || decoder.heads < 1 || decoder.cross_downsample < 1)
    throw ConfigError("decoder sizes must be positive");
  if (e % decoder.heads != 0 || (e / decoder.cross_downsample) % decoder.heads != 0)
    throw ConfigError("decoder width not divisible by heads");
  if (e % 2 != 0) throw ConfigError("embedding width must be even for Fourier features");
  if (critic.channels.empty()) throw ConfigError("critic needs at least one level");
  const int down = 1 << critic.channels.size();
  for (int a = 0; a < 3; ++a)
    if (crop[a] % down != 0) throw ConfigError("crop not divisible by critic downsampling");
  // The mask decoder upsamples the embedding by 4 with two transposed convolutions.
  if (encoder.downsample() < 4) throw ConfigError("encoder downsampling must be at least 4");
}

ModelConfig ModelConfig::desk(int crop_side) {
  ModelConfig c;
  c.crop = cube(crop_side);
  return c;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"patch_size", c.patch_size}, {"embed_dim", c.embed_dim}, {"depths", c.depths},
       {"heads", c.heads},           {"window", c.window},       {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depths = j.value("depths", c.depths);
  c.heads = j.value("heads", c.heads);
  c.window = j.value("window", c.window);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"crop", {c.crop.h, c.crop.w, c.crop.d}},
       {"encoder", c.encoder},
       {"prompt",
        {{"mask_hidden", c.prompt.mask_hidden},
         {"mask_channels", c.prompt.mask_channels},
         {"fourier_scale", c.prompt.fourier_scale}}},
       {"decoder",
        {{"layers", c.decoder.layers},
         {"heads", c.decoder.heads},
         {"mlp_dim", c.decoder.mlp_dim},
         {"cross_downsample", c.decoder.cross_downsample}}},
       {"critic", {{"channels", c.critic.channels}, {"leak", c.critic.leak}}},
       {"seed", c.seed},
       {"fourier_seed", c.fourier_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("crop")) {
    const auto& v = j.at("crop");
    c.crop = {v.at(0).get<int>(), v.at(1).get<int>(), v.at(2).get<int>()};
  }
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("prompt")) {
    const auto& p = j.at("prompt");
    c.prompt.mask_hidden = p.value("mask_hidden", c.prompt.mask_hidden);
    c.prompt.mask_channels = p.value("mask_channels", c.prompt.mask_channels);
    c.prompt.fourier_scale = p.value("fourier_scale", c.prompt.fourier_scale);
  }
  if (j.contains("decoder")) {
    const auto& d = j.at("decoder");
    c.decoder.layers = d.value("layers", c.decoder.layers);
    c.decoder.heads = d.value("heads", c.decoder.heads);
    c.decoder.mlp_dim = d.value("mlp_dim", c.decoder.mlp_dim);
    c.decoder.cross_downsample = d.value("cross_downsample", c.decoder.cross_downsample);
  }
  if (j.contains("critic")) {
    const auto& k = j.at("critic");
    c.critic.channels = k.value("channels", c.critic.channels);
    c.critic.leak = k.value("leak", c.critic.leak);
  }
  c.seed = j.value("seed", c.seed);
  c.fourier_seed = j.value("fourier_seed", c.fourier_seed);
}

}  // namespace sat3d::netblocks
