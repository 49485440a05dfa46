#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sat3d/netblocks/critic.hpp"
#include "sat3d/netblocks/encoder.hpp"
#include "sat3d/netblocks/mask_decoder.hpp"
#include "sat3d/netblocks/prompt_encoder.hpp"

namespace sat3d::netblocks {

// The four sub-networks sharing one parameter store. Parameter names start
// with "encoder.", "prompt.", "decoder." or "critic.".
class Sat3dNet {
 public:
  explicit Sat3dNet(const ModelConfig& cfg);
  Sat3dNet(const Sat3dNet&) = delete;
  Sat3dNet& operator=(const Sat3dNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  ImageEmbedding encode_image(const Volume& v) const;
  ImageEmbedding encode_image(const nn::Var& image) const;
  std::vector<ImageEmbedding> encoder_stages(const Volume& v) const;
  PromptEmbedding encode_prompts(const std::vector<PointPrompt>& points,
                                 const LabelGrid& prev_mask, const LabelGrid& prev_conf) const;
  // Crop-resolution logits, (H*W*D) x 1.
  nn::Var decode_mask(const ImageEmbedding& image, const PromptEmbedding& prompts) const;
  nn::Var critic_forward(const nn::Var& prob) const;

  // Graph-free conveniences.
  ScalarGrid predict_logits(const Volume& v, const std::vector<PointPrompt>& points,
                            const LabelGrid& prev_mask, const LabelGrid& prev_conf) const;
  ConfidenceMap critic_map(const ScalarGrid& prob) const;

 private:
  ModelConfig cfg_;
  nn::ParameterStore store_;
  ImageEncoder encoder_;
  PromptEncoder prompt_;
  MaskDecoder decoder_;
  Critic critic_;
};

nn::Var to_var(const ScalarGrid& g, bool requires_grad = false);
ScalarGrid to_grid(const nn::Matrix& column, const Extent3& extent);

// --- checkpoint archive ----------------------------------------------------
// "SAT3DCKPT1\n", u64 little-endian JSON length, JSON header
// {"config": ..., "tensors": [{"name", "rows", "cols", "offset"}]}, then raw
// float32 little-endian tensors at the given byte offsets after the header.
struct Archive {
  nlohmann::json config;
  std::vector<std::pair<std::string, nn::Matrix>> tensors;
  const nn::Matrix* find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const nlohmann::json& config,
                   const std::vector<std::pair<std::string, const nn::Matrix*>>& tensors);
Archive read_archive(const std::filesystem::path& path);

// Archive with every parameter and buffer of the model; `extra` is merged
// into the config block.
void save_model(const std::filesystem::path& path, const Sat3dNet& net,
                const nlohmann::json& extra = nlohmann::json::object());
// Copies archive tensors into a store. Missing names or shape mismatches
// raise CheckpointError.
void load_parameters(const Archive& archive, nn::ParameterStore& store);
std::unique_ptr<Sat3dNet> load_model(const std::filesystem::path& path);

}  // namespace sat3d::netblocks
