#include "sat3d/netblocks/mask_decoder.hpp"

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

using nn::Matrix;
using nn::Var;

ProjectedAttention::ProjectedAttention(nn::ParameterStore& store, const std::string& name,
                                       int width, int heads, int downsample, std::uint64_t seed)
    : heads_(heads) {
  const int inner = width / downsample;
  q_ = Linear(store, name + ".q_proj", width, inner, seed);
  k_ = Linear(store, name + ".k_proj", width, inner, seed);
  v_ = Linear(store, name + ".v_proj", width, inner, seed);
  out_ = Linear(store, name + ".out_proj", inner, width, seed);
}

Var ProjectedAttention::operator()(const Var& q, const Var& k, const Var& v) const {
  return out_(nn::attention(q_(q), k_(k), v_(v), heads_, q.rows(), k.rows()));
}

TwoWayLayer::TwoWayLayer(nn::ParameterStore& store, const std::string& name,
                         const DecoderConfig& cfg, int width, bool skip_first_pe,
                         std::uint64_t seed)
    : skip_first_pe_(skip_first_pe) {
  self_attn_ = ProjectedAttention(store, name + ".self_attn", width, cfg.heads, 1, seed);
  norm1_ = LayerNorm(store, name + ".norm1", width);
  token_to_image_ = ProjectedAttention(store, name + ".cross_attn_token_to_image", width,
                                       cfg.heads, cfg.cross_downsample, seed);
  norm2_ = LayerNorm(store, name + ".norm2", width);
  mlp1_ = Linear(store, name + ".mlp.lin1", width, cfg.mlp_dim, seed);
  mlp2_ = Linear(store, name + ".mlp.lin2", cfg.mlp_dim, width, seed);
  norm3_ = LayerNorm(store, name + ".norm3", width);
  image_to_token_ = ProjectedAttention(store, name + ".cross_attn_image_to_token", width,
                                       cfg.heads, cfg.cross_downsample, seed);
  norm4_ = LayerNorm(store, name + ".norm4", width);
}

void TwoWayLayer::operator()(Var& queries, Var& keys, const Var& query_pe,
                             const Var& key_pe) const {
  if (skip_first_pe_) {
    queries = self_attn_(queries, queries, queries);
  } else {
    Var q = nn::add(queries, query_pe);
    queries = nn::add(queries, self_attn_(q, q, queries));
  }
  queries = norm1_(queries);

  Var q = nn::add(queries, query_pe);
  Var k = nn::add(keys, key_pe);
  queries = norm2_(nn::add(queries, token_to_image_(q, k, keys)));

  queries = norm3_(nn::add(queries, mlp2_(nn::relu(mlp1_(queries)))));

  q = nn::add(queries, query_pe);
  keys = norm4_(nn::add(keys, image_to_token_(k, q, queries)));
}

MaskDecoder::MaskDecoder(nn::ParameterStore& store, const ModelConfig& cfg)
    : crop_(cfg.crop), width_(cfg.embedding_dim()) {
  const std::string p = "decoder";
  const std::uint64_t seed = cfg.seed;
  mask_token_ = store.add(p + ".mask_token",
                          nn::truncated_normal(1, width_, 1.0f, seed, p + ".mask_token"));
  for (int l = 0; l < cfg.decoder.layers; ++l)
    layers_.emplace_back(store, p + ".transformer.layer" + std::to_string(l), cfg.decoder,
                         width_, l == 0, seed);
  final_attn_ = ProjectedAttention(store, p + ".transformer.final_attn_token_to_image", width_,
                                   cfg.decoder.heads, cfg.decoder.cross_downsample, seed);
  final_norm_ = LayerNorm(store, p + ".transformer.norm_final", width_);
  up1_ = ConvTranspose2(store, p + ".upscale.0", width_, width_ / 4, seed);
  up_norm_ = LayerNorm(store, p + ".upscale.norm", width_ / 4);
  up2_ = ConvTranspose2(store, p + ".upscale.1", width_ / 4, width_ / 8, seed);
  hyper1_ = Linear(store, p + ".hypernet.0", width_, width_, seed);
  hyper2_ = Linear(store, p + ".hypernet.1", width_, width_, seed);
  hyper3_ = Linear(store, p + ".hypernet.2", width_, width_ / 8, seed);
}

Var MaskDecoder::operator()(const ImageEmbedding& image, const PromptEmbedding& prompts,
                            const Var& image_pe) const {
  if (image.extent != prompts.extent || image.features.rows() != prompts.dense.rows() ||
      image.features.cols() != width_ || prompts.dense.cols() != width_ ||
      image_pe.rows() != image.features.rows())
    throw ShapeError("image and prompt embeddings are not spatially compatible");

  Var tokens = prompts.sparse.defined() ? nn::concat_rows({mask_token_, prompts.sparse})
                                        : mask_token_;
  Var queries = tokens;
  Var keys = nn::add(image.features, prompts.dense);
  for (const auto& layer : layers_) layer(queries, keys, tokens, image_pe);
  Var q = nn::add(queries, tokens);
  Var k = nn::add(keys, image_pe);
  queries = final_norm_(nn::add(queries, final_attn_(q, k, keys)));

  const Extent3 e1 = scaled(image.extent, 2), e2 = scaled(image.extent, 4);
  Var up = nn::gelu(up_norm_(up1_(keys, image.extent)));
  up = nn::gelu(up2_(up, e1));
  Var hyper = hyper3_(nn::relu(hyper2_(nn::relu(hyper1_(nn::slice_rows(queries, 0, 1))))));
  Var low = nn::matmul(up, reshape(hyper, hyper.cols(), 1));
  return nn::resize_trilinear(low, e2, crop_);
}

}  // namespace sat3d::netblocks
