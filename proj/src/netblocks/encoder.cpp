#include "sat3d/netblocks/encoder.hpp"

#include <algorithm>
#include <memory>

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

using nn::Matrix;
using nn::Var;

namespace {

int region_of(int s, int n, int w, int shift) {
  if (shift == 0) return 0;
  if (s < n - w) return 0;
  if (s < n - shift) return 1;
  return 2;
}

}  // namespace

WindowLayout make_window_layout(const Extent3& grid, int window, bool shifted) {
  WindowLayout L;
  int win[3], sh[3];
  bool any_shift = false;
  for (int a = 0; a < 3; ++a) {
    // Axes no longer than the window are covered by one window and never shifted.
    win[a] = std::min(window, grid[a]);
    sh[a] = (shifted && grid[a] > window) ? window / 2 : 0;
    any_shift = any_shift || sh[a] > 0;
    if (grid[a] % win[a] != 0)
      throw ConfigError("grid side " + std::to_string(grid[a]) + " not divisible by window " +
                        std::to_string(win[a]));
  }
  L.window = {win[0], win[1], win[2]};
  L.shift = {sh[0], sh[1], sh[2]};
  L.tokens = win[0] * win[1] * win[2];
  const int nw[3] = {grid.h / win[0], grid.w / win[1], grid.d / win[2]};

  auto order = std::make_shared<std::vector<int>>(grid.count());
  auto inverse = std::make_shared<std::vector<int>>(grid.count());
  auto regions = std::make_shared<std::vector<int>>();
  if (any_shift) regions->resize(grid.count());
  std::int64_t r = 0;
  for (int wi = 0; wi < nw[0]; ++wi)
    for (int wj = 0; wj < nw[1]; ++wj)
      for (int wk = 0; wk < nw[2]; ++wk)
        for (int li = 0; li < win[0]; ++li)
          for (int lj = 0; lj < win[1]; ++lj)
            for (int lk = 0; lk < win[2]; ++lk, ++r) {
              const int s[3] = {wi * win[0] + li, wj * win[1] + lj, wk * win[2] + lk};
              // Shifted grid position s reads the original at (s + shift) mod n.
              Voxel src;
              for (int a = 0; a < 3; ++a) src[a] = (s[a] + sh[a]) % grid[a];
              const int off = int(grid.offset(src));
              (*order)[r] = off;
              (*inverse)[off] = int(r);
              if (any_shift) {
                int id = 0;
                for (int a = 0; a < 3; ++a) id = id * 3 + region_of(s[a], grid[a], win[a], sh[a]);
                (*regions)[r] = id;
              }
            }
  L.order = order;
  L.inverse = inverse;
  if (any_shift) L.regions = regions;

  // Relative offsets index a (2*window-1)^3 table regardless of the effective window.
  const int span = 2 * window - 1;
  auto bias_index = std::make_shared<std::vector<int>>();
  bias_index->reserve(std::size_t(L.tokens) * L.tokens);
  for (int p = 0; p < L.tokens; ++p) {
    const Voxel a = L.window.voxel(p);
    for (int q = 0; q < L.tokens; ++q) {
      const Voxel b = L.window.voxel(q);
      const int di = a[0] - b[0] + window - 1;
      const int dj = a[1] - b[1] + window - 1;
      const int dk = a[2] - b[2] + window - 1;
      bias_index->push_back((di * span + dj) * span + dk);
    }
  }
  L.bias_index = bias_index;
  return L;
}

SwinBlock::SwinBlock(nn::ParameterStore& store, const std::string& name, int channels, int heads,
                     int window, double mlp_ratio, std::uint64_t seed)
    : heads_(heads), channels_(channels) {
  if (channels % heads != 0) throw ConfigError("channels not divisible by heads in " + name);
  const int hidden = int(channels * mlp_ratio);
  norm1_ = LayerNorm(store, name + ".norm1", channels);
  qkv_ = Linear(store, name + ".attn.qkv", channels, 3 * channels, seed, Init::TruncNormal02);
  const int span = 2 * window - 1;
  bias_table_ = store.add(name + ".attn.relative_position_bias_table",
                          nn::truncated_normal(span * span * span, heads, 0.02f, seed,
                                               name + ".attn.relative_position_bias_table"));
  proj_ = Linear(store, name + ".attn.proj", channels, channels, seed, Init::TruncNormal02);
  norm2_ = LayerNorm(store, name + ".norm2", channels);
  fc1_ = Linear(store, name + ".mlp.fc1", channels, hidden, seed, Init::TruncNormal02);
  fc2_ = Linear(store, name + ".mlp.fc2", hidden, channels, seed, Init::TruncNormal02);
}

Var SwinBlock::operator()(const Var& x, const WindowLayout& layout) const {
  const nn::Index C = channels_;
  Var h = nn::gather_rows(norm1_(x), layout.order);
  Var qkv = qkv_(h);
  nn::AttentionBias bias{bias_table_, layout.bias_index};
  Var a = nn::attention(nn::slice_cols(qkv, 0, C), nn::slice_cols(qkv, C, C),
                        nn::slice_cols(qkv, 2 * C, C), heads_, layout.tokens, layout.tokens,
                        &bias, layout.regions);
  a = nn::gather_rows(proj_(a), layout.inverse);
  Var y = nn::add(x, a);
  return nn::add(y, fc2_(nn::gelu(fc1_(norm2_(y)))));
}

PatchMerging::PatchMerging(nn::ParameterStore& store, const std::string& name, int channels,
                           std::uint64_t seed) {
  norm_ = LayerNorm(store, name + ".norm", 8 * channels);
  reduction_ = Linear(store, name + ".reduction", 8 * channels, 2 * channels, seed,
                      Init::TruncNormal02, false);
}

Var PatchMerging::operator()(const Var& x, const Extent3& in) const {
  if (in.h % 2 || in.w % 2 || in.d % 2) throw ConfigError("patch merging needs even grid sides");
  const Extent3 out = scaled(in, 1, 2);
  auto idx = std::make_shared<std::vector<int>>();
  idx->reserve(in.count());
  for (std::int64_t o = 0; o < out.count(); ++o) {
    const Voxel v = out.voxel(o);
    for (int s = 0; s < 8; ++s)
      idx->push_back(int(in.offset(2 * v[0] + (s >> 2), 2 * v[1] + ((s >> 1) & 1), 2 * v[2] + (s & 1))));
  }
  Var g = nn::reshape(nn::gather_rows(x, idx), out.count(), 8 * x.cols());
  return reduction_(norm_(g));
}

ImageEncoder::ImageEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg.stages() < 1 || cfg.heads.size() != cfg.depths.size())
    throw ConfigError("encoder depths and heads must have the same non-zero length");
  const std::string p = "encoder";
  patch_embed_ = Conv3d(store, p + ".patch_embed.proj", 1, cfg.embed_dim,
                        {cfg.patch_size, cfg.patch_size, 0}, seed);
  patch_norm_ = LayerNorm(store, p + ".patch_embed.norm", cfg.embed_dim);
  for (int s = 0; s < cfg.stages(); ++s) {
    const int c = cfg.stage_channels(s);
    std::vector<SwinBlock> stage;
    for (int b = 0; b < cfg.depths[s]; ++b)
      stage.emplace_back(store,
                         p + ".stage" + std::to_string(s) + ".block" + std::to_string(b), c,
                         cfg.heads[s], cfg.window, cfg.mlp_ratio, seed);
    blocks_.push_back(std::move(stage));
    if (s + 1 < cfg.stages())
      merges_.emplace_back(store, p + ".stage" + std::to_string(s) + ".downsample", c, seed);
  }
  out_norm_ = LayerNorm(store, p + ".norm", cfg.output_channels());
}

std::vector<ImageEmbedding> ImageEncoder::stages(const Var& image, const Extent3& extent) const {
  cfg_.validate(extent);
  if (image.rows() != extent.count() || image.cols() != 1)
    throw ShapeError("encoder expects a single-channel volume");
  std::vector<ImageEmbedding> outs;
  Extent3 e = scaled(extent, 1, cfg_.patch_size);
  Var x = patch_norm_(patch_embed_(image, extent));
  for (int s = 0; s < cfg_.stages(); ++s) {
    const WindowLayout plain = make_window_layout(e, cfg_.window, false);
    const WindowLayout shifted = make_window_layout(e, cfg_.window, true);
    for (std::size_t b = 0; b < blocks_[s].size(); ++b)
      x = blocks_[s][b](x, b % 2 == 0 ? plain : shifted);
    outs.push_back({x, e});
    if (s + 1 < cfg_.stages()) {
      x = merges_[s](x, e);
      e = scaled(e, 1, 2);
    }
  }
  outs.back().features = out_norm_(outs.back().features);
  return outs;
}

ImageEmbedding ImageEncoder::operator()(const Var& image, const Extent3& extent) const {
  return stages(image, extent).back();
}

}  // namespace sat3d::netblocks
