#include "sat3d/netblocks/prompt_encoder.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

using nn::Matrix;
using nn::Var;

FourierEncoding::FourierEncoding(nn::ParameterStore& store, const std::string& name, int width,
                                 double scale, std::uint64_t seed) {
  // Plain Gaussian (not truncated) frequencies; stored as a buffer so a
  // checkpoint carries the exact matrix.
  Matrix g(3, width / 2);
  std::mt19937_64 rng(nn::name_seed(seed, name));
  std::normal_distribution<double> n(0.0, scale);
  for (nn::Index i = 0; i < g.size(); ++i) g.data()[i] = float(n(rng));
  gaussian_ = store.add_buffer(name, std::move(g));
}

Matrix FourierEncoding::operator()(const Matrix& coords) const {
  const Matrix proj = ((2.0f * coords.array() - 1.0f).matrix() * gaussian_.value()) *
                      float(2.0 * std::numbers::pi);
  const nn::Index half = proj.cols();
  Matrix out(coords.rows(), 2 * half);
  out.leftCols(half) = proj.array().sin().matrix();
  out.rightCols(half) = proj.array().cos().matrix();
  return out;
}

Matrix FourierEncoding::grid(const Extent3& e) const {
  Matrix c(e.count(), 3);
  for (std::int64_t r = 0; r < e.count(); ++r) {
    const Voxel v = e.voxel(r);
    for (int a = 0; a < 3; ++a) c(r, a) = (float(v[a]) + 0.5f) / float(e[a]);
  }
  return (*this)(c);
}

namespace {

// Two kernel==stride factors whose product is the encoder downsampling.
std::pair<int, int> split_factor(int f) {
  int a = 1;
  while (a * a < f) ++a;
  while (f % a != 0) ++a;
  return {a, f / a};
}

}  // namespace

PromptEncoder::PromptEncoder(nn::ParameterStore& store, const ModelConfig& cfg)
    : crop_(cfg.crop), emb_(cfg.embedding_extent()), width_(cfg.embedding_dim()) {
  const std::string p = "prompt";
  pe_ = FourierEncoding(store, p + ".pe.gaussian", width_, cfg.prompt.fourier_scale,
                        cfg.fourier_seed);
  for (int l = 0; l < 2; ++l) {
    const std::string name = p + ".point_embed." + std::to_string(l);
    label_embed_[l] = store.add(name, nn::truncated_normal(1, width_, 1.0f, cfg.seed, name));
  }
  no_mask_embed_ = store.add(p + ".no_mask_embed",
                             nn::truncated_normal(1, width_, 1.0f, cfg.seed, p + ".no_mask_embed"));
  const auto [f1, f2] = split_factor(cfg.encoder.downsample());
  const int ch[3] = {1, cfg.prompt.mask_hidden, cfg.prompt.mask_channels};
  const int fk[2] = {f1, f2};
  for (const char* which : {"mask_downscaling", "conf_downscaling"}) {
    auto& convs = std::string(which) == "mask_downscaling" ? mask_convs_ : conf_convs_;
    auto& norms = std::string(which) == "mask_downscaling" ? mask_norms_ : conf_norms_;
    for (int l = 0; l < 2; ++l) {
      const std::string name = p + "." + which + "." + std::to_string(l);
      convs.emplace_back(store, name + ".conv", ch[l], ch[l + 1],
                         nn::ConvGeometry{fk[l], fk[l], 0}, cfg.seed);
      norms.emplace_back(store, name + ".norm", ch[l + 1]);
    }
  }
  fuse_ = Linear(store, p + ".dense_fuse", 2 * cfg.prompt.mask_channels, width_, cfg.seed);
  image_pe_ = pe_.grid(emb_);
}

bool PromptEncoder::blank(const LabelGrid& g) const {
  return g.empty() || (g.values() == 0).all();
}

Var PromptEncoder::point_tokens(const std::vector<PointPrompt>& points) const {
  if (points.empty()) return {};
  Matrix coords(nn::Index(points.size()), 3);
  auto pick = std::make_shared<std::vector<int>>();
  for (std::size_t n = 0; n < points.size(); ++n) {
    const auto& pt = points[n];
    if (!crop_.contains(pt.coord))
      throw PromptBoundsError("point (" + std::to_string(pt.coord[0]) + "," +
                              std::to_string(pt.coord[1]) + "," + std::to_string(pt.coord[2]) +
                              ") outside the crop");
    if (pt.label != 0 && pt.label != 1) throw PromptBoundsError("point label must be 0 or 1");
    for (int a = 0; a < 3; ++a) coords(nn::Index(n), a) = (float(pt.coord[a]) + 0.5f) / float(crop_[a]);
    pick->push_back(pt.label);
  }
  Var table = nn::concat_rows({label_embed_[0], label_embed_[1]});
  return nn::add(Var(pe_(coords)), nn::gather_rows(table, pick));
}

Var PromptEncoder::downscale(const std::vector<Conv3d>& convs, const std::vector<LayerNorm>& norms,
                             const LabelGrid& g) const {
  if (g.extent() != crop_ || g.channels() != 1)
    throw ShapeError("dense prompt must match the crop extent");
  Var x(g.values().cast<float>().matrix());
  Extent3 e = crop_;
  for (std::size_t l = 0; l < convs.size(); ++l) {
    x = nn::gelu(norms[l](convs[l](x, e)));
    e = convs[l].geom.output(e);
  }
  return x;
}

PromptEmbedding PromptEncoder::operator()(const std::vector<PointPrompt>& points,
                                          const LabelGrid& prev_mask,
                                          const LabelGrid& prev_conf) const {
  PromptEmbedding out;
  out.extent = emb_;
  out.points = points.size();
  out.sparse = point_tokens(points);
  if (blank(prev_mask) && blank(prev_conf)) {
    out.dense = nn::broadcast_rows(no_mask_embed_, emb_.count());
    return out;
  }
  const LabelGrid zeros(crop_, 0);
  const LabelGrid& m = prev_mask.empty() ? zeros : prev_mask;
  const LabelGrid& c = prev_conf.empty() ? zeros : prev_conf;
  out.dense = fuse_(nn::concat_cols({downscale(mask_convs_, mask_norms_, m),
                                     downscale(conf_convs_, conf_norms_, c)}));
  return out;
}

Var PromptEncoder::image_positional() const { return Var(image_pe_); }

}  // namespace sat3d::netblocks
