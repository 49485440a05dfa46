#include "sat3d/netblocks/critic.hpp"

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

using nn::Var;

Critic::Critic(nn::ParameterStore& store, const CriticConfig& cfg, std::uint64_t seed)
    : leak_(cfg.leak) {
  const auto& ch = cfg.channels;
  int in = 1;
  for (std::size_t l = 0; l < ch.size(); ++l) {
    down_.emplace_back(store, "critic.down" + std::to_string(l), in, ch[l],
                       nn::ConvGeometry{3, 2, 1}, seed);
    in = ch[l];
  }
  for (std::size_t l = ch.size() - 1; l >= 1; --l)
    up_.emplace_back(store, "critic.up" + std::to_string(l), ch[l], ch[l - 1],
                     nn::ConvGeometry{3, 1, 1}, seed);
  head_ = Linear(store, "critic.head", ch[0], 1, seed);
}

Var Critic::operator()(const Var& prob, const Extent3& extent) const {
  if (prob.rows() != extent.count() || prob.cols() != 1)
    throw ShapeError("critic expects a single-channel map");
  std::vector<Extent3> ext{extent};
  Var x = prob;
  for (const auto& conv : down_) {
    x = nn::leaky_relu(conv(x, ext.back()), leak_);
    ext.push_back(conv.geom.output(ext.back()));
  }
  // ext[l + 1] is the grid after encoder level l.
  std::size_t level = down_.size();
  for (const auto& conv : up_) {
    x = nn::resize_trilinear(x, ext[level], ext[level - 1]);
    --level;
    x = nn::leaky_relu(conv(x, ext[level]), leak_);
  }
  x = nn::resize_trilinear(x, ext[1], ext[0]);
  return nn::sigmoid(head_(x));
}

BinaryMask binarize_confidence(const ConfidenceMap& c, double T) {
  if (!(T > 0.0 && T < 1.0)) throw ConfigError("confidence threshold must lie in (0, 1)");
  BinaryMask out(c.extent(), isotropic(1.0));
  out.data.values() = (c.values() > float(T)).cast<std::uint8_t>();
  return out;
}

}  // namespace sat3d::netblocks
