#include "sat3d/netblocks/layers.hpp"

#include <cmath>

namespace sat3d::netblocks {

using nn::Matrix;

Linear::Linear(nn::ParameterStore& store, const std::string& name, int in, int out,
               std::uint64_t seed, Init init, bool with_bias) {
  const std::string wname = name + ".weight";
  Matrix w = init == Init::TruncNormal02
                 ? nn::truncated_normal(in, out, 0.02f, seed, wname)
                 : nn::uniform_init(in, out, 1.0f / std::sqrt(float(in)), seed, wname);
  weight = store.add(wname, std::move(w));
  if (with_bias) bias = store.add(name + ".bias", Matrix::Zero(1, out));
}

LayerNorm::LayerNorm(nn::ParameterStore& store, const std::string& name, int channels) {
  gamma = store.add(name + ".weight", Matrix::Ones(1, channels));
  beta = store.add(name + ".bias", Matrix::Zero(1, channels));
}

Conv3d::Conv3d(nn::ParameterStore& store, const std::string& name, int in, int out,
               nn::ConvGeometry g, std::uint64_t seed)
    : geom(g) {
  const int fan_in = g.kernel * g.kernel * g.kernel * in;
  weight = store.add(name + ".weight",
                     nn::uniform_init(fan_in, out, 1.0f / std::sqrt(float(fan_in)), seed,
                                      name + ".weight"));
  bias = store.add(name + ".bias", Matrix::Zero(1, out));
}

ConvTranspose2::ConvTranspose2(nn::ParameterStore& store, const std::string& name, int in, int out,
                               std::uint64_t seed) {
  weight = store.add(name + ".weight",
                     nn::uniform_init(in, 8 * out, 1.0f / std::sqrt(float(in)), seed,
                                      name + ".weight"));
  bias = store.add(name + ".bias", Matrix::Zero(1, out));
}

}  // namespace sat3d::netblocks
