#pragma once

#include <string>

#include "sat3d/nn/ops.hpp"
#include "sat3d/nn/params.hpp"

namespace sat3d::netblocks {

// How weights are drawn at construction. Biases always start at zero.
enum class Init { TruncNormal02, FanIn };

struct Linear {
  nn::Var weight;  // in x out
  nn::Var bias;    // 1 x out, may be undefined
  Linear() = default;
  Linear(nn::ParameterStore& store, const std::string& name, int in, int out, std::uint64_t seed,
         Init init = Init::FanIn, bool with_bias = true);
  nn::Var operator()(const nn::Var& x) const { return nn::linear(x, weight, bias); }
};

struct LayerNorm {
  nn::Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(nn::ParameterStore& store, const std::string& name, int channels);
  nn::Var operator()(const nn::Var& x) const { return nn::layer_norm(x, gamma, beta); }
};

struct Conv3d {
  nn::Var weight, bias;
  nn::ConvGeometry geom;
  Conv3d() = default;
  Conv3d(nn::ParameterStore& store, const std::string& name, int in, int out, nn::ConvGeometry g,
         std::uint64_t seed);
  nn::Var operator()(const nn::Var& x, const Extent3& in) const {
    return nn::conv3d(x, in, weight, bias, geom);
  }
};

struct ConvTranspose2 {
  nn::Var weight, bias;
  ConvTranspose2() = default;
  ConvTranspose2(nn::ParameterStore& store, const std::string& name, int in, int out,
                 std::uint64_t seed);
  nn::Var operator()(const nn::Var& x, const Extent3& in) const {
    return nn::conv_transpose2(x, in, weight, bias);
  }
};

inline Extent3 scaled(const Extent3& e, int num, int den = 1) {
  return {e.h * num / den, e.w * num / den, e.d * num / den};
}

}  // namespace sat3d::netblocks
