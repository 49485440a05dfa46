#pragma once

#include <Eigen/Core>

#include <cmath>

#include <json.hpp>

#include "sat3d/errors.hpp"

// Training objectives as value + analytic gradient pairs. Every function takes
// flat voxel arrays and is templated on the scalar so the gradient checks can
// run in double while training runs in float.
namespace sat3d::losses {

template <typename S>
using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

inline constexpr double kProbFloor = 1e-7;

struct LossWeights {
  double lambda_c = 0.01;
  double lambda_u = 0.1;
  double T = 0.3;
  double epsilon = 1e-5;
  void validate() const {
    if (!(epsilon > 0)) throw ConfigError("dice epsilon must be positive");
    if (!(T > 0 && T < 1)) throw ConfigError("confidence threshold must lie in (0, 1)");
    if (lambda_c < 0 || lambda_u < 0) throw ConfigError("loss weights must be non-negative");
  }
};

// Value and gradient with respect to one input map.
template <typename S>
struct Loss {
  S value = 0;
  Array<S> grad;
};

// Clamped probabilities plus the mask of entries where the clamp is inactive
// (the gradient of the clamp is zero elsewhere).
template <typename S>
std::pair<Array<S>, Array<S>> clamp_prob(const Array<S>& p) {
  const S lo = S(kProbFloor), hi = S(1) - S(kProbFloor);
  Array<S> c = p.max(lo).min(hi);
  Array<S> pass = ((p >= lo) && (p <= hi)).template cast<S>();
  return {std::move(c), std::move(pass)};
}

template <typename S>
void check_same(const Array<S>& a, const Array<S>& b) {
  if (a.size() != b.size()) throw ShapeError("loss inputs differ in size");
  if (a.size() == 0) throw ShapeError("loss inputs are empty");
}

// 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)
template <typename S>
Loss<S> dice_loss(const Array<S>& prob, const Array<S>& gt, S eps = S(1e-5)) {
  check_same(prob, gt);
  const S num = S(2) * (prob * gt).sum() + eps;
  const S den = prob.square().sum() + gt.square().sum() + eps;
  Loss<S> out;
  out.value = S(1) - num / den;
  out.grad = -(S(2) * gt * den - num * S(2) * prob) / (den * den);
  return out;
}

// Voxel-mean binary cross-entropy.
template <typename S>
Loss<S> bce_loss(const Array<S>& prob, const Array<S>& gt) {
  check_same(prob, gt);
  const auto [p, pass] = clamp_prob(prob);
  const S n = S(prob.size());
  Loss<S> out;
  out.value = -(gt * p.log() + (S(1) - gt) * (S(1) - p).log()).sum() / n;
  out.grad = -(gt / p - (S(1) - gt) / (S(1) - p)) * pass / n;
  return out;
}

template <typename S>
struct DiceCE {
  S dice = 0, ce = 0, value = 0;
  Array<S> grad;
};

template <typename S>
DiceCE<S> dice_ce_loss(const Array<S>& prob, const Array<S>& gt, S eps = S(1e-5)) {
  const Loss<S> d = dice_loss(prob, gt, eps);
  const Loss<S> c = bce_loss(prob, gt);
  return {d.value, c.value, d.value + c.value, d.grad + c.grad};
}

// -mean log(critic): the generator wants its mask judged real.
template <typename S>
Loss<S> generator_adv_loss(const Array<S>& critic) {
  if (critic.size() == 0) throw ShapeError("loss inputs are empty");
  const auto [c, pass] = clamp_prob(critic);
  const S n = S(critic.size());
  Loss<S> out;
  out.value = -c.log().sum() / n;
  out.grad = -pass / (c * n);
  return out;
}

// -mean over {critic > T} of gt * log(prob); 0 when nothing is selected. The
// indicator carries no gradient.
template <typename S>
Loss<S> uncertainty_masked_ce(const Array<S>& prob, const Array<S>& gt, const Array<S>& critic,
                              S T) {
  check_same(prob, gt);
  check_same(prob, critic);
  const Array<S> sel = (critic > T).template cast<S>();
  const S count = sel.sum();
  Loss<S> out;
  out.grad = Array<S>::Zero(prob.size());
  if (count == S(0)) return out;
  const auto [p, pass] = clamp_prob(prob);
  out.value = -(sel * gt * p.log()).sum() / count;
  out.grad = -sel * gt * pass / (p * count);
  return out;
}

template <typename S>
struct CriticLoss {
  S value = 0;
  Array<S> grad_real;  // w.r.t. critic on ground truth
  Array<S> grad_fake;  // w.r.t. critic on the prediction
};

// Voxel-mean of -[log c_real + log(1 - c_fake)].
template <typename S>
CriticLoss<S> critic_loss(const Array<S>& on_gt, const Array<S>& on_pred) {
  check_same(on_gt, on_pred);
  const auto [r, pr] = clamp_prob(on_gt);
  const auto [f, pf] = clamp_prob(on_pred);
  const S n = S(on_gt.size());
  CriticLoss<S> out;
  out.value = -(r.log() + (S(1) - f).log()).sum() / n;
  out.grad_real = -pr / (r * n);
  out.grad_fake = pf / ((S(1) - f) * n);
  return out;
}

// Chain rule through p = sigmoid(z).
template <typename S>
Array<S> through_sigmoid(const Array<S>& grad_prob, const Array<S>& prob) {
  return grad_prob * prob * (S(1) - prob);
}

struct LossReport {
  double l_s = 0, l_dice = 0, l_ce = 0, l_c = 0, l_u = 0, l_total = 0, l_critic = 0;
};

// l_total = l_s + lambda_c * l_c + lambda_u * l_u. Callers fill l_dice, l_ce
// and l_critic themselves.
inline LossReport total_generator_loss(double l_s, double l_c, double l_u,
                                       const LossWeights& w = {}) {
  LossReport r;
  r.l_s = l_s;
  r.l_c = l_c;
  r.l_u = l_u;
  r.l_total = r.l_s + w.lambda_c * l_c + w.lambda_u * l_u;
  return r;
}

inline void to_json(nlohmann::json& j, const LossReport& r) {
  j = {{"l_s", r.l_s},     {"l_dice", r.l_dice}, {"l_ce", r.l_ce},        {"l_c", r.l_c},
       {"l_u", r.l_u},     {"l_total", r.l_total}, {"l_critic", r.l_critic}};
}

inline void from_json(const nlohmann::json& j, LossReport& r) {
  r.l_s = j.at("l_s");
  r.l_dice = j.at("l_dice");
  r.l_ce = j.at("l_ce");
  r.l_c = j.at("l_c");
  r.l_u = j.at("l_u");
  r.l_total = j.at("l_total");
  r.l_critic = j.at("l_critic");
}

}  // namespace sat3d::losses
