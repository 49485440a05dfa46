#include "sat3d/nn/optim.hpp"

#include <cmath>
#include <numbers>

namespace sat3d::nn {

void AdamW::add_group(const std::vector<NamedParam>& params, double lr_multiplier) {
  for (const auto& p : params) {
    Slot s;
    s.name = p.name;
    s.param = p.var;
    s.lr_multiplier = lr_multiplier;
    s.m = Matrix::Zero(p.var.rows(), p.var.cols());
    s.v = Matrix::Zero(p.var.rows(), p.var.cols());
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(double lr) {
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  for (Slot& s : slots_) {
    if (!s.param.has_grad()) continue;
    const double a = lr * s.lr_multiplier;
    ++s.steps;
    Matrix& p = s.param.mutable_value();
    const Matrix& g = s.param.grad();
    p *= float(1.0 - a * settings_.weight_decay);
    s.m = float(b1) * s.m + float(1.0 - b1) * g;
    s.v = float(b2) * s.v + float(1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, double(s.steps));
    const double c2 = 1.0 - std::pow(b2, double(s.steps));
    const float step = float(a / c1);
    const float root_c2 = float(std::sqrt(c2));
    p.array() -= step * s.m.array() / (s.v.array().sqrt() / root_c2 + float(settings_.eps));
  }
}

void AdamW::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

void AdamW::scale_grads(double factor) {
  for (Slot& s : slots_)
    if (s.param.has_grad()) s.param.mutable_grad() *= float(factor);
}

double cosine_lr(double base_lr, double epoch, double t_max, double eta_min) {
  return eta_min + (base_lr - eta_min) * (1.0 + std::cos(std::numbers::pi * epoch / t_max)) / 2.0;
}

}  // namespace sat3d::nn
