#pragma once

#include <string>
#include <vector>

#include "sat3d/nn/params.hpp"

namespace sat3d::nn {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

// Decoupled-weight-decay Adam with per-group learning-rate multipliers.
// Parameters without a gradient are skipped for the step (no decay either).
class AdamW {
 public:
  struct Slot {
    std::string name;
    Var param;
    double lr_multiplier = 1.0;
    Matrix m;  // first moment
    Matrix v;  // second moment
    long long steps = 0;
  };

  explicit AdamW(AdamWSettings settings = {}) : settings_(settings) {}

  void add_group(const std::vector<NamedParam>& params, double lr_multiplier);
  void step(double lr);
  void zero_grad();
  // Divides every accumulated gradient by `n` (gradient-accumulation mean).
  void scale_grads(double factor);

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamWSettings& settings() const { return settings_; }

 private:
  AdamWSettings settings_;
  std::vector<Slot> slots_;
};

// Closed-form cosine annealing: eta_min + (base - eta_min) * (1 + cos(pi e / T)) / 2.
double cosine_lr(double base_lr, double epoch, double t_max, double eta_min = 0.0);

}  // namespace sat3d::nn
