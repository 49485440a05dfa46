#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sat3d/inference.hpp"
#include "sat3d/losses.hpp"
#include "sat3d/netblocks/model.hpp"
#include "sat3d/nn/optim.hpp"
#include "sat3d/promptloop.hpp"

namespace sat3d::trainer {

struct Sample {
  Volume volume;
  BinaryMask mask;
  std::string id;
};

struct LrMultipliers {
  double encoder = 1.0;
  double prompt = 0.1;
  double decoder = 0.1;
  double critic = 1.0;
};

struct TrainConfig {
  int epochs = 500;
  double base_lr = 8e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  LrMultipliers lr;
  double t_max = 500;  // cosine horizon in epochs
  double eta_min = 0.0;
  int batch_size = 3;
  int accumulation = 20;  // micro-batches per optimiser step
  std::uint64_t seed = 0;
  int m = 5;  // prompt steps per episode
  losses::LossWeights weights;
  bool augment = true;
  // Stopping and bookkeeping knobs (not part of the optimisation itself).
  long max_steps = 0;        // optimiser steps; 0 = no limit
  double target_dice = 0.0;  // stop once the epoch's training Dice reaches it; 0 = off
  int eval_every = 1;        // epochs between K-point validations; 0 = never
  int eval_budget = 5;       // K for the dice_best validation

  void validate() const;
  static TrainConfig paper();
  // 16-64 voxel crops, batch 2, no accumulation.
  static TrainConfig desk();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Per-step losses plus the training Dice of the episode's final prediction.
struct StepReport {
  losses::LossReport loss;
  double dice_first = 0;  // unprompted step
  double dice_last = 0;   // after m - 1 clicks
  bool stepped = false;   // optimiser step fired
  long global_step = 0;   // optimiser steps so far
  double lr = 0;
};

void to_json(nlohmann::json& j, const StepReport& r);

// One RNG stream per (seed, epoch, sample, purpose), independent of batching.
promptloop::Rng stream(std::uint64_t seed, int epoch, std::size_t sample, int purpose);

class Trainer {
 public:
  Trainer(netblocks::Sat3dNet& net, TrainConfig cfg);

  // Generator phase on every sample, then critic phase on the detached
  // predictions; optimiser steps fire every `accumulation` calls.
  // `indices` are dataset positions and select the RNG streams.
  StepReport train_step(const std::vector<const Sample*>& batch,
                        const std::vector<std::size_t>& indices, int epoch);

  // The two phases, exposed for tests. generator_phase only accumulates
  // gradients into encoder/prompt/decoder parameters; critic_phase only into
  // critic parameters.
  struct Fakes {
    std::vector<std::vector<ScalarGrid>> probs;  // [sample][step]
  };
  StepReport generator_phase(const std::vector<const Sample*>& batch,
                             const std::vector<std::size_t>& indices, int epoch, Fakes* fakes);
  double critic_phase(const std::vector<const Sample*>& batch, const Fakes& fakes);
  void generator_update(int epoch);
  void critic_update(int epoch);
  // Applies a partially filled accumulation window (end of epoch). Returns
  // whether an optimiser step fired.
  bool flush(int epoch);

  double lr_at(int epoch) const;
  const TrainConfig& config() const { return cfg_; }
  netblocks::Sat3dNet& net() { return *net_; }
  nn::AdamW& generator_optimizer() { return gen_opt_; }
  nn::AdamW& critic_optimizer() { return crit_opt_; }
  long global_step() const { return global_step_; }
  int pending_micro_batches() const { return micro_; }

  // Full training state: parameters, optimiser moments and counters.
  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  // Returns the "extra" block stored by save().
  nlohmann::json load(const std::filesystem::path& path);

 private:
  netblocks::Sat3dNet* net_;
  TrainConfig cfg_;
  nn::AdamW gen_opt_;
  nn::AdamW crit_opt_;
  int micro_ = 0;
  long global_step_ = 0;
};

struct FitOptions {
  std::filesystem::path out_dir;        // checkpoints; empty = none
  std::ostream* log = nullptr;          // JSON lines
  std::optional<std::filesystem::path> resume;
  int stop_after_epoch = -1;            // for resumability checks
};

struct EpochSummary {
  int epoch = 0;
  losses::LossReport loss;
  double train_dice = 0;
  std::optional<double> val_dice;
  long global_step = 0;
};

struct FitResult {
  std::vector<EpochSummary> epochs;
  double best_loss = 0;
  double best_dice = 0;
  long steps = 0;
  bool reached_target = false;
};

FitResult fit(netblocks::Sat3dNet& net, const std::vector<Sample>& train,
              const std::vector<Sample>& val, const TrainConfig& cfg, const FitOptions& opts = {});

// Mean of the best-candidate reports of the K-point protocol over cases.
template <promptloop::StepModel M>
metrics::MetricReport evaluate_epoch(M& model, const std::vector<Sample>& cases, int K,
                                     std::uint64_t seed = 0) {
  metrics::MetricReport mean{};
  if (cases.empty()) return mean;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    promptloop::Rng rng = stream(seed, -1, i, 2);
    const auto r = inference::eval_case(model, cases[i].volume, cases[i].mask, K, rng).best_report();
    mean.dsc += r.dsc;
    mean.iou += r.iou;
    mean.rve += r.rve;
    mean.hd95 += r.hd95;
    mean.assd += r.assd;
    mean.empty_flag = mean.empty_flag || r.empty_flag;
  }
  const double n = double(cases.size());
  mean.dsc /= n;
  mean.iou /= n;
  mean.rve /= n;
  mean.hd95 /= n;
  mean.assd /= n;
  return mean;
}

}  // namespace sat3d::trainer
