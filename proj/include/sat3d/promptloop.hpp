#pragma once

#include <concepts>
#include <cstdint>
#include <random>
#include <vector>

#include <json.hpp>

#include "sat3d/errors.hpp"
#include "sat3d/grid.hpp"
#include "sat3d/prompt.hpp"

namespace sat3d::promptloop {

enum class Mode { Train, Eval };

using Rng = std::mt19937_64;

// TRAIN: uniform over pred XOR gt, labelled by gt membership; falls back to a
// positive gt voxel when there is no error. EVAL: uniform over the false
// negatives, else over gt; always positive. Throws NoForegroundError on empty gt.
PointPrompt sample_prompt(const BinaryMask& pred, const BinaryMask& gt, Mode mode, Rng& rng);

// Binary mask of prob > 0.5.
BinaryMask threshold_prob(const ScalarGrid& prob, Spacing spacing = isotropic(1.0));

// Anything producing a probability map and a critic confidence map from the
// current prompt state. R may carry extra payload (e.g. graph nodes).
template <typename M>
concept StepModel = requires(M& m, const Volume& v, const PromptState& s) {
  { m.forward(v, s).prob } -> std::convertible_to<ScalarGrid>;
  { m.forward(v, s).conf } -> std::convertible_to<ConfidenceMap>;
};

template <typename R>
struct StepRecord {
  R output;
  BinaryMask pred;
  PromptState input;  // state the model saw (points and dense prompts)
};

template <typename R>
struct Episode {
  std::vector<StepRecord<R>> steps;
  PromptState final_state;
};

// Advances `state` with one model call. Throws BudgetExceededError once
// state.step has reached `budget`.
template <StepModel M>
auto refine_step(M& model, const Volume& volume, PromptState& state, int budget, double T = 0.3) {
  if (state.step >= budget)
    throw BudgetExceededError("prompt budget of " + std::to_string(budget) + " steps exhausted");
  using R = std::decay_t<decltype(model.forward(volume, state))>;
  StepRecord<R> rec{model.forward(volume, state), {}, state};
  rec.pred = threshold_prob(rec.output.prob, volume.spacing);
  if (!(T > 0 && T < 1)) throw ConfigError("confidence threshold must lie in (0, 1)");
  BinaryMask z(rec.output.conf.extent(), volume.spacing);
  z.data.values() = (rec.output.conf.values() > float(T)).template cast<std::uint8_t>();
  state.prev_mask = rec.pred;
  state.prev_conf_bin = std::move(z);
  state.step += 1;
  return rec;
}

// m refinement steps; a new point is sampled before every step after the first.
template <StepModel M>
auto run_episode(M& model, const Volume& volume, const BinaryMask& gt, int m, Mode mode, Rng& rng,
                 double T = 0.3) {
  if (m < 1) throw ConfigError("episode needs at least one step");
  if (!gt.any()) throw NoForegroundError("ground truth has no foreground");
  using R = std::decay_t<decltype(model.forward(volume, std::declval<const PromptState&>()))>;
  Episode<R> ep;
  PromptState state(gt.extent(), gt.spacing);
  for (int t = 0; t < m; ++t) {
    if (t > 0) state.points.push_back(sample_prompt(ep.steps.back().pred, gt, mode, rng));
    ep.steps.push_back(refine_step(model, volume, state, m, T));
  }
  ep.final_state = std::move(state);
  return ep;
}

// JSON trace: points plus per-step Dice and optional per-step losses.
nlohmann::json episode_trace(const std::vector<PointPrompt>& points,
                             const std::vector<double>& dice,
                             const std::vector<nlohmann::json>& losses = {});

}  // namespace sat3d::promptloop
