#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include <json.hpp>

#include "sat3d/metrics.hpp"
#include "sat3d/netblocks/model.hpp"
#include "sat3d/promptloop.hpp"

namespace sat3d::inference {

// Window origins over a (possibly padded) volume. Origins are sorted
// lexicographically; along each axis the last window is clamped to the end.
struct SlidingWindowPlan {
  Extent3 shape;   // original volume extent
  Extent3 padded;  // max(shape, patch) per axis
  Extent3 patch;
  double overlap = 0.5;
  double sigma_fraction = 1.0 / 8.0;  // Gaussian weight sigma = patch * fraction
  std::vector<Voxel> origins;

  std::size_t size() const { return origins.size(); }
};

// Throws ConfigError for overlap outside [0, 1).
SlidingWindowPlan plan_windows(Extent3 shape, Extent3 patch = cube(128), double overlap = 0.5);

// Separable Gaussian centred on the patch, peak 1.
ScalarGrid gaussian_weights(Extent3 patch, double sigma_fraction = 1.0 / 8.0);

// Per-voxel sum of the normalised window weights over the original extent;
// 1 everywhere for a covering plan.
ScalarGrid normalised_weight_sum(const SlidingWindowPlan& plan);

// Per-voxel coverage count over the original extent.
LabelGrid coverage(const SlidingWindowPlan& plan);

// Blends per-window patches with normalised Gaussian weights. A single-window
// plan returns that window's output cropped to the shape without any
// arithmetic, so it is bit-identical to a direct pass.
using WindowFn = std::function<ScalarGrid(const Voxel& origin)>;
ScalarGrid blend(const SlidingWindowPlan& plan, const WindowFn& window);

// Points inside the window, shifted into window coordinates.
std::vector<PointPrompt> route_points(const std::vector<PointPrompt>& points, const Voxel& origin,
                                      Extent3 patch);

ScalarGrid logistic(const ScalarGrid& logits);

struct StepOutput {
  ScalarGrid prob;
  ConfidenceMap conf;
};

// StepModel over a trained network. Volumes of any extent are tiled with the
// sliding-window plan; image embeddings are cached per window for the volume
// last seen, so an episode encodes each window once.
class NetStepModel {
 public:
  explicit NetStepModel(const netblocks::Sat3dNet& net, double overlap = 0.5);

  StepOutput forward(const Volume& volume, const PromptState& state);
  const SlidingWindowPlan& last_plan() const { return plan_; }
  void clear_cache() { cache_.clear(); }

 private:
  const netblocks::ImageEmbedding& embedding(const Volume& window, const Voxel& origin);

  const netblocks::Sat3dNet* net_;
  double overlap_;
  SlidingWindowPlan plan_;
  std::uint64_t volume_key_ = 0;
  std::map<Voxel, netblocks::ImageEmbedding> cache_;
};

// Probability map over the whole volume for a fixed prompt state.
ScalarGrid sliding_predict(const netblocks::Sat3dNet& net, const Volume& volume,
                           const PromptState& state, double overlap = 0.5);

struct EvalProtocol {
  std::vector<int> budgets{5, 10, 15, 20};
  static constexpr bool foreground_only = true;

  void validate() const;
  bool allows(int k) const;
};

struct EvalResult {
  BinaryMask best;
  int best_step = 0;
  std::vector<metrics::MetricReport> steps;  // one per prediction, K + 1 of them
  std::vector<PointPrompt> points;

  const metrics::MetricReport& best_report() const { return steps[std::size_t(best_step)]; }
  nlohmann::json trace() const;
};

// Index of the highest DSC; ties resolve to the earliest.
int best_candidate(const std::vector<double>& dsc);

// K foreground clicks: one unprompted step then one click per step, all in
// EVAL mode. Returns the candidate with the best DSC against gt.
template <promptloop::StepModel M>
EvalResult eval_case(M& model, const Volume& volume, const BinaryMask& gt, int K,
                     promptloop::Rng& rng, const metrics::MetricOptions& opts = {}) {
  if (K < 0) throw ConfigError("prompt budget must be non-negative");
  const auto ep = promptloop::run_episode(model, volume, gt, K + 1, promptloop::Mode::Eval, rng);
  EvalResult r;
  std::vector<double> dsc;
  for (const auto& s : ep.steps) {
    BinaryMask pred = s.pred;
    pred.spacing = gt.spacing;
    r.steps.push_back(metrics::report(pred, gt, gt.spacing, opts));
    dsc.push_back(r.steps.back().dsc);
  }
  r.best_step = best_candidate(dsc);
  r.best = ep.steps[std::size_t(r.best_step)].pred;
  r.best.spacing = gt.spacing;
  r.points = ep.final_state.points;
  return r;
}

}  // namespace sat3d::inference
