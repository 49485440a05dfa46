#include "sat3d/promptloop.hpp"

namespace sat3d::promptloop {

namespace {

Voxel pick(const std::vector<std::int64_t>& offsets, const Extent3& e, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, offsets.size() - 1);
  return e.voxel(offsets[u(rng)]);
}

}  // namespace

PointPrompt sample_prompt(const BinaryMask& pred, const BinaryMask& gt, Mode mode, Rng& rng) {
  if (!(pred.extent() == gt.extent())) throw ShapeError("prediction and ground truth differ in shape");
  if (!gt.any()) throw NoForegroundError("ground truth has no foreground");
  const auto& p = pred.data.values();
  const auto& g = gt.data.values();
  const Extent3 e = gt.extent();
  std::vector<std::int64_t> candidates, foreground;
  for (std::int64_t i = 0; i < g.size(); ++i) {
    if (g[i]) foreground.push_back(i);
    const bool error = mode == Mode::Train ? (p[i] != g[i]) : (g[i] && !p[i]);
    if (error) candidates.push_back(i);
  }
  if (candidates.empty()) return {pick(foreground, e, rng), 1};
  const Voxel v = pick(candidates, e, rng);
  return {v, gt.data.at(v) ? 1 : 0};
}

BinaryMask threshold_prob(const ScalarGrid& prob, Spacing spacing) {
  BinaryMask m(prob.extent(), spacing);
  m.data.values() = (prob.values() > 0.5f).cast<std::uint8_t>();
  return m;
}

nlohmann::json episode_trace(const std::vector<PointPrompt>& points,
                             const std::vector<double>& dice,
                             const std::vector<nlohmann::json>& losses) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) pts.push_back({{"coord", p.coord}, {"label", p.label}});
  nlohmann::json j = {{"points", pts}, {"dice", dice}};
  if (!losses.empty()) j["losses"] = losses;
  return j;
}

}  // namespace sat3d::promptloop
