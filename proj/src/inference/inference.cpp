#include "sat3d/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sat3d/volgrid/preprocess.hpp"

namespace sat3d::inference {

namespace {

std::vector<int> axis_origins(int n, int p, double overlap) {
  if (n <= p) return {0};
  const int stride = std::max(1, int(std::floor(p * (1.0 - overlap))));
  std::vector<int> o;
  for (int x = 0; x + p < n; x += stride) o.push_back(x);
  o.push_back(n - p);
  o.erase(std::unique(o.begin(), o.end()), o.end());
  return o;
}

std::uint64_t fingerprint(const Volume& v) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  const Extent3 e = v.extent();
  mix(&e, sizeof e);
  mix(v.data.data(), sizeof(float) * std::size_t(v.data.size()));
  return h;
}

}  // namespace

SlidingWindowPlan plan_windows(Extent3 shape, Extent3 patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("window overlap must lie in [0, 1)");
  if (shape.h < 1 || shape.w < 1 || shape.d < 1 || patch.h < 1 || patch.w < 1 || patch.d < 1)
    throw ShapeError("window plan needs positive extents");
  SlidingWindowPlan plan;
  plan.shape = shape;
  plan.patch = patch;
  plan.overlap = overlap;
  plan.padded = {std::max(shape.h, patch.h), std::max(shape.w, patch.w), std::max(shape.d, patch.d)};
  const auto oi = axis_origins(shape.h, patch.h, overlap);
  const auto oj = axis_origins(shape.w, patch.w, overlap);
  const auto ok = axis_origins(shape.d, patch.d, overlap);
  for (int i : oi)
    for (int j : oj)
      for (int k : ok) plan.origins.push_back({i, j, k});
  return plan;
}

ScalarGrid gaussian_weights(Extent3 patch, double sigma_fraction) {
  std::array<std::vector<double>, 3> g;
  for (int a = 0; a < 3; ++a) {
    const double sigma = patch[a] * sigma_fraction, c = (patch[a] - 1) / 2.0;
    for (int i = 0; i < patch[a]; ++i) g[a].push_back(std::exp(-(i - c) * (i - c) / (2 * sigma * sigma)));
  }
  ScalarGrid w(patch);
  for (int i = 0; i < patch.h; ++i)
    for (int j = 0; j < patch.w; ++j)
      for (int k = 0; k < patch.d; ++k)
        w(0, i, j, k) = float(std::max(g[0][std::size_t(i)] * g[1][std::size_t(j)] * g[2][std::size_t(k)], 1e-30));
  return w;
}

ScalarGrid blend(const SlidingWindowPlan& plan, const WindowFn& window) {
  if (plan.origins.empty()) throw ConfigError("empty window plan");
  if (plan.size() == 1) {
    const ScalarGrid out = window(plan.origins.front());
    if (out.extent() == plan.shape) return out;
    return volgrid::extract(out, plan.origins.front(), plan.shape, 0.0f);
  }
  const ScalarGrid w = gaussian_weights(plan.patch, plan.sigma_fraction);
  const Extent3 pe = plan.padded, p = plan.patch;
  Eigen::ArrayXd num = Eigen::ArrayXd::Zero(pe.count()), den = Eigen::ArrayXd::Zero(pe.count());
  for (const Voxel& o : plan.origins) {
    const ScalarGrid patch = window(o);
    if (patch.extent() != p) throw ShapeError("window output does not match the patch extent");
    for (int i = 0; i < p.h; ++i)
      for (int j = 0; j < p.w; ++j)
        for (int k = 0; k < p.d; ++k) {
          const auto at = pe.offset(o[0] + i, o[1] + j, o[2] + k);
          const double wt = w(0, i, j, k);
          num[at] += wt * patch(0, i, j, k);
          den[at] += wt;
        }
  }
  ScalarGrid out(plan.shape);
  for (int i = 0; i < plan.shape.h; ++i)
    for (int j = 0; j < plan.shape.w; ++j)
      for (int k = 0; k < plan.shape.d; ++k) {
        const auto at = pe.offset(i, j, k);
        out(0, i, j, k) = float(num[at] / den[at]);
      }
  return out;
}

ScalarGrid normalised_weight_sum(const SlidingWindowPlan& plan) {
  const ScalarGrid w = gaussian_weights(plan.patch, plan.sigma_fraction);
  const Extent3 pe = plan.padded, p = plan.patch;
  Eigen::ArrayXd den = Eigen::ArrayXd::Zero(pe.count());
  for (const Voxel& o : plan.origins)
    for (int i = 0; i < p.h; ++i)
      for (int j = 0; j < p.w; ++j)
        for (int k = 0; k < p.d; ++k) den[pe.offset(o[0] + i, o[1] + j, o[2] + k)] += w(0, i, j, k);
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(pe.count());
  for (const Voxel& o : plan.origins)
    for (int i = 0; i < p.h; ++i)
      for (int j = 0; j < p.w; ++j)
        for (int k = 0; k < p.d; ++k) {
          const auto at = pe.offset(o[0] + i, o[1] + j, o[2] + k);
          sum[at] += w(0, i, j, k) / den[at];
        }
  ScalarGrid out(plan.shape);
  for (int i = 0; i < plan.shape.h; ++i)
    for (int j = 0; j < plan.shape.w; ++j)
      for (int k = 0; k < plan.shape.d; ++k) out(0, i, j, k) = float(sum[pe.offset(i, j, k)]);
  return out;
}

LabelGrid coverage(const SlidingWindowPlan& plan) {
  LabelGrid c(plan.shape);
  for (const Voxel& o : plan.origins)
    for (int i = o[0]; i < std::min(o[0] + plan.patch.h, plan.shape.h); ++i)
      for (int j = o[1]; j < std::min(o[1] + plan.patch.w, plan.shape.w); ++j)
        for (int k = o[2]; k < std::min(o[2] + plan.patch.d, plan.shape.d); ++k)
          c(0, i, j, k) = std::uint8_t(std::min(255, c(0, i, j, k) + 1));
  return c;
}

std::vector<PointPrompt> route_points(const std::vector<PointPrompt>& points, const Voxel& origin,
                                      Extent3 patch) {
  std::vector<PointPrompt> out;
  for (const auto& p : points) {
    const Voxel local{p.coord[0] - origin[0], p.coord[1] - origin[1], p.coord[2] - origin[2]};
    if (patch.contains(local)) out.push_back({local, p.label});
  }
  return out;
}

ScalarGrid logistic(const ScalarGrid& logits) {
  ScalarGrid p = logits;
  p.values() = 1.0f / (1.0f + (-logits.values()).exp());
  return p;
}

NetStepModel::NetStepModel(const netblocks::Sat3dNet& net, double overlap)
    : net_(&net), overlap_(overlap) {
  plan_windows(net.config().crop, net.config().crop, overlap);  // validates overlap
}

const netblocks::ImageEmbedding& NetStepModel::embedding(const Volume& window, const Voxel& origin) {
  auto it = cache_.find(origin);
  if (it == cache_.end()) {
    nn::NoGradGuard guard;
    it = cache_.emplace(origin, net_->encode_image(window)).first;
  }
  return it->second;
}

StepOutput NetStepModel::forward(const Volume& volume, const PromptState& state) {
  if (volume.data.channels() != 1) throw ShapeError("expected a single-channel volume");
  const std::uint64_t key = fingerprint(volume);
  if (key != volume_key_ || cache_.empty()) {
    cache_.clear();
    volume_key_ = key;
    plan_ = plan_windows(volume.extent(), net_->config().crop, overlap_);
  }
  const Extent3 patch = plan_.patch;
  const Extent3 e = volume.extent();
  LabelGrid mask = state.prev_mask.data, conf = state.prev_conf_bin.data;
  if (mask.empty()) mask = LabelGrid(e);
  if (conf.empty()) conf = LabelGrid(e);
  if (mask.extent() != e || conf.extent() != e)
    throw ShapeError("dense prompts must match the volume extent");

  std::map<Voxel, StepOutput> outs;
  for (const Voxel& o : plan_.origins) {
    Volume win;
    win.spacing = volume.spacing;
    win.data = (e == patch && o == Voxel{0, 0, 0}) ? volume.data : volgrid::extract(volume.data, o, patch, 0.0f);
    const auto& emb = embedding(win, o);
    nn::NoGradGuard guard;
    const LabelGrid mw = (e == patch) ? mask : volgrid::extract(mask, o, patch, std::uint8_t(0));
    const LabelGrid cw = (e == patch) ? conf : volgrid::extract(conf, o, patch, std::uint8_t(0));
    const nn::Var logits = net_->decode_mask(emb, net_->encode_prompts(route_points(state.points, o, patch), mw, cw));
    StepOutput so;
    so.prob = logistic(netblocks::to_grid(logits.value(), patch));
    so.conf = net_->critic_map(so.prob);
    outs.emplace(o, std::move(so));
  }
  StepOutput r;
  r.prob = blend(plan_, [&](const Voxel& o) { return outs.at(o).prob; });
  r.conf = blend(plan_, [&](const Voxel& o) { return outs.at(o).conf; });
  return r;
}

ScalarGrid sliding_predict(const netblocks::Sat3dNet& net, const Volume& volume,
                           const PromptState& state, double overlap) {
  NetStepModel m(net, overlap);
  return m.forward(volume, state).prob;
}

void EvalProtocol::validate() const {
  if (budgets.empty()) throw ConfigError("evaluation protocol needs at least one budget");
  for (int k : budgets)
    if (k < 1) throw ConfigError("prompt budgets must be positive");
}

bool EvalProtocol::allows(int k) const {
  return std::find(budgets.begin(), budgets.end(), k) != budgets.end();
}

int best_candidate(const std::vector<double>& dsc) {
  if (dsc.empty()) throw ConfigError("no candidates");
  int best = 0;
  for (int i = 1; i < int(dsc.size()); ++i)
    if (dsc[std::size_t(i)] > dsc[std::size_t(best)]) best = i;
  return best;
}

nlohmann::json EvalResult::trace() const {
  std::vector<double> dsc;
  for (const auto& s : steps) dsc.push_back(s.dsc);
  nlohmann::json j = promptloop::episode_trace(points, dsc);
  j["best_step"] = best_step;
  j["reports"] = steps;
  return j;
}

}  // namespace sat3d::inference
