// End-to-end acceptance checks. Prints one PASS/FAIL line per check and exits
// non-zero when any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sat3d/dataset.hpp"
#include "sat3d/inference.hpp"
#include "sat3d/losses.hpp"
#include "sat3d/metrics.hpp"
#include "sat3d/promptloop.hpp"
#include "sat3d/stats.hpp"
#include "sat3d/trainer.hpp"

using namespace sat3d;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void run(const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!o.pass) ++g_failures;
  std::printf("%s  %-28s %s [%.2fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), s);
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::string kTable = std::string(SAT3D_TEST_DATA) + "/table1.csv";

// --- published table -----------------------------------------------------------

Outcome friedman_reproduction() {
  const auto t0 = Clock::now();
  const auto t = stats::build_table1(stats::read_long_csv_file(kTable));
  const double want_ranks[] = {2.46, 3.63, 3.29, 3.90, 1.73};
  const std::vector<std::string> order{"nnUNet", "SAM-Med3D", "SAM-Med3D(Turbo)", "FastSAM3D", "SAT3D"};
  double worst = 0;
  for (int m = 0; m < 5; ++m) {
    const auto it = std::find(t.table.methods.begin(), t.table.methods.end(), order[std::size_t(m)]);
    if (it == t.table.methods.end()) return {false, "method missing: " + order[std::size_t(m)]};
    worst = std::max(worst, std::abs(t.friedman.average_ranks[it - t.table.methods.begin()] - want_ranks[m]));
  }
  const double chi2 = t.friedman.statistic, secs = seconds_since(t0);
  const bool ok = std::abs(chi2 - 89.54) <= 0.5 && worst <= 0.01 && t.table.n() == 70 && secs < 1.0;
  return {ok, fmt("chi2=%.4f p=%s max|rank-published|=%.4f blocks=%d", chi2, t.friedman.p.text().c_str(), worst,
                  int(t.table.n()))};
}

Outcome rank_agreement() {
  const auto t0 = Clock::now();
  const auto table = stats::read_long_csv_file(kTable);
  const Eigen::MatrixXd ranks = stats::rank_blocks(table);
  // Printed ranks straight from the file.
  std::ifstream in(kTable);
  std::string line;
  std::getline(in, line);
  int total = 0, agree = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) return {false, "bad row: " + line};
    const std::string block = f[0] + "/" + f[1];
    const auto b = std::find(table.blocks.begin(), table.blocks.end(), block) - table.blocks.begin();
    const auto m = std::find(table.methods.begin(), table.methods.end(), f[2]) - table.methods.begin();
    if (b >= table.n() || m >= table.k()) return {false, "unmatched row: " + line};
    ++total;
    if (std::abs(ranks(b, m) - std::stod(f[4])) < 1e-9) ++agree;
  }
  const double secs = seconds_since(t0);
  return {total == 350 && agree == total && secs < 1.0, fmt("%d/%d printed ranks reproduced", agree, total)};
}

// --- metrics ---------------------------------------------------------------------

struct Surfel {
  double x, y, z, area;
};

// Every exposed voxel face, brute force.
std::vector<Surfel> surfels(const BinaryMask& m, Spacing s) {
  const Extent3 e = m.extent();
  std::vector<Surfel> out;
  const double sp[3] = {s.sx, s.sy, s.sz};
  for (int i = 0; i < e.h; ++i)
    for (int j = 0; j < e.w; ++j)
      for (int k = 0; k < e.d; ++k) {
        if (!m.at({i, j, k})) continue;
        const int c[3] = {i, j, k};
        for (int a = 0; a < 3; ++a)
          for (int dir : {-1, 1}) {
            Voxel n{i, j, k};
            n[a] += dir;
            if (e.contains(n) && m.at(n)) continue;
            double p[3] = {c[0] * sp[0], c[1] * sp[1], c[2] * sp[2]};
            p[a] += dir * 0.5 * sp[a];
            out.push_back({p[0], p[1], p[2], sp[(a + 1) % 3] * sp[(a + 2) % 3]});
          }
      }
  return out;
}

std::vector<double> nearest(const std::vector<Surfel>& from, const std::vector<Surfel>& to) {
  std::vector<double> d;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    d.push_back(std::sqrt(best));
  }
  return d;
}

double percentile95(const std::vector<double>& d, const std::vector<Surfel>& s) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d[a] < d[b]; });
  double total = 0;
  for (const auto& x : s) total += x.area;
  double cum = 0;
  for (auto i : idx) {
    cum += s[i].area;
    if (cum >= 0.95 * total) return d[i];
  }
  return d[idx.back()];
}

BinaryMask random_mask(Extent3 e, std::mt19937_64& rng) {
  BinaryMask m(e);
  std::uniform_int_distribution<int> kind(0, 2);
  const int k = kind(rng);
  if (k == 0) {  // speckle
    std::bernoulli_distribution on(0.25);
    for (auto& v : m.data.values()) v = on(rng);
  } else {  // a few boxes / balls
    std::uniform_int_distribution<int> pos(0, e.h - 1), rad(1, 5);
    const int n = 1 + int(rng() % 3);
    for (int b = 0; b < n; ++b) {
      const int ci = pos(rng), cj = pos(rng), ck = pos(rng), r = rad(rng);
      for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
          for (int kk = 0; kk < e.d; ++kk) {
            const int di = i - ci, dj = j - cj, dk = kk - ck;
            const bool in = k == 1 ? (std::abs(di) <= r && std::abs(dj) <= r && std::abs(dk) <= r)
                                   : (di * di + dj * dj + dk * dk <= r * r);
            if (in) m.at({i, j, kk}) = 1;
          }
    }
  }
  if (!m.any()) m.at({e.h / 2, e.w / 2, e.d / 2}) = 1;
  return m;
}

Outcome surface_oracle() {
  std::mt19937_64 rng(2024);
  // Spacings whose face areas are exact binary fractions.
  const double choices[] = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0};
  std::uniform_int_distribution<int> pick(0, 7), side(4, 16);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const Extent3 e{side(rng), side(rng), side(rng)};
    Spacing s{choices[pick(rng)], choices[pick(rng)], choices[pick(rng)]};
    if (s.sx == s.sy && s.sy == s.sz) s.sz = s.sx * 2;
    const BinaryMask a = random_mask(e, rng), b = random_mask(e, rng);
    const auto sa = surfels(a, s), sb = surfels(b, s);
    const auto dab = nearest(sa, sb), dba = nearest(sb, sa);
    const double hd = std::max(percentile95(dab, sa), percentile95(dba, sb));
    double wa = 0, ta = 0, wb = 0, tb = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) wa += dab[i] * sa[i].area, ta += sa[i].area;
    for (std::size_t i = 0; i < sb.size(); ++i) wb += dba[i] * sb[i].area, tb += sb[i].area;
    const double as = 0.5 * (wa / ta + wb / tb);
    worst = std::max({worst, std::abs(metrics::hd95(a, b, s) - hd), std::abs(metrics::assd(a, b, s) - as)});
  }
  return {worst <= 1e-6, fmt("200 pairs, max |impl - all-pairs oracle| = %.3g mm", worst)};
}

Outcome dsc_iou_identity() {
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const BinaryMask a = random_mask(cube(12), rng), b = random_mask(cube(12), rng);
    const double d = metrics::dsc(a, b), j = metrics::iou(a, b);
    worst = std::max(worst, std::abs(d - 2 * j / (1 + j)));
  }
  // |P| = |G| = 1000 with 672 shared voxels.
  BinaryMask p(cube(20)), g(cube(20));
  for (int n = 0; n < 1000; ++n) p.data.values()[n] = 1;
  for (int n = 328; n < 1328; ++n) g.data.values()[n] = 1;
  const double d = metrics::dsc(p, g), j = metrics::iou(p, g);
  const bool spot = std::abs(d - 0.672) < 1e-12 && std::abs(j - 0.506) < 5e-4;
  return {worst < 1e-12 && spot, fmt("max identity error %.2g; dsc %.3f <-> iou %.3f", worst, d, j)};
}

// --- losses ------------------------------------------------------------------------

using ArrayD = losses::Array<double>;

ArrayD uniform(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  ArrayD a(n);
  for (auto& x : a) x = u(rng);
  return a;
}

double rel_error(const ArrayD& analytic, const ArrayD& numeric) {
  const double scale = std::max({analytic.matrix().norm(), numeric.matrix().norm(), 1e-12});
  return (analytic - numeric).matrix().norm() / scale;
}

ArrayD numeric_grad(const std::function<double(const ArrayD&)>& f, ArrayD x) {
  const double h = 1e-6;
  ArrayD g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

Outcome gradient_checks() {
  std::mt19937_64 rng(11);
  const int n = 64;  // 4^3
  double worst = 0;
  std::string where;
  auto note = [&](double e, const char* name) {
    if (e > worst) worst = e, where = name;
  };
  for (int trial = 0; trial < 5; ++trial) {
    const ArrayD p = uniform(rng, n, 0.02, 0.98);
    ArrayD gt = (uniform(rng, n, 0, 1) > 0.6).cast<double>();
    ArrayD c = uniform(rng, n, 0.02, 0.98);
    for (auto& x : c)
      if (std::abs(x - 0.3) < 1e-3) x += 0.01;  // keep the indicator away from its jump

    note(rel_error(losses::dice_ce_loss<double>(p, gt).grad,
                   numeric_grad([&](const ArrayD& x) { return losses::dice_ce_loss<double>(x, gt).value; }, p)),
         "segmentation");
    note(rel_error(losses::generator_adv_loss<double>(c).grad,
                   numeric_grad([&](const ArrayD& x) { return losses::generator_adv_loss<double>(x).value; }, c)),
         "adversarial");
    const auto lu = losses::uncertainty_masked_ce<double>(p, gt, c, 0.3);
    note(rel_error(lu.grad, numeric_grad(
                                [&](const ArrayD& x) { return losses::uncertainty_masked_ce<double>(x, gt, c, 0.3).value; },
                                p)),
         "uncertainty");
    const ArrayD r = uniform(rng, n, 0.02, 0.98);
    const auto cl = losses::critic_loss<double>(r, c);
    note(rel_error(cl.grad_real,
                   numeric_grad([&](const ArrayD& x) { return losses::critic_loss<double>(x, c).value; }, r)),
         "critic/real");
    note(rel_error(cl.grad_fake,
                   numeric_grad([&](const ArrayD& x) { return losses::critic_loss<double>(r, x).value; }, c)),
         "critic/fake");
    if ((c > 0.3).count() == 0 || (lu.grad != 0).count() == 0) return {false, "masked case not exercised"};
  }
  return {worst < 1e-3, fmt("max relative error %.2e (%s), T=0.3", worst, where.c_str())};
}

Outcome uncertainty_null() {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const ArrayD p = uniform(rng, 64, 0, 1);
    const ArrayD gt = (uniform(rng, 64, 0, 1) > 0.5).cast<double>();
    ArrayD c = uniform(rng, 64, 0, 0.3);
    c[t % 64] = 0.3;  // the boundary itself is not "above T"
    const auto l = losses::uncertainty_masked_ce<double>(p, gt, c, 0.3);
    if (l.value != 0.0 || (l.grad != 0.0).any()) return {false, fmt("non-zero loss %.3g at trial %d", l.value, t)};
  }
  return {true, "100 trials with confidence <= 0.3: loss and gradient exactly 0"};
}

// --- prompt loop -------------------------------------------------------------------

struct RecordingModel {
  std::vector<PromptState> seen;
  std::vector<inference::StepOutput> given;
  std::mt19937_64 rng{3};
  inference::StepOutput forward(const Volume& v, const PromptState& s) {
    seen.push_back(s);
    std::uniform_real_distribution<float> u(0, 1);
    inference::StepOutput o{ScalarGrid(v.extent()), ConfidenceMap(v.extent())};
    for (auto& x : o.prob.values()) x = u(rng);
    for (auto& x : o.conf.values()) x = u(rng);
    given.push_back(o);
    return o;
  }
};

Outcome episode_contract() {
  const Extent3 e = cube(12);
  Volume v;
  v.data = ScalarGrid(e);
  BinaryMask gt(e);
  for (int i = 3; i < 9; ++i)
    for (int j = 3; j < 9; ++j)
      for (int k = 3; k < 9; ++k) gt.at({i, j, k}) = 1;
  RecordingModel model;
  promptloop::Rng rng(1);
  const auto ep = promptloop::run_episode(model, v, gt, 5, promptloop::Mode::Train, rng, 0.3);
  if (ep.steps.size() != 5 || model.seen.size() != 5) return {false, fmt("%d predictions", int(ep.steps.size()))};
  if (!model.seen[0].points.empty() || model.seen[0].prev_mask.any() || model.seen[0].prev_conf_bin.any())
    return {false, "step 0 was prompted"};
  for (std::size_t t = 1; t < 5; ++t) {
    const auto& s = model.seen[t];
    if (s.points.size() != t) return {false, fmt("step %d saw %d points", int(t), int(s.points.size()))};
    if (!(s.prev_mask == threshold(model.given[t - 1].prob, 0.5f))) return {false, "mask prompt is not the last prediction"};
    if (!(s.prev_conf_bin == threshold(model.given[t - 1].conf, 0.3f)))
      return {false, "confidence prompt is not the last critic map"};
    if (s.step != int(t)) return {false, "step counter out of order"};
  }
  return {true, "5 predictions; step 0 unprompted; dense prompts carry step t-1 outputs"};
}

// --- sliding window ----------------------------------------------------------------

Outcome sliding_exactness() {
  netblocks::ModelConfig c;
  c.crop = cube(32);
  c.encoder.embed_dim = 8;
  c.encoder.depths = {2, 1, 1, 2};
  c.encoder.heads = {1, 2, 2, 4};
  c.decoder.mlp_dim = 64;
  c.critic.channels = {4, 8};
  c.seed = 3;
  netblocks::Sat3dNet net(c);
  std::mt19937 rng(9);
  std::normal_distribution<float> nd;
  Volume v;
  v.data = ScalarGrid(cube(32));
  for (auto& x : v.data.values()) x = nd(rng);
  PromptState s(cube(32));
  s.points = {{{4, 20, 9}, 1}, {{30, 2, 17}, 0}};
  s.prev_mask.at({10, 10, 10}) = 1;
  inference::NetStepModel model(net);
  const auto out = model.forward(v, s);
  const ScalarGrid direct =
      inference::logistic(net.predict_logits(v, s.points, s.prev_mask.data, s.prev_conf_bin.data));
  const bool exact = out.prob == direct && out.conf == net.critic_map(direct);

  double worst = 0;
  std::mt19937_64 r2(4);
  std::uniform_int_distribution<int> side(8, 90);
  std::uniform_real_distribution<double> ov(0, 0.9);
  for (int t = 0; t < 40; ++t) {
    const auto plan = inference::plan_windows({side(r2), side(r2), side(r2)}, {32, 24, 40}, ov(r2));
    const ScalarGrid w = inference::normalised_weight_sum(plan);
    worst = std::max(worst, double((w.values() - 1.0f).abs().maxCoeff()));
  }
  return {exact && worst <= 1e-6,
          fmt("single window %s; max |weight sum - 1| = %.2g over 40 plans", exact ? "bit-identical" : "differs", worst)};
}

// --- statistics ----------------------------------------------------------------------

// Two-sided exact p by enumerating all 2^n sign patterns of the tied ranks.
double wilcoxon_enumerated(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  const int n = int(d.size());
  if (n == 0) return 1.0;
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<double> rank(d.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    for (std::size_t q = i; q <= j; ++q) rank[idx[q]] = (double(i) + double(j)) / 2 + 1;
    i = j + 1;
  }
  double wplus = 0, total = 0;
  for (int i = 0; i < n; ++i) {
    total += rank[std::size_t(i)];
    if (d[std::size_t(i)] > 0) wplus += rank[std::size_t(i)];
  }
  const double observed = std::min(wplus, total - wplus);
  long extreme = 0;
  for (long mask = 0; mask < (1L << n); ++mask) {
    double w = 0;
    for (int i = 0; i < n; ++i)
      if (mask & (1L << i)) w += rank[std::size_t(i)];
    if (std::min(w, total - w) <= observed + 1e-9) ++extreme;
  }
  return std::min(1.0, double(extreme) / double(1L << n));
}

Outcome wilcoxon_sanity() {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> len(5, 12), coarse(0, 6);
  std::normal_distribution<double> nd;
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const int n = len(rng);
    Eigen::VectorXd x(n), y(n);
    for (int i = 0; i < n; ++i) {
      // Coarse values on half of the trials so ties and zeros occur.
      x[i] = t % 2 ? coarse(rng) : nd(rng);
      y[i] = t % 2 ? coarse(rng) : nd(rng) + 0.3;
    }
    // Keep at least five non-zero differences.
    int nz = 0;
    for (int i = 0; i < n; ++i) nz += x[i] != y[i];
    if (nz < 5) {
      for (int i = 0; i < n; ++i) y[i] = x[i] + 1 + i;
    }
    const auto r = stats::wilcoxon_signed_rank(x, y, stats::WilcoxonMethod::Exact);
    worst = std::max(worst, std::abs(r.p.value - wilcoxon_enumerated(x, y)));
  }
  Eigen::VectorXd x(8);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  const double same = stats::wilcoxon_signed_rank(x, x).p.value;
  return {worst <= 1e-12 && same == 1.0, fmt("50 samples, max |p - enumeration| = %.2g; p(x, x) = %g", worst, same)};
}

// --- training --------------------------------------------------------------------------

struct OverfitState {
  std::unique_ptr<netblocks::Sat3dNet> net;
  std::string log;
  bool trained = false;
};

OverfitState g_overfit;

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  const netblocks::ModelConfig mc = netblocks::ModelConfig::desk(64);
  if (mc.encoder.embed_dim != 48) return {false, "desk model is not embed_dim 48"};
  volgrid::PhantomSpec spec;  // 64^3, radius 6-12
  spec.seed = 1;
  const auto train = dataset::prepare_all(dataset::make_phantoms(2, spec), mc.crop);
  trainer::TrainConfig tc = trainer::TrainConfig::desk();
  tc.epochs = 1000;
  tc.t_max = 1000;
  tc.max_steps = 1000;
  tc.target_dice = 0.90;
  tc.augment = false;
  tc.eval_every = 0;
  tc.seed = 1;
  g_overfit.net = std::make_unique<netblocks::Sat3dNet>(mc);
  std::ostringstream log;
  trainer::FitOptions fo;
  fo.log = &log;
  const auto r = trainer::fit(*g_overfit.net, train, {}, tc, fo);
  g_overfit.log = log.str();
  g_overfit.trained = true;
  const double secs = seconds_since(t0);
  const double dice = r.epochs.empty() ? 0.0 : r.epochs.back().train_dice;
  return {r.reached_target && r.steps <= 1000 && secs < 7200,
          fmt("training Dice %.4f after %ld optimiser steps, %.0f s wall-clock on %s", dice, r.steps, secs,
              "one CPU thread")};
}

Outcome weighted_total() {
  // Default weights, checked on every logged step of the overfit run plus a
  // few steps of a small model.
  const losses::LossWeights w;
  if (w.lambda_c != 0.01 || w.lambda_u != 0.1) return {false, "default weights differ"};
  std::vector<losses::LossReport> reports;
  std::istringstream lines(g_overfit.log);
  std::string line;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("kind") == "step") reports.push_back(j.at("loss").get<losses::LossReport>());
  }
  netblocks::ModelConfig c;
  c.crop = cube(32);
  c.encoder.embed_dim = 8;
  c.encoder.depths = {2, 1, 1, 2};
  c.encoder.heads = {1, 2, 2, 4};
  c.decoder.mlp_dim = 64;
  c.critic.channels = {4, 8};
  netblocks::Sat3dNet net(c);
  volgrid::PhantomSpec spec;
  spec.grid = cube(32);
  spec.min_radius = 4;
  spec.max_radius = 8;
  const auto data = dataset::prepare_all(dataset::make_phantoms(2, spec), cube(32));
  trainer::Trainer tr(net, trainer::TrainConfig::desk());
  for (int s = 0; s < 3; ++s) reports.push_back(tr.train_step({&data[0], &data[1]}, {0, 1}, s).loss);
  double worst = 0;
  for (const auto& r : reports) {
    const double want = r.l_s + 0.01 * r.l_c + 0.1 * r.l_u;
    worst = std::max(worst, std::abs(r.l_total - want) / std::max(1.0, std::abs(want)));
  }
  const bool enough = reports.size() > 3 && g_overfit.trained;
  return {enough && worst <= 4 * std::numeric_limits<double>::epsilon(),
          fmt("%d steps, max relative deviation %.2g", int(reports.size()), worst)};
}

Outcome budget_trend() {
  if (!g_overfit.trained) return {false, "needs the trained overfit model"};
  volgrid::PhantomSpec spec;
  spec.seed = 5000;
  const auto cases = dataset::prepare_all(dataset::make_phantoms(20, spec), cube(64));
  inference::NetStepModel model(*g_overfit.net);
  double k5 = 0, k20 = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    promptloop::Rng a = trainer::stream(77, -1, i, 2), b = trainer::stream(77, -1, i, 2);
    k5 += inference::eval_case(model, cases[i].volume, cases[i].mask, 5, a).best_report().dsc;
    k20 += inference::eval_case(model, cases[i].volume, cases[i].mask, 20, b).best_report().dsc;
  }
  k5 /= double(cases.size());
  k20 /= double(cases.size());
  return {k20 >= k5 - 0.01, fmt("20 phantoms: mean best DSC K=5 %.4f, K=20 %.4f", k5, k20)};
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  run("friedman_reproduction", friedman_reproduction);
  run("per_block_rank_agreement", rank_agreement);
  run("surface_distance_oracle", surface_oracle);
  run("dsc_iou_identity", dsc_iou_identity);
  run("loss_gradient_checks", gradient_checks);
  run("episode_contract", episode_contract);
  run("sliding_window_exactness", sliding_exactness);
  run("uncertainty_loss_null_case", uncertainty_null);
  run("wilcoxon_exact_sanity", wilcoxon_sanity);
  run("overfit_smoke", overfit_smoke);
  run("weighted_total_loss", weighted_total);
  run("prompt_budget_trend", budget_trend);
  std::printf("%d failure(s)\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
