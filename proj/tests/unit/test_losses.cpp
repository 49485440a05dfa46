#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "sat3d/losses.hpp"

using namespace sat3d::losses;
using A = Array<double>;

namespace {

A uniform(int n, unsigned seed, double lo = 0.05, double hi = 0.95) {
  std::mt19937 rng{seed};
  std::uniform_real_distribution<double> u(lo, hi);
  A a(n);
  for (auto& x : a) x = u(rng);
  return a;
}

A bernoulli(int n, unsigned seed, double p = 0.4) {
  std::mt19937 rng{seed};
  std::bernoulli_distribution b(p);
  A a(n);
  for (auto& x : a) x = b(rng) ? 1.0 : 0.0;
  return a;
}

// Central differences at step 1e-4; relative error against max(1, |numeric|).
double fd_error(const std::function<double(const A&)>& f, const A& x, const A& analytic) {
  const double h = 1e-4;
  double worst = 0;
  A y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double fp = f(y);
    y[i] = x[i] - h;
    const double fm = f(y);
    y[i] = x[i];
    const double num = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(num - analytic[i]) / std::max(1.0, std::abs(num)));
  }
  return worst;
}

constexpr int kVoxels = 4 * 4 * 4;

}  // namespace

TEST_CASE("dice+ce examples") {
  const A gt = bernoulli(kVoxels, 1);
  const auto perfect = dice_ce_loss<double>(gt, gt);
  CHECK(perfect.dice <= 1e-5);
  CHECK(perfect.ce < 1e-6);  // clamped log(1 - 1e-7)
  const auto miss = dice_ce_loss<double>(1.0 - gt, gt);
  CHECK(miss.dice == doctest::Approx(1.0).epsilon(1e-4));
  A half_gt(kVoxels);
  for (int i = 0; i < kVoxels; ++i) half_gt[i] = i % 2;
  CHECK(bce_loss<double>(A::Constant(kVoxels, 0.5), half_gt).value ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("adversarial and critic examples") {
  CHECK(generator_adv_loss<double>(A::Ones(8)).value == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(generator_adv_loss<double>(A::Constant(8, std::exp(-1.0))).value ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(generator_adv_loss<double>(A::Constant(8, 0.5)).value ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(critic_loss<double>(A::Ones(8), A::Zero(8)).value < 1e-6);
  CHECK(critic_loss<double>(A::Constant(8, 0.5), A::Constant(8, 0.5)).value ==
        doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("uncertainty-masked CE examples") {
  const A p = uniform(kVoxels, 2), g = bernoulli(kVoxels, 3);
  const auto null = uncertainty_masked_ce<double>(p, g, A::Constant(kVoxels, 0.3), 0.3);
  CHECK(null.value == 0.0);
  CHECK((null.grad == 0.0).all());
  CHECK(uncertainty_masked_ce<double>(A::Ones(8), A::Ones(8), A::Ones(8), 0.3).value < 1e-6);
  CHECK(uncertainty_masked_ce<double>(A::Constant(8, 0.5), A::Ones(8), A::Ones(8), 0.3).value ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("total generator loss arithmetic") {
  CHECK(total_generator_loss(1, 0, 0).l_total == 1.0);
  CHECK(total_generator_loss(0.5, 2.0, 1.0).l_total == doctest::Approx(0.62).epsilon(1e-15));
  LossWeights zero;
  zero.lambda_c = zero.lambda_u = 0;
  CHECK(total_generator_loss(0.7, 3.0, 4.0, zero).l_total == 0.7);
  std::mt19937 rng{4};
  std::uniform_real_distribution<double> u(0, 5);
  for (int i = 0; i < 100; ++i) {
    const double s = u(rng), c = u(rng), un = u(rng);
    CHECK(total_generator_loss(s, c, un).l_total == s + 0.01 * c + 0.1 * un);
  }
}

TEST_CASE("analytic gradients match finite differences in double") {
  for (unsigned seed = 10; seed < 15; ++seed) {
    const A p = uniform(kVoxels, seed), g = bernoulli(kVoxels, seed + 100);
    const A crit = uniform(kVoxels, seed + 200, 0.0, 1.0);
    const A crit2 = uniform(kVoxels, seed + 300);

    CHECK(fd_error([&](const A& x) { return dice_loss<double>(x, g).value; }, p,
                   dice_loss<double>(p, g).grad) < 1e-3);
    CHECK(fd_error([&](const A& x) { return bce_loss<double>(x, g).value; }, p,
                   bce_loss<double>(p, g).grad) < 1e-3);
    CHECK(fd_error([&](const A& x) { return dice_ce_loss<double>(x, g).value; }, p,
                   dice_ce_loss<double>(p, g).grad) < 1e-3);
    CHECK(fd_error([&](const A& x) { return generator_adv_loss<double>(x).value; }, crit2,
                   generator_adv_loss<double>(crit2).grad) < 1e-3);
    // Masked case at T = 0.3 with a mixed indicator.
    const auto u = uncertainty_masked_ce<double>(p, g, crit, 0.3);
    CHECK((crit > 0.3).count() > 0);
    CHECK((crit <= 0.3).count() > 0);
    CHECK(fd_error([&](const A& x) { return uncertainty_masked_ce<double>(x, g, crit, 0.3).value; },
                   p, u.grad) < 1e-3);
    const auto cl = critic_loss<double>(crit2, p);
    CHECK(fd_error([&](const A& x) { return critic_loss<double>(x, p).value; }, crit2,
                   cl.grad_real) < 1e-3);
    CHECK(fd_error([&](const A& x) { return critic_loss<double>(crit2, x).value; }, p,
                   cl.grad_fake) < 1e-3);
    // Through the logistic, w.r.t. logits.
    const A z = uniform(kVoxels, seed + 400, -3, 3);
    auto sig = [](const A& x) { return A(1.0 / (1.0 + (-x).exp())); };
    const auto dz = through_sigmoid<double>(dice_ce_loss<double>(sig(z), g).grad, sig(z));
    CHECK(fd_error([&](const A& x) { return dice_ce_loss<double>(sig(x), g).value; }, z, dz) < 1e-3);
  }
}

TEST_CASE("losses are non-negative") {
  for (unsigned seed = 20; seed < 40; ++seed) {
    const A p = uniform(kVoxels, seed, 0, 1), g = bernoulli(kVoxels, seed + 1);
    const A c = uniform(kVoxels, seed + 2, 0, 1);
    CHECK(dice_ce_loss<double>(p, g).value >= 0);
    CHECK(generator_adv_loss<double>(c).value >= 0);
    CHECK(uncertainty_masked_ce<double>(p, g, c, 0.3).value >= 0);
    CHECK(critic_loss<double>(c, p).value >= 0);
  }
}

TEST_CASE("masking linearity over disjoint indicator sets") {
  const A p = uniform(kVoxels, 50), g = bernoulli(kVoxels, 51, 0.7);
  // M1 = first half, M2 = second half, expressed through the critic map.
  A c1 = A::Zero(kVoxels), c2 = A::Zero(kVoxels);
  c1.head(20).setOnes();
  c2.tail(kVoxels - 20).setOnes();
  const A both = c1 + c2;
  const double l1 = uncertainty_masked_ce<double>(p, g, c1, 0.3).value;
  const double l2 = uncertainty_masked_ce<double>(p, g, c2, 0.3).value;
  const double l12 = uncertainty_masked_ce<double>(p, g, both, 0.3).value;
  CHECK(l12 == doctest::Approx((20 * l1 + (kVoxels - 20) * l2) / kVoxels).epsilon(1e-12));
}

TEST_CASE("dice is invariant under joint voxel permutation") {
  const A p = uniform(kVoxels, 60), g = bernoulli(kVoxels, 61);
  std::vector<int> perm(kVoxels);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937{62});
  A pp(kVoxels), gp(kVoxels);
  for (int i = 0; i < kVoxels; ++i) {
    pp[i] = p[perm[i]];
    gp[i] = g[perm[i]];
  }
  CHECK(dice_loss<double>(pp, gp).value == doctest::Approx(dice_loss<double>(p, g).value).epsilon(1e-14));
}

TEST_CASE("loss report serialises as one JSON object") {
  LossReport r = total_generator_loss(0.5, 2.0, 1.0);
  r.l_dice = 0.3;
  r.l_ce = 0.2;
  nlohmann::json j = r;
  CHECK(j.dump().find('\n') == std::string::npos);
  CHECK(j.get<LossReport>().l_total == r.l_total);
}
