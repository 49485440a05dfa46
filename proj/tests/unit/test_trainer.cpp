#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>

#include "sat3d/trainer.hpp"
#include "sat3d/volgrid/phantom.hpp"

using namespace sat3d;
using namespace sat3d::trainer;

namespace {

netblocks::ModelConfig tiny() {
  netblocks::ModelConfig c;
  c.crop = cube(32);
  c.encoder.embed_dim = 8;
  c.encoder.depths = {2, 1, 1, 2};
  c.encoder.heads = {1, 2, 2, 4};
  c.decoder.mlp_dim = 64;
  c.critic.channels = {4, 8};
  c.seed = 9;
  return c;
}

TrainConfig quick() {
  TrainConfig c = TrainConfig::desk();
  c.batch_size = 2;
  c.m = 3;
  c.augment = false;
  c.eval_every = 0;
  c.seed = 21;
  return c;
}

std::vector<Sample> phantoms(int n) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    volgrid::PhantomSpec s;
    s.grid = cube(32);
    s.min_radius = 5;
    s.max_radius = 8;
    s.seed = std::uint64_t(100 + i);
    auto p = volgrid::generate_phantom(s);
    out.push_back({std::move(p.volume), std::move(p.mask), "ph" + std::to_string(i)});
  }
  return out;
}

std::vector<const Sample*> ptrs(const std::vector<Sample>& s) {
  std::vector<const Sample*> p;
  for (const auto& x : s) p.push_back(&x);
  return p;
}

bool any_grad(const nn::ParameterStore& store, const std::string& prefix) {
  for (const auto& p : store.trainable(prefix))
    if (p.var.has_grad() && p.var.grad().cwiseAbs().maxCoeff() > 0) return true;
  return false;
}

double max_diff(const nn::ParameterStore& a, const nn::ParameterStore& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.items().size(); ++i)
    d = std::max<double>(d, (a.items()[i].var.value() - b.items()[i].var.value()).cwiseAbs().maxCoeff());
  return d;
}

struct FixedModel {
  ScalarGrid p;
  inference::StepOutput forward(const Volume&, const PromptState&) {
    return {p, ConfidenceMap(p.extent(), 0.5f)};
  }
};

}  // namespace

TEST_CASE("train config profiles, validation and JSON") {
  const TrainConfig p = TrainConfig::paper();
  CHECK(p.base_lr == doctest::Approx(8e-4));
  CHECK(p.batch_size == 3);
  CHECK(p.accumulation == 20);
  CHECK(p.epochs == 500);
  CHECK(p.t_max == 500);
  CHECK(p.m == 5);
  CHECK(p.lr.prompt == doctest::Approx(0.1));
  CHECK(p.lr.decoder == doctest::Approx(0.1));
  const TrainConfig d = TrainConfig::desk();
  CHECK(d.batch_size == 2);
  CHECK(d.accumulation == 1);

  nlohmann::json j = p;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  TrainConfig bad = p;
  bad.accumulation = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.weights.T = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("learning rate follows the cosine closed form") {
  netblocks::Sat3dNet net(tiny());
  TrainConfig c = quick();
  c.t_max = 40;
  c.eta_min = 1e-5;
  Trainer tr(net, c);
  for (int e : {0, 1, 10, 20, 39, 40}) {
    const double want = 1e-5 + (8e-4 - 1e-5) * (1 + std::cos(std::numbers::pi * e / 40.0)) / 2;
    CHECK(tr.lr_at(e) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(tr.lr_at(0) == doctest::Approx(8e-4));
  CHECK(tr.lr_at(40) == doctest::Approx(1e-5));
}

TEST_CASE("training steps are deterministic") {
  const auto data = phantoms(2);
  netblocks::Sat3dNet a(tiny()), b(tiny());
  Trainer ta(a, quick()), tb(b, quick());
  for (int s = 0; s < 2; ++s) {
    const auto ra = ta.train_step(ptrs(data), {0, 1}, 0);
    const auto rb = tb.train_step(ptrs(data), {0, 1}, 0);
    CHECK(ra.loss.l_total == rb.loss.l_total);
    CHECK(ra.loss.l_critic == rb.loss.l_critic);
    CHECK(ra.stepped);
  }
  CHECK(a.params().hash() == b.params().hash());
}

TEST_CASE("generator and critic updates touch disjoint parameters") {
  const auto data = phantoms(2);
  netblocks::Sat3dNet net(tiny());
  Trainer tr(net, quick());
  auto& s = net.params();
  const auto critic0 = s.hash("critic."), enc0 = s.hash("encoder."), pr0 = s.hash("prompt."),
             dec0 = s.hash("decoder.");

  Trainer::Fakes fakes;
  tr.generator_phase(ptrs(data), {0, 1}, 0, &fakes);
  CHECK(any_grad(s, "encoder."));
  CHECK(any_grad(s, "decoder."));
  CHECK_FALSE(any_grad(s, "critic."));
  tr.generator_update(0);
  CHECK(s.hash("critic.") == critic0);
  CHECK(s.hash("encoder.") != enc0);
  CHECK(s.hash("prompt.") != pr0);
  CHECK(s.hash("decoder.") != dec0);
  REQUIRE(fakes.probs.size() == 2);
  CHECK(fakes.probs[0].size() == 3);

  const auto gen1 = s.hash("encoder.") ^ s.hash("prompt.") ^ s.hash("decoder.");
  tr.critic_phase(ptrs(data), fakes);
  CHECK(any_grad(s, "critic."));
  CHECK_FALSE(any_grad(s, "encoder."));
  CHECK_FALSE(any_grad(s, "decoder."));
  tr.critic_update(0);
  CHECK(s.hash("critic.") != critic0);
  CHECK((s.hash("encoder.") ^ s.hash("prompt.") ^ s.hash("decoder.")) == gen1);
}

TEST_CASE("with zero adversarial weights the critic has no influence on the generator") {
  const auto data = phantoms(1);
  TrainConfig c = quick();
  c.weights.lambda_c = 0;
  c.weights.lambda_u = 0;
  c.m = 1;  // later steps would see the critic through the dense prompt
  netblocks::Sat3dNet a(tiny()), b(tiny());
  for (const auto& p : b.params().trainable("critic.")) {
    nn::Var v = p.var;
    v.mutable_value().array() += 0.3f;
  }
  Trainer ta(a, c), tb(b, c);
  const auto ra = ta.generator_phase(ptrs(data), {0}, 0, nullptr);
  const auto rb = tb.generator_phase(ptrs(data), {0}, 0, nullptr);
  CHECK(ra.loss.l_s == rb.loss.l_s);
  CHECK(ra.loss.l_total == doctest::Approx(ra.loss.l_s).epsilon(1e-15));
  for (const char* pre : {"encoder.", "prompt.", "decoder."}) {
    const auto pa = a.params().trainable(pre), pb = b.params().trainable(pre);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (!pa[i].var.has_grad()) continue;
      CHECK((pa[i].var.grad() - pb[i].var.grad()).cwiseAbs().maxCoeff() == 0.0f);
    }
  }
}

TEST_CASE("reported total equals the weighted sum of its parts") {
  const auto data = phantoms(2);
  netblocks::Sat3dNet net(tiny());
  TrainConfig c = quick();
  c.weights.lambda_c = 0.05;
  c.weights.lambda_u = 0.2;
  Trainer tr(net, c);
  for (int s = 0; s < 2; ++s) {
    const auto r = tr.train_step(ptrs(data), {0, 1}, s);
    CHECK(r.loss.l_total == doctest::Approx(r.loss.l_s + 0.05 * r.loss.l_c + 0.2 * r.loss.l_u).epsilon(1e-12));
    CHECK(r.loss.l_s == doctest::Approx(r.loss.l_dice + r.loss.l_ce).epsilon(1e-9));
    CHECK(std::isfinite(r.loss.l_critic));
  }
}

TEST_CASE("gradient accumulation matches a larger batch") {
  const auto data = phantoms(2);
  netblocks::Sat3dNet a(tiny()), b(tiny());
  TrainConfig big = quick();
  big.batch_size = 2;
  big.accumulation = 1;
  TrainConfig acc = quick();
  acc.batch_size = 1;
  acc.accumulation = 2;
  Trainer ta(a, big), tb(b, acc);
  ta.train_step(ptrs(data), {0, 1}, 0);
  const auto r1 = tb.train_step({&data[0]}, {0}, 0);
  CHECK_FALSE(r1.stepped);
  const auto r2 = tb.train_step({&data[1]}, {1}, 0);
  CHECK(r2.stepped);
  CHECK(ta.global_step() == tb.global_step());
  CHECK(max_diff(a.params(), b.params()) <= 1e-6);
}

TEST_CASE("per-group learning rates keep a 1 : 0.1 : 0.1 ratio") {
  const auto data = phantoms(1);
  netblocks::Sat3dNet net(tiny());
  TrainConfig c = quick();
  c.weight_decay = 0;
  Trainer tr(net, c);
  nn::ParameterStore before;
  for (const auto& p : net.params().items()) before.add(p.name, p.var.value());
  tr.generator_phase(ptrs(data), {0}, 0, nullptr);
  tr.generator_update(0);
  // The first Adam step moves every entry with a clear gradient by ~lr.
  auto step_size = [&](const std::string& prefix) {
    double m = 0;
    for (const auto& p : net.params().trainable(prefix))
      m = std::max<double>(m, (p.var.value() - before.get(p.name).value()).cwiseAbs().maxCoeff());
    return m;
  };
  const double enc = step_size("encoder."), pr = step_size("prompt."), dec = step_size("decoder.");
  CHECK(enc == doctest::Approx(8e-4).epsilon(0.01));
  CHECK(pr / enc == doctest::Approx(0.1).epsilon(0.01));
  CHECK(dec / enc == doctest::Approx(0.1).epsilon(0.01));
  CHECK(step_size("critic.") == 0.0);
}

TEST_CASE("critic loss decreases when the critic trains on fixed predictions") {
  const auto data = phantoms(2);
  netblocks::Sat3dNet net(tiny());
  Trainer tr(net, quick());
  Trainer::Fakes fakes;
  tr.generator_phase(ptrs(data), {0, 1}, 0, &fakes);
  tr.generator_optimizer().zero_grad();
  std::vector<double> l;
  for (int i = 0; i < 50; ++i) {
    l.push_back(tr.critic_phase(ptrs(data), fakes));
    tr.critic_update(0);
  }
  CHECK(l.back() < l.front());
  CHECK(l.back() < 0.8 * l.front());
}

TEST_CASE("non-finite losses stop training") {
  const auto data = phantoms(1);
  netblocks::Sat3dNet net(tiny());
  Trainer tr(net, quick());
  nn::Var w = net.params().trainable("decoder.").back().var;
  w.mutable_value().setConstant(std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS(tr.train_step(ptrs(data), {0}, 0), TrainingError);
}

TEST_CASE("fit resumes exactly from the latest checkpoint") {
  const auto data = phantoms(3);
  const auto dir = std::filesystem::temp_directory_path() / "sat3d_resume_test";
  std::filesystem::remove_all(dir);
  TrainConfig c = quick();
  c.epochs = 2;
  c.augment = true;

  netblocks::Sat3dNet a(tiny());
  std::ostringstream log;
  FitOptions fo;
  fo.out_dir = dir / "full";
  fo.log = &log;
  const auto full = fit(a, data, {}, c, fo);
  CHECK(full.epochs.size() == 2);
  CHECK(full.steps == 4);  // two batches per epoch, the second one partial
  CHECK(std::filesystem::exists(dir / "full" / "latest.ckpt"));
  CHECK(std::filesystem::exists(dir / "full" / "loss_best.ckpt"));
  CHECK(std::filesystem::exists(dir / "full" / "dice_best.ckpt"));
  std::istringstream lines(log.str());
  std::string line;
  int steps = 0, epochs = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    (j.at("kind") == "step" ? steps : epochs)++;
  }
  CHECK(steps == 4);
  CHECK(epochs == 2);

  netblocks::Sat3dNet b(tiny());
  FitOptions first;
  first.out_dir = dir / "split";
  first.stop_after_epoch = 0;
  fit(b, data, {}, c, first);
  netblocks::Sat3dNet b2(tiny());
  FitOptions second;
  second.out_dir = dir / "split2";
  second.resume = dir / "split" / "latest.ckpt";
  const auto rest = fit(b2, data, {}, c, second);
  REQUIRE(rest.epochs.size() == 1);
  CHECK(rest.epochs[0].epoch == 1);
  CHECK(rest.epochs[0].loss.l_total == full.epochs[1].loss.l_total);
  CHECK(a.params().hash() == b2.params().hash());

  // The checkpoint also loads as a plain model.
  const auto m = netblocks::load_model(dir / "full" / "latest.ckpt");
  CHECK(m->params().hash() == a.params().hash());
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate_epoch averages best-candidate reports") {
  const auto data = phantoms(2);
  FixedModel oracle{data[0].mask.data.cast<float>()};
  const std::vector<Sample> one{data[0]};
  CHECK(evaluate_epoch(oracle, one, 5).dsc == 1.0);
  FixedModel empty{ScalarGrid(cube(32))};
  const auto r = evaluate_epoch(empty, data, 5);
  CHECK(r.dsc == 0.0);
  CHECK(r.empty_flag);
  CHECK(r.rve == 1.0);
}
