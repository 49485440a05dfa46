#include "sat3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "sat3d/metrics.hpp"
#include "sat3d/nn/ops.hpp"
#include "sat3d/volgrid/preprocess.hpp"

namespace sat3d::trainer {

namespace {

using ArrayD = losses::Array<double>;

ArrayD to_array(const nn::Matrix& column) {
  return Eigen::Map<const Eigen::ArrayXf>(column.data(), column.size()).cast<double>();
}

nn::Matrix to_column(const ArrayD& a, double scale) {
  nn::Matrix m(a.size(), 1);
  Eigen::Map<Eigen::ArrayXf>(m.data(), m.size()) = (a * scale).cast<float>();
  return m;
}

ArrayD mask_array(const BinaryMask& m) {
  return m.data.values().cast<double>();
}

BinaryMask above(const nn::Matrix& column, Extent3 e, Spacing s, float t) {
  BinaryMask out(e, s);
  out.data.values() =
      (Eigen::Map<const Eigen::ArrayXf>(column.data(), column.size()) > t).cast<std::uint8_t>();
  return out;
}

const char* kGenPrefixes[] = {"encoder.", "prompt.", "decoder."};

void finite_or_throw(const losses::LossReport& r, const TrainConfig& cfg, long step) {
  const double vals[] = {r.l_s, r.l_c, r.l_u, r.l_total, r.l_critic};
  for (double v : vals)
    if (!std::isfinite(v)) {
      nlohmann::json snap = {{"global_step", step}, {"loss", r}, {"config", cfg}};
      throw TrainingError("non-finite loss: " + snap.dump());
    }
}

}  // namespace

// --- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (!(base_lr > 0)) throw ConfigError("base learning rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(t_max > 0)) throw ConfigError("cosine horizon must be positive");
  if (eta_min < 0 || eta_min > base_lr) throw ConfigError("eta_min must lie in [0, base_lr]");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (accumulation < 1) throw ConfigError("accumulation must be positive");
  if (m < 1) throw ConfigError("episode length must be positive");
  if (eval_budget < 1) throw ConfigError("evaluation budget must be positive");
  if (lr.encoder < 0 || lr.prompt < 0 || lr.decoder < 0 || lr.critic < 0)
    throw ConfigError("learning-rate multipliers must be non-negative");
  weights.validate();
}

TrainConfig TrainConfig::paper() { return {}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 300;
  c.t_max = 300;
  c.batch_size = 2;
  c.accumulation = 1;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay},
       {"betas", {c.beta1, c.beta2}},
       {"lr_multipliers",
        {{"encoder", c.lr.encoder}, {"prompt", c.lr.prompt}, {"decoder", c.lr.decoder}, {"critic", c.lr.critic}}},
       {"t_max", c.t_max},
       {"eta_min", c.eta_min},
       {"batch_size", c.batch_size},
       {"accumulation", c.accumulation},
       {"seed", c.seed},
       {"m", c.m},
       {"lambda_c", c.weights.lambda_c},
       {"lambda_u", c.weights.lambda_u},
       {"T", c.weights.T},
       {"epsilon", c.weights.epsilon},
       {"augment", c.augment},
       {"max_steps", c.max_steps},
       {"target_dice", c.target_dice},
       {"eval_every", c.eval_every},
       {"eval_budget", c.eval_budget}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  // Missing keys keep their defaults so partial configs work.
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("epochs", c.epochs);
  get("base_lr", c.base_lr);
  get("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    c.beta1 = j.at("betas").at(0);
    c.beta2 = j.at("betas").at(1);
  }
  if (j.contains("lr_multipliers")) {
    const auto& l = j.at("lr_multipliers");
    if (l.contains("encoder")) c.lr.encoder = l.at("encoder");
    if (l.contains("prompt")) c.lr.prompt = l.at("prompt");
    if (l.contains("decoder")) c.lr.decoder = l.at("decoder");
    if (l.contains("critic")) c.lr.critic = l.at("critic");
  }
  get("t_max", c.t_max);
  get("eta_min", c.eta_min);
  get("batch_size", c.batch_size);
  get("accumulation", c.accumulation);
  get("seed", c.seed);
  get("m", c.m);
  get("lambda_c", c.weights.lambda_c);
  get("lambda_u", c.weights.lambda_u);
  get("T", c.weights.T);
  get("epsilon", c.weights.epsilon);
  get("augment", c.augment);
  get("max_steps", c.max_steps);
  get("target_dice", c.target_dice);
  get("eval_every", c.eval_every);
  get("eval_budget", c.eval_budget);
}

void to_json(nlohmann::json& j, const StepReport& r) {
  j = {{"loss", r.loss},           {"dice_first", r.dice_first}, {"dice_last", r.dice_last},
       {"stepped", r.stepped},     {"global_step", r.global_step}, {"lr", r.lr}};
}

promptloop::Rng stream(std::uint64_t seed, int epoch, std::size_t sample, int purpose) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch),
                    std::uint32_t(sample), std::uint32_t(std::uint64_t(sample) >> 32), std::uint32_t(purpose)};
  return promptloop::Rng(seq);
}

// --- trainer ---------------------------------------------------------------

Trainer::Trainer(netblocks::Sat3dNet& net, TrainConfig cfg)
    : net_(&net),
      cfg_(cfg),
      gen_opt_({cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}),
      crit_opt_({cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}) {
  cfg_.validate();
  auto& p = net.params();
  gen_opt_.add_group(p.trainable("encoder."), cfg_.lr.encoder);
  gen_opt_.add_group(p.trainable("prompt."), cfg_.lr.prompt);
  gen_opt_.add_group(p.trainable("decoder."), cfg_.lr.decoder);
  crit_opt_.add_group(p.trainable("critic."), cfg_.lr.critic);
}

double Trainer::lr_at(int epoch) const {
  return nn::cosine_lr(cfg_.base_lr, std::min<double>(epoch, cfg_.t_max), cfg_.t_max, cfg_.eta_min);
}

StepReport Trainer::generator_phase(const std::vector<const Sample*>& batch,
                                    const std::vector<std::size_t>& indices, int epoch, Fakes* fakes) {
  if (batch.empty() || batch.size() != indices.size()) throw ConfigError("batch and indices differ");
  auto& store = net_->params();
  // The critic is a fixed judge during the generator update.
  store.set_trainable("critic.", false);
  for (const char* pre : kGenPrefixes) store.set_trainable(pre, true);

  const Extent3 crop = net_->config().crop;
  const auto& w = cfg_.weights;
  const int m = cfg_.m;
  const double seed_scale = 1.0 / (double(batch.size()) * cfg_.accumulation);
  double sum_ls = 0, sum_dice = 0, sum_ce = 0, sum_lc = 0, sum_lu = 0, d_first = 0, d_last = 0;
  if (fakes) fakes->probs.assign(batch.size(), {});

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& s = *batch[b];
    if (s.volume.extent() != crop || s.mask.extent() != crop)
      throw ShapeError("training samples must match the model crop");
    if (!s.mask.any()) throw NoForegroundError("training sample " + s.id + " has no foreground");
    promptloop::Rng rng = stream(cfg_.seed, epoch, indices[b], 0);
    const ArrayD gt = mask_array(s.mask);

    const netblocks::ImageEmbedding img = net_->encode_image(s.volume);
    PromptState state(crop, s.mask.spacing);
    BinaryMask pred(crop, s.mask.spacing);
    nn::Var total;
    for (int t = 0; t < m; ++t) {
      if (t > 0) state.points.push_back(promptloop::sample_prompt(pred, s.mask, promptloop::Mode::Train, rng));
      const nn::Var logits =
          net_->decode_mask(img, net_->encode_prompts(state.points, state.prev_mask.data, state.prev_conf_bin.data));
      const nn::Var prob = nn::sigmoid(logits);
      const nn::Var conf = net_->critic_forward(prob);
      const ArrayD p = to_array(prob.value()), c = to_array(conf.value());

      const auto ls = losses::dice_ce_loss<double>(p, gt, w.epsilon);
      const auto lc = losses::generator_adv_loss<double>(c);
      const auto lu = losses::uncertainty_masked_ce<double>(p, gt, c, w.T);
      const double step_total = ls.value + w.lambda_c * lc.value + w.lambda_u * lu.value;
      // Episode loss is the mean over steps; the batch mean and the
      // accumulation mean are folded into the same factor.
      const double k = 1.0 / m;
      const nn::Var step_loss = nn::scalar_with_grad(
          {prob, conf}, float(step_total * k),
          {to_column(ls.grad + w.lambda_u * lu.grad, k), to_column(lc.grad, k * w.lambda_c)});
      total = total.defined() ? nn::add(total, step_loss) : step_loss;

      sum_ls += ls.value / m;
      sum_dice += ls.dice / m;
      sum_ce += ls.ce / m;
      sum_lc += lc.value / m;
      sum_lu += lu.value / m;

      pred = above(prob.value(), crop, s.mask.spacing, 0.5f);
      const double d = metrics::dsc(pred, s.mask);
      if (t == 0) d_first += d;
      if (t == m - 1) d_last += d;
      state.prev_mask = pred;
      state.prev_conf_bin = above(conf.value(), crop, s.mask.spacing, float(w.T));
      state.step += 1;
      if (fakes) fakes->probs[b].push_back(netblocks::to_grid(prob.value(), crop));
    }
    nn::backward(total, float(seed_scale));
  }
  store.set_trainable("critic.", true);

  const double n = double(batch.size());
  StepReport r;
  r.loss = losses::total_generator_loss(sum_ls / n, sum_lc / n, sum_lu / n, w);
  r.loss.l_dice = sum_dice / n;
  r.loss.l_ce = sum_ce / n;
  r.dice_first = d_first / n;
  r.dice_last = d_last / n;
  return r;
}

double Trainer::critic_phase(const std::vector<const Sample*>& batch, const Fakes& fakes) {
  if (fakes.probs.size() != batch.size()) throw ConfigError("fakes do not match the batch");
  auto& store = net_->params();
  for (const char* pre : kGenPrefixes) store.set_trainable(pre, false);
  store.set_trainable("critic.", true);
  const double seed_scale = 1.0 / (double(batch.size()) * cfg_.accumulation);
  double sum = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& steps = fakes.probs[b];
    if (steps.empty()) throw ConfigError("no predictions for the critic");
    const nn::Var real = net_->critic_forward(netblocks::to_var(batch[b]->mask.data.cast<float>()));
    const ArrayD cr = to_array(real.value());
    nn::Var total;
    const double k = 1.0 / double(steps.size());
    for (const ScalarGrid& p : steps) {
      const nn::Var fake = net_->critic_forward(netblocks::to_var(p));
      const auto cl = losses::critic_loss<double>(cr, to_array(fake.value()));
      const nn::Var l = nn::scalar_with_grad({real, fake}, float(cl.value * k),
                                             {to_column(cl.grad_real, k), to_column(cl.grad_fake, k)});
      total = total.defined() ? nn::add(total, l) : l;
      sum += cl.value * k;
    }
    nn::backward(total, float(seed_scale));
  }
  for (const char* pre : kGenPrefixes) store.set_trainable(pre, true);
  return sum / double(batch.size());
}

void Trainer::generator_update(int epoch) {
  gen_opt_.step(lr_at(epoch));
  gen_opt_.zero_grad();
}

void Trainer::critic_update(int epoch) {
  crit_opt_.step(lr_at(epoch));
  crit_opt_.zero_grad();
}

StepReport Trainer::train_step(const std::vector<const Sample*>& batch,
                               const std::vector<std::size_t>& indices, int epoch) {
  Fakes fakes;
  StepReport r = generator_phase(batch, indices, epoch, &fakes);
  r.loss.l_critic = critic_phase(batch, fakes);
  r.lr = lr_at(epoch);
  finite_or_throw(r.loss, cfg_, global_step_);
  if (++micro_ == cfg_.accumulation) {
    generator_update(epoch);
    critic_update(epoch);
    micro_ = 0;
    ++global_step_;
    r.stepped = true;
  }
  r.global_step = global_step_;
  return r;
}

bool Trainer::flush(int epoch) {
  if (micro_ == 0) return false;
  // Gradients were scaled for a full accumulation window; rescale to the
  // mean over the micro-batches actually seen.
  const double f = double(cfg_.accumulation) / micro_;
  gen_opt_.scale_grads(f);
  crit_opt_.scale_grads(f);
  generator_update(epoch);
  critic_update(epoch);
  micro_ = 0;
  ++global_step_;
  return true;
}

void Trainer::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json config;
  config["model"] = net_->config();
  config["train"] = cfg_;
  config["trainer"] = {{"global_step", global_step_}, {"extra", extra}};
  std::vector<std::pair<std::string, const nn::Matrix*>> tensors;
  for (const auto& p : net_->params().items()) tensors.emplace_back(p.name, &p.var.value());
  nlohmann::json steps = nlohmann::json::object();
  for (const auto* opt : {&gen_opt_, &crit_opt_})
    for (const auto& s : opt->slots()) {
      tensors.emplace_back("adam." + s.name + ".m", &s.m);
      tensors.emplace_back("adam." + s.name + ".v", &s.v);
      steps[s.name] = s.steps;
    }
  config["trainer"]["adam_steps"] = steps;
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  netblocks::write_archive(tmp, config, tensors);
  std::filesystem::rename(tmp, path);
}

nlohmann::json Trainer::load(const std::filesystem::path& path) {
  const netblocks::Archive a = netblocks::read_archive(path);
  if (!a.config.contains("trainer")) throw CheckpointError("checkpoint has no trainer state");
  netblocks::load_parameters(a, net_->params());
  const auto& t = a.config.at("trainer");
  for (auto* opt : {&gen_opt_, &crit_opt_})
    for (auto& s : opt->slots()) {
      const nn::Matrix* mm = a.find("adam." + s.name + ".m");
      const nn::Matrix* vv = a.find("adam." + s.name + ".v");
      if (!mm || !vv) throw CheckpointError("checkpoint lacks optimiser state for " + s.name);
      if (mm->rows() != s.m.rows() || mm->cols() != s.m.cols())
        throw CheckpointError("optimiser state shape mismatch for " + s.name);
      s.m = *mm;
      s.v = *vv;
      s.steps = t.at("adam_steps").at(s.name).get<long long>();
    }
  gen_opt_.zero_grad();
  crit_opt_.zero_grad();
  global_step_ = t.at("global_step");
  micro_ = 0;
  return t.value("extra", nlohmann::json::object());
}

// --- fit -------------------------------------------------------------------

FitResult fit(netblocks::Sat3dNet& net, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOptions& opts) {
  if (train.empty()) throw ConfigError("no training samples");
  Trainer tr(net, cfg);
  FitResult out;
  out.best_loss = std::numeric_limits<double>::infinity();
  out.best_dice = -std::numeric_limits<double>::infinity();
  int start = 0;
  if (opts.resume) {
    const nlohmann::json extra = tr.load(*opts.resume);
    start = extra.value("epoch", -1) + 1;
    out.best_loss = extra.value("best_loss", out.best_loss);
    out.best_dice = extra.value("best_dice", out.best_dice);
  }
  auto log = [&](const nlohmann::json& j) {
    if (opts.log) *opts.log << j.dump() << '\n' << std::flush;
  };

  bool stop = false;
  for (int epoch = start; epoch < cfg.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    promptloop::Rng shuffle = stream(cfg.seed, epoch, 0, 3);
    std::shuffle(order.begin(), order.end(), shuffle);

    EpochSummary sum;
    sum.epoch = epoch;
    double ls = 0, ldice = 0, lce = 0, lc = 0, lu = 0, lcrit = 0, dice = 0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += std::size_t(cfg.batch_size)) {
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      std::vector<std::size_t> idx;
      const std::size_t end = std::min(order.size(), at + std::size_t(cfg.batch_size));
      augmented.reserve(end - at);
      for (std::size_t i = at; i < end; ++i) {
        const Sample& s = train[order[i]];
        idx.push_back(order[i]);
        if (cfg.augment) {
          auto a = volgrid::augment(s.volume, s.mask, stream(cfg.seed, epoch, order[i], 1)());
          augmented.push_back({std::move(a.volume), std::move(a.mask), s.id});
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      const StepReport r = tr.train_step(batch, idx, epoch);
      nlohmann::json j = r;
      j["epoch"] = epoch;
      j["kind"] = "step";
      log(j);
      ls += r.loss.l_s;
      ldice += r.loss.l_dice;
      lce += r.loss.l_ce;
      lc += r.loss.l_c;
      lu += r.loss.l_u;
      lcrit += r.loss.l_critic;
      dice += r.dice_last;
      ++batches;
      if (cfg.max_steps > 0 && tr.global_step() >= cfg.max_steps && tr.pending_micro_batches() == 0) {
        stop = true;
        break;
      }
    }
    tr.flush(epoch);
    sum.loss = losses::total_generator_loss(ls / batches, lc / batches, lu / batches, cfg.weights);
    sum.loss.l_dice = ldice / batches;
    sum.loss.l_ce = lce / batches;
    sum.loss.l_critic = lcrit / batches;
    sum.train_dice = dice / batches;
    sum.global_step = tr.global_step();
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
      inference::NetStepModel model(net);
      sum.val_dice = evaluate_epoch(model, val.empty() ? train : val, cfg.eval_budget, cfg.seed).dsc;
    }
    const double score = sum.val_dice.value_or(sum.train_dice);
    const bool better_loss = sum.loss.l_total < out.best_loss;
    const bool better_dice = score > out.best_dice;
    if (better_loss) out.best_loss = sum.loss.l_total;
    if (better_dice) out.best_dice = score;

    nlohmann::json ej = {{"kind", "epoch"},           {"epoch", epoch},
                         {"loss", sum.loss},          {"train_dice", sum.train_dice},
                         {"global_step", sum.global_step}, {"lr", tr.lr_at(epoch)}};
    if (sum.val_dice) ej["val_dice"] = *sum.val_dice;
    log(ej);

    if (!opts.out_dir.empty()) {
      const nlohmann::json extra = {{"epoch", epoch}, {"best_loss", out.best_loss}, {"best_dice", out.best_dice}};
      tr.save(opts.out_dir / "latest.ckpt", extra);
      if (better_loss) tr.save(opts.out_dir / "loss_best.ckpt", extra);
      if (better_dice) tr.save(opts.out_dir / "dice_best.ckpt", extra);
    }
    out.epochs.push_back(sum);
    if (cfg.target_dice > 0 && sum.train_dice >= cfg.target_dice) {
      out.reached_target = true;
      stop = true;
    }
    if (cfg.max_steps > 0 && tr.global_step() >= cfg.max_steps) stop = true;
    if (opts.stop_after_epoch == epoch) stop = true;
  }
  out.steps = tr.global_step();
  return out;
}

}  // namespace sat3d::trainer
