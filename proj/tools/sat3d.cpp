// Command-line front end: train, infer, eval, stats, phantom, serve.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sat3d/dataset.hpp"
#include "sat3d/inference.hpp"
#include "sat3d/metrics.hpp"
#include "sat3d/serve.hpp"
#include "sat3d/stats.hpp"
#include "sat3d/trainer.hpp"
#include "sat3d/volgrid/io.hpp"

#include <csignal>

using namespace sat3d;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

struct PhantomArgs {
  int n = 4;
  int grid = 64;
  double min_r = 6, max_r = 12;
  double noise = 0.1;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--n", n, "Number of phantoms")->check(CLI::PositiveNumber);
    app->add_option("--grid", grid, "Cubic grid side in voxels")->check(CLI::PositiveNumber);
    app->add_option("--min-radius", min_r, "Smallest lesion semi-axis (voxels)");
    app->add_option("--max-radius", max_r, "Largest lesion semi-axis (voxels)");
    app->add_option("--image-noise", noise, "Gaussian intensity noise std");
  }
  volgrid::PhantomSpec spec() const {
    volgrid::PhantomSpec s;
    s.grid = cube(grid);
    s.min_radius = min_r;
    s.max_radius = max_r;
    s.image_noise = noise;
    s.seed = seed;
    return s;
  }
};

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, val, out = "runs/latest", profile = "desk", resume, log;
  int crop = 64, phantoms = 0, epochs = 0, eval_every = -1;
  long steps = 0;
  double target = 0;
  bool no_augment = false;
  std::uint64_t seed = 0;
  PhantomArgs ph;
};

int run_train(const TrainArgs& a) {
  nlohmann::json cfg = a.config.empty() ? nlohmann::json::object() : read_json(a.config);
  netblocks::ModelConfig mc = netblocks::ModelConfig::desk(a.crop);
  if (cfg.contains("model")) mc = cfg.at("model").get<netblocks::ModelConfig>();
  if (!cfg.contains("model") || !cfg.at("model").contains("crop")) mc.crop = cube(a.crop);
  trainer::TrainConfig tc = a.profile == "paper" ? trainer::TrainConfig::paper() : trainer::TrainConfig::desk();
  if (cfg.contains("train")) trainer::from_json(cfg.at("train"), tc);
  tc.seed = a.seed;
  if (a.epochs > 0) tc.epochs = a.epochs, tc.t_max = a.epochs;
  if (a.steps > 0) tc.max_steps = a.steps;
  if (a.target > 0) tc.target_dice = a.target;
  if (a.no_augment) tc.augment = false;
  if (a.eval_every >= 0) tc.eval_every = a.eval_every;
  tc.validate();
  mc.validate();

  std::vector<dataset::Case> cases;
  if (!a.data.empty()) {
    cases = dataset::load_dir(a.data);
  } else {
    PhantomArgs ph = a.ph;
    ph.seed = a.seed;
    cases = dataset::make_phantoms(a.phantoms > 0 ? a.phantoms : 2, ph.spec());
  }
  if (cases.empty()) throw ConfigError("no training cases");
  const auto train = dataset::prepare_all(cases, mc.crop);
  std::vector<trainer::Sample> val;
  if (!a.val.empty()) val = dataset::prepare_all(dataset::load_dir(a.val), mc.crop);

  fs::create_directories(a.out);
  std::ofstream log(a.log.empty() ? fs::path(a.out) / "train.jsonl" : fs::path(a.log), std::ios::app);
  netblocks::Sat3dNet net(mc);
  trainer::FitOptions fo;
  fo.out_dir = a.out;
  fo.log = &log;
  if (!a.resume.empty()) fo.resume = a.resume;
  const auto r = trainer::fit(net, train, val, tc, fo);
  nlohmann::json summary = {{"epochs", r.epochs.size()}, {"steps", r.steps},       {"best_loss", r.best_loss},
                            {"best_dice", r.best_dice},   {"reached_target", r.reached_target}};
  if (!r.epochs.empty()) summary["final_train_dice"] = r.epochs.back().train_dice;
  std::cout << summary.dump() << "\n";
  return 0;
}

// --- phantom -----------------------------------------------------------------

int run_phantom(const PhantomArgs& a, const std::string& out) {
  const auto ids = dataset::write_phantoms(out, a.n, a.spec());
  std::cout << nlohmann::json{{"out", out}, {"cases", ids}}.dump() << "\n";
  return 0;
}


// --- infer -------------------------------------------------------------------

std::vector<PointPrompt> parse_points(const std::string& text) {
  // "i,j,k[:label];i,j,k[:label]..."
  std::vector<PointPrompt> pts;
  std::stringstream all(text);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    PointPrompt p;
    const auto colon = item.find(':');
    if (colon != std::string::npos) {
      p.label = std::stoi(item.substr(colon + 1));
      item = item.substr(0, colon);
    }
    std::stringstream c(item);
    std::string v;
    for (int a = 0; a < 3; ++a) {
      if (!std::getline(c, v, ',')) throw ConfigError("point '" + item + "' needs three coordinates");
      p.coord[a] = std::stoi(v);
    }
    if (p.label != 0 && p.label != 1) throw ConfigError("point labels must be 0 or 1");
    pts.push_back(p);
  }
  return pts;
}

std::unique_ptr<netblocks::Sat3dNet> load_checkpoint(std::string path) {
  if (path.empty()) path = serve::ServeConfig::from_env({}).checkpoint.string();
  if (path.empty()) throw ConfigError("no checkpoint given (--checkpoint or SAT3D_CHECKPOINT)");
  return netblocks::load_model(path);
}

struct InferArgs {
  std::string checkpoint, volume, gt, points, out = "pred_seg.s3v", prob_out, trace;
  int clicks = 0;
  double overlap = 0.5, T = 0.3;
  std::uint64_t seed = 0;
};

int run_infer(const InferArgs& a) {
  const auto net = load_checkpoint(a.checkpoint);
  const Volume raw = volgrid::load_volume(a.volume);
  const Volume in = serve::model_input(raw);
  inference::NetStepModel model(*net, a.overlap);
  nlohmann::json trace;
  BinaryMask pred;
  ScalarGrid prob;
  if (a.clicks > 0) {
    if (a.gt.empty()) throw ConfigError("--clicks simulates a user and needs --gt");
    const BinaryMask gt = volgrid::load_mask(a.gt);
    promptloop::Rng rng(a.seed);
    const auto r = inference::eval_case(model, in, gt, a.clicks, rng);
    pred = r.best;
    trace = r.trace();
  } else {
    PromptState state(raw.extent(), raw.spacing);
    const auto pts = parse_points(a.points);
    const int budget = int(pts.size()) + 1;
    auto rec = promptloop::refine_step(model, in, state, budget, a.T);
    std::vector<double> fg{double(rec.pred.count())};
    for (const auto& p : pts) {
      if (!raw.extent().contains(p.coord)) throw PromptBoundsError("point outside the volume");
      state.points.push_back(p);
      rec = promptloop::refine_step(model, in, state, budget, a.T);
      fg.push_back(double(rec.pred.count()));
    }
    pred = rec.pred;
    prob = rec.output.prob;
    trace = {{"points", pts.size()}, {"steps", state.step}, {"foreground", fg}};
  }
  pred.spacing = raw.spacing;
  volgrid::save_mask(a.out, pred);
  if (!a.prob_out.empty() && prob.size() > 0) {
    Volume pv;
    pv.data = prob;
    pv.spacing = raw.spacing;
    volgrid::save_volume(a.prob_out, pv);
  }
  if (!a.trace.empty()) std::ofstream(a.trace) << trace.dump(2) << "\n";
  trace["out"] = a.out;
  std::cout << trace.dump() << "\n";
  return 0;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, csv, checkpoint, data;
  int budget = 5;
  double overlap = 0.5;
  std::uint64_t seed = 0;
};

std::optional<fs::path> find_mask(const fs::path& dir, const std::string& id) {
  for (const char* ext : {dataset::kNativeExt, ".nii"})
    for (const std::string& name : {id + dataset::kMaskSuffix + ext, id + ext})
      if (fs::exists(dir / name)) return dir / name;
  return std::nullopt;
}

nlohmann::json mean_report(const std::vector<std::pair<std::string, metrics::MetricReport>>& rows) {
  double d = 0, i = 0, r = 0, h = 0, s = 0;
  for (const auto& [id, m] : rows) {
    d += m.dsc;
    i += m.iou;
    r += m.rve;
    h += m.hd95;
    s += m.assd;
  }
  const double n = std::max<double>(1, double(rows.size()));
  return {{"cases", rows.size()}, {"dsc", d / n}, {"iou", i / n}, {"rve", r / n}, {"hd95_mm", h / n}, {"assd_mm", s / n}};
}

int run_eval(const EvalArgs& a) {
  std::vector<std::pair<std::string, metrics::MetricReport>> rows;
  if (!a.checkpoint.empty() || !a.data.empty()) {
    // Model evaluation with the simulated K-click protocol.
    if (a.data.empty()) throw ConfigError("model evaluation needs --data");
    inference::EvalProtocol proto;
    if (!proto.allows(a.budget)) std::cerr << "note: K=" << a.budget << " is outside the standard budgets\n";
    const auto net = load_checkpoint(a.checkpoint);
    inference::NetStepModel model(*net, a.overlap);
    const auto cases = dataset::load_dir(a.data);
    for (std::size_t c = 0; c < cases.size(); ++c) {
      promptloop::Rng rng = trainer::stream(a.seed, -1, c, 2);
      const auto r = inference::eval_case(model, serve::model_input(cases[c].volume), cases[c].mask, a.budget, rng);
      rows.emplace_back(cases[c].id, r.best_report());
    }
  } else {
    if (a.pred.empty() || a.gt.empty()) throw ConfigError("eval needs --pred and --gt directories");
    for (const auto& entry : fs::directory_iterator(a.gt)) {
      const std::string stem = entry.path().stem().string();
      const std::string suffix = dataset::kMaskSuffix;
      if (!entry.is_regular_file() || stem.size() <= suffix.size() ||
          stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) != 0)
        continue;
      const std::string id = stem.substr(0, stem.size() - suffix.size());
      const auto pp = find_mask(a.pred, id);
      if (!pp) throw GapError("no prediction for case " + id);
      const BinaryMask gt = volgrid::load_mask(entry.path());
      const BinaryMask pred = metrics::align_to_gt(volgrid::load_mask(*pp), gt);
      rows.emplace_back(id, metrics::report(pred, gt, gt.spacing));
    }
    std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  }
  if (rows.empty()) throw GapError("no cases found");
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    metrics::write_csv(out, rows);
  }
  nlohmann::json j = {{"mean", mean_report(rows)}, {"cases", nlohmann::json::object()}};
  for (const auto& [id, m] : rows) j["cases"][id] = m;
  std::cout << j.dump(2) << "\n";
  return 0;
}

// --- stats -------------------------------------------------------------------

struct StatsArgs {
  std::string table, a, b, method = "auto";
  bool tie_correction = false;
  std::uint64_t seed = 0;
};

int run_stats(const StatsArgs& s) {
  const stats::RankTable t = stats::read_long_csv_file(s.table);
  if (s.a.empty() && s.b.empty()) {
    stats::Table1 out = stats::build_table1(t);
    if (s.tie_correction) out.friedman = stats::friedman(t, true);
    std::cout << stats::table1_json(out).dump(2) << "\n";
    return 0;
  }
  auto col = [&](const std::string& m) {
    const auto it = std::find(t.methods.begin(), t.methods.end(), m);
    if (it == t.methods.end()) throw ConfigError("unknown method " + m);
    return Eigen::VectorXd(t.values.col(it - t.methods.begin()));
  };
  const auto method = s.method == "exact"    ? stats::WilcoxonMethod::Exact
                      : s.method == "normal" ? stats::WilcoxonMethod::Normal
                                             : stats::WilcoxonMethod::Auto;
  const auto r = stats::wilcoxon_signed_rank(col(s.a), col(s.b), method);
  nlohmann::json j = r;
  j["a"] = s.a;
  j["b"] = s.b;
  std::cout << j.dump(2) << "\n";
  return 0;
}

// --- serve -------------------------------------------------------------------

struct ServeArgs {
  std::string host = "127.0.0.1", checkpoint, trace_dir, cors = "*";
  int port = 8080;
  double idle = 1800, overlap = 0.5;
  std::uint64_t seed = 0;
};

serve::HttpServer* g_http = nullptr;

int run_serve(const ServeArgs& a, bool port_given) {
  serve::ServeConfig cfg;
  cfg.host = a.host;
  cfg.port = a.port;
  cfg.checkpoint = a.checkpoint;
  cfg.idle_timeout_s = a.idle;
  cfg.overlap = a.overlap;
  cfg.cors_origin = a.cors;
  cfg.trace_dir = a.trace_dir;
  // Environment fills in what the command line left open.
  const serve::ServeConfig env = serve::ServeConfig::from_env(cfg);
  if (a.checkpoint.empty()) cfg.checkpoint = env.checkpoint;
  if (!port_given) cfg.port = env.port;
  std::shared_ptr<const netblocks::Sat3dNet> net;
  std::string ckpt_id = cfg.checkpoint.string();
  if (cfg.checkpoint.empty()) {
    std::cerr << "warning: no checkpoint; serving an untrained desk model (seed " << a.seed << ")\n";
    auto mc = netblocks::ModelConfig::desk(64);
    mc.seed = a.seed;
    net = std::make_shared<netblocks::Sat3dNet>(mc);
    ckpt_id = "untrained";
  } else {
    net = netblocks::load_model(cfg.checkpoint);
  }
  serve::Service svc(net, cfg, ckpt_id);
  serve::HttpServer http(svc);
  const int port = http.bind(cfg.host, cfg.port);
  g_http = &http;
  std::signal(SIGINT, [](int) {
    if (g_http) g_http->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_http) g_http->stop();
  });
  std::cout << nlohmann::json{{"listening", cfg.host + ":" + std::to_string(port)}, {"checkpoint", ckpt_id}}.dump()
            << std::endl;
  http.run();
  g_http = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAT3D: prompt-driven 3D tumour segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a case directory or synthetic phantoms");
  train->add_option("--config", ta.config, "JSON file with optional \"model\" and \"train\" blocks");
  train->add_option("--data", ta.data, "Case directory (<id>_img / <id>_seg pairs)");
  train->add_option("--val", ta.val, "Validation case directory");
  train->add_option("--phantoms", ta.phantoms, "Train on this many generated phantoms when --data is absent");
  train->add_option("--out", ta.out, "Checkpoint and log directory");
  train->add_option("--profile", ta.profile, "Hyper-parameter profile")->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--crop", ta.crop, "Cubic crop side");
  train->add_option("--epochs", ta.epochs, "Override the number of epochs (also the cosine horizon)");
  train->add_option("--max-steps", ta.steps, "Stop after this many optimiser steps");
  train->add_option("--target-dice", ta.target, "Stop once the epoch training Dice reaches this value");
  train->add_option("--eval-every", ta.eval_every, "Epochs between K-point validations (0 = off)");
  train->add_option("--resume", ta.resume, "Resume from a trainer checkpoint");
  train->add_option("--log", ta.log, "JSON-lines log file (default <out>/train.jsonl)");
  train->add_flag("--no-augment", ta.no_augment, "Disable flips and rotations");
  train->add_option("--seed", ta.seed, "Random seed");
  ta.ph.add(train);

  PhantomArgs pa;
  std::string phantom_out = "phantoms";
  auto* phantom = app.add_subcommand("phantom", "Write synthetic lesion phantoms");
  pa.add(phantom);
  phantom->add_option("--out", phantom_out, "Output directory");
  phantom->add_option("--seed", pa.seed, "Random seed");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Segment a volume from point prompts or simulated clicks");
  infer->add_option("--checkpoint", ia.checkpoint, "Model checkpoint (default $SAT3D_CHECKPOINT)");
  infer->add_option("--volume", ia.volume, "Input volume (.s3v or .nii)")->required();
  infer->add_option("--points", ia.points, "Prompts as \"i,j,k[:label];...\" (label 1 = foreground)");
  infer->add_option("--clicks", ia.clicks, "Simulate K foreground clicks against --gt and keep the best step");
  infer->add_option("--gt", ia.gt, "Ground-truth mask for --clicks");
  infer->add_option("--out", ia.out, "Output mask path");
  infer->add_option("--prob-out", ia.prob_out, "Optional probability map path");
  infer->add_option("--trace", ia.trace, "Optional JSON trace path");
  infer->add_option("--overlap", ia.overlap, "Sliding-window overlap");
  infer->add_option("--seed", ia.seed, "Random seed (click simulation)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth, or a model with simulated clicks");
  eval->add_option("--pred", ea.pred, "Prediction directory (<id>_seg or <id> masks)");
  eval->add_option("--gt", ea.gt, "Ground-truth directory (<id>_seg masks)");
  eval->add_option("--checkpoint", ea.checkpoint, "Evaluate this model instead (default $SAT3D_CHECKPOINT)");
  eval->add_option("--data", ea.data, "Case directory for model evaluation");
  eval->add_option("--budget", ea.budget, "Click budget K for model evaluation")->check(CLI::PositiveNumber);
  eval->add_option("--csv", ea.csv, "Per-case CSV output");
  eval->add_option("--overlap", ea.overlap, "Sliding-window overlap");
  eval->add_option("--seed", ea.seed, "Random seed (click simulation)");

  StatsArgs sa;
  auto* st = app.add_subcommand("stats", "Friedman ranking or a paired Wilcoxon test on a long-format table");
  st->add_option("--table", sa.table, "CSV with block (or metric,tumour), method and value columns")->required();
  st->add_option("--a", sa.a, "First method for a paired Wilcoxon test");
  st->add_option("--b", sa.b, "Second method for a paired Wilcoxon test");
  st->add_option("--method", sa.method, "Wilcoxon p-value method")->check(CLI::IsMember({"auto", "exact", "normal"}));
  st->add_flag("--tie-correction", sa.tie_correction, "Apply the Friedman tie correction");
  st->add_option("--seed", sa.seed, "Accepted for uniformity; the statistics are deterministic");

  ServeArgs sv;
  auto* srv = app.add_subcommand("serve", "Run the HTTP session service");
  srv->add_option("--host", sv.host, "Bind address");
  auto* port_opt = srv->add_option("--port", sv.port, "Port (default $SAT3D_PORT or 8080)");
  srv->add_option("--checkpoint", sv.checkpoint, "Model checkpoint (default $SAT3D_CHECKPOINT)");
  srv->add_option("--idle-timeout", sv.idle, "Seconds before an idle session expires");
  srv->add_option("--overlap", sv.overlap, "Sliding-window overlap");
  srv->add_option("--cors-origin", sv.cors, "Access-Control-Allow-Origin value");
  srv->add_option("--trace-dir", sv.trace_dir, "Persist per-session prompt traces here");
  srv->add_option("--seed", sv.seed, "Seed of the untrained fallback model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\n";
    return app.exit(e);
  }
  try {
    if (*train) return run_train(ta);
    if (*phantom) return run_phantom(pa, phantom_out);
    if (*infer) return run_infer(ia);
    if (*eval) return run_eval(ea);
    if (*st) return run_stats(sa);
    if (*srv) return run_serve(sv, port_opt->count() > 0);
  } catch (const sat3d::Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
