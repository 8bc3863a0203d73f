#pragma once

// Subcommand implementations behind the `unseg` binary. Each run resolves its
// configuration (flag > config file > default), persists it as run.json in
// the output directory, then executes.

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <opencv2/core.hpp>

#include "unseg/data/datagen.hpp"
#include "unseg/eval/harness.hpp"
#include "unseg/protect/protect.hpp"
#include "unseg/train/bilevel.hpp"

namespace unseg::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Invalid configuration (bad values, malformed config files). Exit code 3.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct GlobalOpts {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string config_path;
  std::string out;
  int workers = 2;
};

inline json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in.good()) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config file: ") + e.what());
  }
}

/// config-file fallback for an option the user did not pass explicitly.
template <typename T>
void merge_key(const json& cfg, const CLI::App* sub, const std::string& flag, const std::string& key, T& target) {
  if (cfg.contains(key) && sub->count(flag) == 0) {
    try {
      target = cfg.at(key).get<T>();
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

inline fs::path artifact_root() {
  if (const char* env = std::getenv("UNSEG_LAB_HOME")) return fs::path(env);
  return fs::path("unseg_runs");
}

inline std::string timestamp_tag() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::gmtime(&t));
  return buf;
}

inline fs::path resolve_out_dir(const GlobalOpts& g, const std::string& subcommand, const json& resolved) {
  if (!g.out.empty()) return fs::path(g.out);
  const std::uint64_t digest = fnv1a64(resolved.dump());
  return artifact_root() / (subcommand + "-" + timestamp_tag() + "-" + data::digest_hex(digest).substr(0, 8));
}

inline void write_run_json(const fs::path& out_dir, const std::string& subcommand, json resolved) {
  resolved["subcommand"] = subcommand;
  resolved["format_version"] = 1;
  const std::string text = resolved.dump(2) + "\n";
  data::atomic_write(out_dir / "run.json", std::vector<unsigned char>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOpts {
  std::string kind = "iis";
  int n_train = 256;
  int n_val = 64;
  int size = 64;
  int num_classes = 9;
  float jitter = 0.012f;
};

inline int cmd_gen_data(const GlobalOpts& g, const GenDataOpts& o) {
  if (o.kind != "iis" && o.kind != "downstream") throw ConfigError("gen-data: kind must be iis or downstream");
  if (o.n_train <= 0 || o.n_val <= 0) throw ConfigError("gen-data: split sizes must be positive");
  if (o.size < 32) throw ConfigError("gen-data: size must be >= 32");

  json resolved{{"kind", o.kind},       {"n_train", o.n_train},         {"n_val", o.n_val},
                {"size", o.size},       {"num_classes", o.num_classes}, {"jitter", o.jitter},
                {"seed", g.seed},       {"deterministic", g.deterministic}, {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "gen-data", resolved);
  fs::create_directories(out);
  write_run_json(out, "gen-data", resolved);

  data::GenOptions gen_opt;
  gen_opt.jitter = o.jitter;
  data::DatasetManifest m =
      o.kind == "iis"
          ? data::gen_iis_dataset(g.seed, o.n_train, o.n_val, o.size, out, gen_opt, g.workers)
          : data::gen_downstream_dataset(g.seed, o.n_train, o.n_val, o.size, o.num_classes, out, gen_opt,
                                         g.workers);
  const std::string digest = data::digest_hex(data::dataset_digest(m));
  json summary{{"manifest", (out / data::DatasetManifest::kFileName).string()}, {"digest", digest}};
  const std::string text = summary.dump(2) + "\n";
  data::atomic_write(out / "summary.json", std::vector<unsigned char>(text.begin(), text.end()));
  std::printf("dataset %s digest %s\n", (out / data::DatasetManifest::kFileName).string().c_str(), digest.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train-generator
// ---------------------------------------------------------------------------

struct TrainGeneratorOpts {
  std::string data;
  std::string profile = "desk";  // desk | paper
  int total_epochs = -1;         // -1: from profile
  int batch_size = -1;
  float lr = -1;
  int lr_decay_epoch = -1;
  int pretrain_epochs = -1;
  float pretrain_lr = -1;
  float eps_target = 8.0f / 255.0f;
  float eps_unrelated = 2.0f / 255.0f;
  int train_scale = 4;
  bool label_mod = true;
  int embed_dim = 64;
  int patch = 4;
  int encoder_blocks = 2;
  int decoder_blocks = 2;
  int heads = 4;
};

inline int cmd_train_generator(const GlobalOpts& g, const TrainGeneratorOpts& o) {
  if (o.data.empty()) throw ConfigError("train-generator: --data is required");
  if (o.profile != "desk" && o.profile != "paper") throw ConfigError("train-generator: unknown profile");

  train::BilevelConfig cfg = o.profile == "paper" ? train::BilevelConfig::paper() : train::BilevelConfig{};
  if (o.total_epochs > 0) cfg.total_epochs = o.total_epochs;
  if (o.batch_size > 0) cfg.batch_size = o.batch_size;
  if (o.lr > 0) cfg.learning_rate = o.lr;
  if (o.lr_decay_epoch > 0) cfg.lr_decay_epoch = o.lr_decay_epoch;
  if (o.pretrain_epochs >= 0) cfg.pretrain_epochs = o.pretrain_epochs;
  if (o.pretrain_lr > 0) cfg.pretrain_lr = o.pretrain_lr;
  cfg.budget.eps_target = o.eps_target;
  cfg.budget.eps_unrelated = o.eps_unrelated;
  cfg.budget.train_scale = o.train_scale;
  cfg.label_mod = o.label_mod;
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  data::DatasetManifest manifest = data::DatasetManifest::load(o.data);
  check(manifest.kind == "iis", "train-generator: expected an IIS dataset");

  model::SegModelConfig mc;
  mc.image_size = manifest.size;
  mc.embed_dim = o.embed_dim;
  mc.patch = o.patch;
  mc.encoder_blocks = o.encoder_blocks;
  mc.decoder_blocks = o.decoder_blocks;
  mc.heads = o.heads;

  json resolved{{"data", o.data},
                {"profile", o.profile},
                {"total_epochs", cfg.total_epochs},
                {"batch_size", cfg.batch_size},
                {"lr", cfg.learning_rate},
                {"lr_decay_epoch", cfg.lr_decay_epoch},
                {"pretrain_epochs", cfg.pretrain_epochs},
                {"pretrain_lr", cfg.pretrain_lr},
                {"eps_target", cfg.budget.eps_target},
                {"eps_unrelated", cfg.budget.eps_unrelated},
                {"train_scale", cfg.budget.train_scale},
                {"label_mod", cfg.label_mod},
                {"model", model::to_json(mc)},
                {"seed", g.seed},
                {"deterministic", g.deterministic},
                {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "train-generator", resolved);
  fs::create_directories(out);
  write_run_json(out, "train-generator", resolved);

  train::IISData data = train::IISData::load(manifest, true);
  train::BilevelTrainer trainer(mc, cfg);
  train::TrainLog log = trainer.run(data, out);
  log.save_csv(out / "trainlog.csv");
  model::save_segmodel(out / "generator.ckpt", trainer.generator(),
                       json{{"budget", {{"eps_target", cfg.budget.eps_target},
                                        {"eps_unrelated", cfg.budget.eps_unrelated},
                                        {"train_scale", cfg.budget.train_scale}}}},
                       g.seed, trainer.completed_rounds());
  model::save_segmodel(out / "surrogate.ckpt", trainer.surrogate(), {}, g.seed, trainer.completed_rounds());
  std::printf("generator %s rounds %d\n", (out / "generator.ckpt").string().c_str(), trainer.completed_rounds());
  return 0;
}

// ---------------------------------------------------------------------------
// protect
// ---------------------------------------------------------------------------

struct ProtectOpts {
  std::string plan;
  std::string generator;
};

inline int cmd_protect(const GlobalOpts& g, const ProtectOpts& o) {
  if (o.plan.empty()) throw ConfigError("protect: --plan is required");
  protect::ProtectionPlan plan;
  try {
    plan = protect::ProtectionPlan::load(o.plan);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  json resolved{{"plan", plan.to_json()}, {"plan_path", o.plan}, {"generator", o.generator},
                {"seed", g.seed},         {"deterministic", g.deterministic}, {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "protect", resolved);
  fs::create_directories(out);
  write_run_json(out, "protect", resolved);

  std::optional<model::PromptableSegModel<float>> generator;
  if (plan.method == protect::Method::unseg) {
    if (o.generator.empty()) throw ConfigError("protect: method=unseg requires --generator");
    generator = model::load_segmodel(o.generator);
  }
  protect::ProtectResult r =
      protect::protect_dataset(plan, generator ? &*generator : nullptr, out, g.workers);
  const std::string digest = data::digest_hex(data::dataset_digest(r.manifest));
  std::printf("protected %s digest %s\n", (out / data::DatasetManifest::kFileName).string().c_str(),
              digest.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train-victim
// ---------------------------------------------------------------------------

struct TrainVictimOpts {
  std::string data;
  std::string arch = "conv_fcn";
  int epochs = 8;
  int batch_size = 16;
  float lr = 2e-3f;
  int eval_every = 1;
  std::string defense = "none";
  double defense_param = 0;
};

inline int cmd_train_victim(const GlobalOpts& g, const TrainVictimOpts& o) {
  if (o.data.empty()) throw ConfigError("train-victim: --data is required");
  eval::VictimTrainConfig cfg;
  try {
    cfg.arch = model::victim_arch_from_string(o.arch);
    cfg.defense = eval::defense_from_string(o.defense);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.lr = o.lr;
  cfg.eval_every = o.eval_every;
  cfg.defense_param = o.defense_param;
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  json resolved{{"data", o.data},       {"arch", o.arch},           {"epochs", o.epochs},
                {"batch_size", o.batch_size}, {"lr", o.lr},         {"eval_every", o.eval_every},
                {"defense", o.defense}, {"defense_param", o.defense_param},
                {"seed", g.seed},       {"deterministic", g.deterministic}, {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "train-victim", resolved);
  fs::create_directories(out);
  write_run_json(out, "train-victim", resolved);

  data::DatasetManifest manifest = data::DatasetManifest::load(o.data);
  eval::TrainVictimResult r = eval::train_victim(manifest, cfg);
  const std::string text = r.report.to_json().dump(2) + "\n";
  data::atomic_write(out / "report.json", std::vector<unsigned char>(text.begin(), text.end()));
  model::save_victim(out / "victim.ckpt", r.model, {}, g.seed, cfg.epochs);
  model::save_victim(out / "victim_best.ckpt", r.best_model, {{"best_epoch", r.report.best_epoch}}, g.seed,
                     r.report.best_epoch);
  eval::CurveSeries s;
  s.label = o.arch;
  for (auto& [e, v] : r.report.curve) s.points.push_back({static_cast<double>(e), v});
  eval::write_curve_svg(out / "curve.svg", "val mIoU", {s});
  std::printf("victim %s best_miou %.4f best_epoch %d\n", (out / "victim_best.ckpt").string().c_str(),
              r.report.miou, r.report.best_epoch);
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOpts {
  std::string model;
  std::string data;
};

inline int cmd_evaluate(const GlobalOpts& g, const EvaluateOpts& o) {
  if (o.model.empty() || o.data.empty()) throw ConfigError("evaluate: --model and --data are required");

  json resolved{{"model", o.model}, {"data", o.data}, {"seed", g.seed},
                {"deterministic", g.deterministic}, {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "evaluate", resolved);
  fs::create_directories(out);
  write_run_json(out, "evaluate", resolved);

  data::DatasetManifest manifest = data::DatasetManifest::load(o.data);
  model::VictimModel<float> victim = model::load_victim(o.model);
  eval::VictimData d = eval::VictimData::load(manifest, eval::Defense::none, 0);
  eval::MiouResult r = eval::evaluate_victim(victim, d, g.workers);
  json rep{{"miou", r.miou},
           {"per_class_iou", r.per_class},
           {"class_present", r.present},
           {"provenance", data::digest_hex(data::dataset_digest(manifest))}};
  const std::string text = rep.dump(2) + "\n";
  data::atomic_write(out / "eval.json", std::vector<unsigned char>(text.begin(), text.end()));
  std::printf("miou %.4f\n", r.miou);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepOpts {
  std::string experiments;
};

inline int cmd_sweep(const GlobalOpts& g, const SweepOpts& o) {
  if (o.experiments.empty()) throw ConfigError("sweep: --experiments is required");
  eval::ExperimentManifest m;
  try {
    m = eval::ExperimentManifest::load(o.experiments);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep: invalid experiments file: ") + e.what());
  }

  json resolved{{"experiments", o.experiments}, {"name", m.name}, {"cells", m.cells.size()},
                {"seed", g.seed},               {"deterministic", g.deterministic}, {"workers", g.workers}};
  const fs::path out = resolve_out_dir(g, "sweep", resolved);
  fs::create_directories(out);
  write_run_json(out, "sweep", resolved);

  auto reports = eval::run_experiment(m, out, g.workers);
  std::printf("sweep %s cells %zu\n", (out / "consolidated.csv").string().c_str(), reports.size());
  return 0;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, char** argv) {
  cv::setNumThreads(1);

  CLI::App app{"unseg: unlearnable-noise protection for segmentation datasets"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global seed");
  app.add_flag("--deterministic", g.deterministic, "record deterministic mode (runs are seeded regardless)");
  app.add_option("--config", g.config_path, "JSON config file (flag > config > default)");
  app.add_option("--out", g.out, "output directory (default: under UNSEG_LAB_HOME)");
  app.add_option("--workers", g.workers, "worker threads");

  GenDataOpts gd;
  auto* sub_gd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  sub_gd->add_option("--kind", gd.kind, "iis | downstream");
  sub_gd->add_option("--n-train", gd.n_train, "train split size");
  sub_gd->add_option("--n-val", gd.n_val, "val split size");
  sub_gd->add_option("--size", gd.size, "image size");
  sub_gd->add_option("--num-classes", gd.num_classes, "classes incl. background (downstream)");
  sub_gd->add_option("--jitter", gd.jitter, "per-pixel texture jitter");

  TrainGeneratorOpts tg;
  auto* sub_tg = app.add_subcommand("train-generator", "bilevel-train the unlearnable noise generator");
  sub_tg->add_option("--data", tg.data, "IIS dataset manifest");
  sub_tg->add_option("--profile", tg.profile, "desk | paper");
  sub_tg->add_option("--total-epochs", tg.total_epochs, "");
  sub_tg->add_option("--batch", tg.batch_size, "");
  sub_tg->add_option("--lr", tg.lr, "");
  sub_tg->add_option("--lr-decay-epoch", tg.lr_decay_epoch, "");
  sub_tg->add_option("--pretrain-epochs", tg.pretrain_epochs, "");
  sub_tg->add_option("--pretrain-lr", tg.pretrain_lr, "");
  sub_tg->add_option("--eps-target", tg.eps_target, "");
  sub_tg->add_option("--eps-unrelated", tg.eps_unrelated, "");
  sub_tg->add_option("--train-scale", tg.train_scale, "epsilon generalization factor v");
  sub_tg->add_option("--label-mod", tg.label_mod, "label modification on/off");
  sub_tg->add_option("--embed-dim", tg.embed_dim, "");
  sub_tg->add_option("--patch", tg.patch, "");
  sub_tg->add_option("--enc-blocks", tg.encoder_blocks, "");
  sub_tg->add_option("--dec-blocks", tg.decoder_blocks, "");
  sub_tg->add_option("--heads", tg.heads, "");

  ProtectOpts pr;
  auto* sub_pr = app.add_subcommand("protect", "apply a protection plan to a dataset");
  sub_pr->add_option("--plan", pr.plan, "plan JSON");
  sub_pr->add_option("--generator", pr.generator, "generator checkpoint (unseg method)");

  TrainVictimOpts tv;
  auto* sub_tv = app.add_subcommand("train-victim", "train a victim model on a dataset");
  sub_tv->add_option("--data", tv.data, "dataset manifest");
  sub_tv->add_option("--arch", tv.arch, "conv_fcn | token_seg");
  sub_tv->add_option("--epochs", tv.epochs, "");
  sub_tv->add_option("--batch", tv.batch_size, "");
  sub_tv->add_option("--lr", tv.lr, "");
  sub_tv->add_option("--eval-every", tv.eval_every, "");
  sub_tv->add_option("--defense", tv.defense, "none | gaussian | jpeg");
  sub_tv->add_option("--defense-param", tv.defense_param, "sigma or quality");

  EvaluateOpts ev;
  auto* sub_ev = app.add_subcommand("evaluate", "evaluate a victim checkpoint on a dataset");
  sub_ev->add_option("--model", ev.model, "victim checkpoint");
  sub_ev->add_option("--data", ev.data, "dataset manifest");

  SweepOpts sw;
  auto* sub_sw = app.add_subcommand("sweep", "run an experiment matrix");
  sub_sw->add_option("--experiments", sw.experiments, "experiment manifest JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::fprintf(stderr, "{\"error\":\"usage: %s\",\"exit_code\":2}\n", e.get_name());
    return 2;
  }

  try {
    const json cfg = load_config_file(g.config_path);
    merge_key(cfg, &app, "--seed", "seed", g.seed);
    merge_key(cfg, &app, "--workers", "workers", g.workers);

    if (sub_gd->parsed()) {
      merge_key(cfg, sub_gd, "--kind", "kind", gd.kind);
      merge_key(cfg, sub_gd, "--n-train", "n_train", gd.n_train);
      merge_key(cfg, sub_gd, "--n-val", "n_val", gd.n_val);
      merge_key(cfg, sub_gd, "--size", "size", gd.size);
      merge_key(cfg, sub_gd, "--num-classes", "num_classes", gd.num_classes);
      merge_key(cfg, sub_gd, "--jitter", "jitter", gd.jitter);
      return cmd_gen_data(g, gd);
    }
    if (sub_tg->parsed()) {
      merge_key(cfg, sub_tg, "--data", "data", tg.data);
      merge_key(cfg, sub_tg, "--profile", "profile", tg.profile);
      merge_key(cfg, sub_tg, "--total-epochs", "total_epochs", tg.total_epochs);
      merge_key(cfg, sub_tg, "--batch", "batch_size", tg.batch_size);
      merge_key(cfg, sub_tg, "--lr", "lr", tg.lr);
      merge_key(cfg, sub_tg, "--lr-decay-epoch", "lr_decay_epoch", tg.lr_decay_epoch);
      merge_key(cfg, sub_tg, "--pretrain-epochs", "pretrain_epochs", tg.pretrain_epochs);
      merge_key(cfg, sub_tg, "--pretrain-lr", "pretrain_lr", tg.pretrain_lr);
      merge_key(cfg, sub_tg, "--eps-target", "eps_target", tg.eps_target);
      merge_key(cfg, sub_tg, "--eps-unrelated", "eps_unrelated", tg.eps_unrelated);
      merge_key(cfg, sub_tg, "--train-scale", "train_scale", tg.train_scale);
      merge_key(cfg, sub_tg, "--label-mod", "label_mod", tg.label_mod);
      merge_key(cfg, sub_tg, "--embed-dim", "embed_dim", tg.embed_dim);
      return cmd_train_generator(g, tg);
    }
    if (sub_pr->parsed()) {
      merge_key(cfg, sub_pr, "--plan", "plan", pr.plan);
      merge_key(cfg, sub_pr, "--generator", "generator", pr.generator);
      return cmd_protect(g, pr);
    }
    if (sub_tv->parsed()) {
      merge_key(cfg, sub_tv, "--data", "data", tv.data);
      merge_key(cfg, sub_tv, "--arch", "arch", tv.arch);
      merge_key(cfg, sub_tv, "--epochs", "epochs", tv.epochs);
      merge_key(cfg, sub_tv, "--batch", "batch_size", tv.batch_size);
      merge_key(cfg, sub_tv, "--lr", "lr", tv.lr);
      merge_key(cfg, sub_tv, "--eval-every", "eval_every", tv.eval_every);
      merge_key(cfg, sub_tv, "--defense", "defense", tv.defense);
      merge_key(cfg, sub_tv, "--defense-param", "defense_param", tv.defense_param);
      return cmd_train_victim(g, tv);
    }
    if (sub_ev->parsed()) {
      merge_key(cfg, sub_ev, "--model", "model", ev.model);
      merge_key(cfg, sub_ev, "--data", "data", ev.data);
      return cmd_evaluate(g, ev);
    }
    if (sub_sw->parsed()) {
      merge_key(cfg, sub_sw, "--experiments", "experiments", sw.experiments);
      return cmd_sweep(g, sw);
    }
    throw ConfigError("no subcommand");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "{\"error\":%s,\"exit_code\":3}\n", json(e.what()).dump().c_str());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "{\"error\":%s,\"exit_code\":1}\n", json(e.what()).dump().c_str());
    return 1;
  }
}

}  // namespace unseg::cli
