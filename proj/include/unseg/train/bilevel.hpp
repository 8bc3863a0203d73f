#pragma once

// Alternating min-min optimization: the surrogate trains on noised images
// against true labels for one epoch per round, then the noise surface (tokens
// + head) trains for several epochs against the label-modified target with
// the surrogate frozen. Both phases use the train-mode budget (eps / v).

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>

#include "unseg/core/parallel.hpp"
#include "unseg/data/manifest.hpp"
#include "unseg/model/model_io.hpp"
#include "unseg/model/victim.hpp"
#include "unseg/noise/noisegen.hpp"

namespace unseg::train {

namespace fs = std::filesystem;
using data::DatasetManifest;
using data::MaskPrompt;
using model::PromptableSegModel;
using model::SegModelConfig;
using model::TrainMode;
using noise::NoiseBudget;
using noise::NoiseMode;
using json = nlohmann::json;

struct BilevelConfig {
  int total_epochs = 12;             // paper setting: 27
  int surrogate_epochs_per_round = 1;
  int generator_epochs_per_round = 3;
  int batch_size = 16;               // paper setting: 32
  float learning_rate = 1e-4f;
  int lr_decay_epoch = 8;            // paper setting: 20; decay factor 0.1
  NoiseBudget budget;
  bool label_mod = true;
  std::uint64_t seed = 0;
  int workers = 1;
  int pretrain_epochs = 4;           // warm start of the generator core on clean IIS
  float pretrain_lr = 1e-3f;

  int epochs_per_round() const { return surrogate_epochs_per_round + generator_epochs_per_round; }
  int rounds() const { return total_epochs / epochs_per_round(); }

  void validate() const {
    check(surrogate_epochs_per_round > 0 && generator_epochs_per_round > 0,
          "bilevel: epochs per round must be positive");
    check(total_epochs > 0 && batch_size > 0, "bilevel: invalid schedule");
    budget.validate();
  }

  static BilevelConfig paper() {
    BilevelConfig c;
    c.total_epochs = 27;
    c.batch_size = 32;
    c.lr_decay_epoch = 20;
    return c;
  }
};

struct TrainLogEntry {
  int round = 0;
  std::string phase;  // "pretrain" | "surrogate" | "generator"
  int epoch = 0;      // global epoch index
  int step = 0;       // monotonically increasing within a phase
  float loss = 0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;

  void save_csv(const fs::path& path) const {
    std::string text = "round,phase,epoch,step,loss\n";
    char buf[160];
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof(buf), "%d,%s,%d,%d,%.8g\n", e.round, e.phase.c_str(), e.epoch, e.step,
                    static_cast<double>(e.loss));
      text += buf;
    }
    data::atomic_write(path, std::vector<unsigned char>(text.begin(), text.end()));
  }

  std::vector<float> losses(const std::string& phase) const {
    std::vector<float> out;
    for (const auto& e : entries)
      if (e.phase == phase) out.push_back(e.loss);
    return out;
  }
};

/// Whole split loaded to memory: images and prompts as float tensors plus the
/// binary labels.
struct IISData {
  std::vector<Tensor<float>> images;        // [H, W, 3]
  std::vector<MaskPrompt> prompts;
  std::vector<Tensor<std::uint8_t>> labels; // [H, W], 0/1

  std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }

  static IISData load(const DatasetManifest& m, bool train_split = true) {
    IISData d;
    const auto& records = train_split ? m.train : m.val;
    d.images.resize(records.size());
    d.prompts.resize(records.size());
    d.labels.resize(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto s = m.load_sample(records[i]);
      check(s.label.is_binary(), "bilevel: IIS labels must be binary");
      d.images[i] = std::move(s.image.pixels);
      d.prompts[i] = std::move(s.prompt);
      d.labels[i] = std::move(s.label.labels);
    }
    return d;
  }
};

template <typename T>
Tensor<T> prompt_as(const MaskPrompt& p) {
  Tensor<T> out({p.mask.dim(0), p.mask.dim(1)});
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(p.mask[i]);
  return out;
}

class BilevelTrainer {
 public:
  BilevelConfig cfg;
  /// Test hook: observes every generated train-mode noise field. Runs on
  /// worker threads; use with cfg.workers == 1.
  std::function<void(const Tensor<float>&)> noise_probe;

  BilevelTrainer(const SegModelConfig& model_cfg, const BilevelConfig& c) : cfg(c) {
    cfg.validate();
    SegModelConfig gen_cfg = model_cfg;
    gen_cfg.with_noise_tokens = true;
    generator_ = std::make_unique<PromptableSegModel<float>>(gen_cfg, substream(cfg.seed, "generator-init")());
    SegModelConfig sur_cfg = model_cfg;
    sur_cfg.with_noise_tokens = false;
    // The surrogate is re-initialized once, before the first round, and
    // trained from scratch across all rounds.
    surrogate_ = std::make_unique<PromptableSegModel<float>>(sur_cfg, substream(cfg.seed, "surrogate-init")());

    generator_->collect_core(core_reg_);
    generator_->collect_noise(noise_reg_);
    surrogate_->collect_all(sur_reg_);
    core_opt_ = std::make_unique<Adam<float>>(core_reg_, cfg.pretrain_lr);
    noise_opt_ = std::make_unique<Adam<float>>(noise_reg_, cfg.learning_rate);
    sur_opt_ = std::make_unique<Adam<float>>(sur_reg_, cfg.learning_rate);
  }

  PromptableSegModel<float>& generator() { return *generator_; }
  PromptableSegModel<float>& surrogate() { return *surrogate_; }
  const TrainLog& log() const { return log_; }
  int completed_rounds() const { return completed_rounds_; }

  std::int64_t trainable_noise_params() const { return noise_reg_.total_elems(); }
  std::int64_t surrogate_params() const { return sur_reg_.total_elems(); }

  /// Warm start: train the generator core on the clean IIS task, then freeze.
  void pretrain_core(const IISData& data) {
    for (int e = 0; e < cfg.pretrain_epochs; ++e) {
      core_opt_->lr = cfg.pretrain_lr;
      run_epoch("pretrain", -1, e - cfg.pretrain_epochs, data, core_reg_, *core_opt_, pretrain_steps_,
                [&](Tape<float>& tape, std::int64_t i) {
                  auto out = generator_->forward(tape, data.images[static_cast<std::size_t>(i)],
                                                 prompt_as<float>(data.prompts[static_cast<std::size_t>(i)]),
                                                 TrainMode::all);
                  return model::seg_loss(out.mask_logits, data.labels[static_cast<std::size_t>(i)], false);
                });
    }
    pretrained_ = true;
  }

  /// One-epoch-per-round surrogate update on noised images with TRUE labels.
  /// Generator parameters are untouched.
  void surrogate_phase(const IISData& data, int round) {
    const int base_epoch = round * cfg.epochs_per_round();
    for (int e = 0; e < cfg.surrogate_epochs_per_round; ++e) {
      const int gepoch = base_epoch + e;
      sur_opt_->lr = decayed_lr(gepoch);
      run_epoch("surrogate", round, gepoch, data, sur_reg_, *sur_opt_, surrogate_steps_,
                [&](Tape<float>& tape, std::int64_t i) {
                  const auto idx = static_cast<std::size_t>(i);
                  auto x = tape.leaf(data.images[idx]);
                  auto delta = noise::generate_noise_var(tape, *generator_, x, data.prompts[idx], cfg.budget,
                                                         NoiseMode::train, TrainMode::frozen);
                  if (noise_probe) noise_probe(tape.value(delta));
                  auto noised = clamp01(add(x, delta));
                  auto out = surrogate_->forward(tape, noised, prompt_as<float>(data.prompts[idx]),
                                                 TrainMode::all);
                  return model::seg_loss(out.mask_logits, data.labels[idx], false);
                });
    }
  }

  /// Noise-surface update with the surrogate frozen; label modification
  /// applies here only.
  void generator_phase(const IISData& data, int round) {
    const int base_epoch = round * cfg.epochs_per_round() + cfg.surrogate_epochs_per_round;
    for (int e = 0; e < cfg.generator_epochs_per_round; ++e) {
      const int gepoch = base_epoch + e;
      noise_opt_->lr = decayed_lr(gepoch);
      run_epoch("generator", round, gepoch, data, noise_reg_, *noise_opt_, generator_steps_,
                [&](Tape<float>& tape, std::int64_t i) {
                  const auto idx = static_cast<std::size_t>(i);
                  auto x = tape.leaf(data.images[idx]);
                  auto delta = noise::generate_noise_var(tape, *generator_, x, data.prompts[idx], cfg.budget,
                                                         NoiseMode::train, TrainMode::noise_only);
                  if (noise_probe) noise_probe(tape.value(delta));
                  auto noised = clamp01(add(x, delta));
                  auto out = surrogate_->forward(tape, noised, prompt_as<float>(data.prompts[idx]),
                                                 TrainMode::frozen);
                  return model::seg_loss(out.mask_logits, data.labels[idx], cfg.label_mod);
                });
    }
  }

  /// Full schedule: warm start (if not already done), then alternate phases.
  /// Saves a resumable state checkpoint per round when state_dir is set.
  TrainLog run(const IISData& data, const fs::path& state_dir = {}) {
    if (!pretrained_) {
      pretrain_core(data);
      if (!state_dir.empty()) save_state(state_dir / "bilevel_state.ckpt");
    }
    for (int r = completed_rounds_; r < cfg.rounds(); ++r) {
      surrogate_phase(data, r);
      generator_phase(data, r);
      completed_rounds_ = r + 1;
      if (!state_dir.empty()) save_state(state_dir / "bilevel_state.ckpt");
    }
    return log_;
  }

  void save_state(const fs::path& path) {
    json header;
    header["kind"] = "bilevel_state";
    header["completed_rounds"] = completed_rounds_;
    header["pretrained"] = pretrained_;
    header["steps"] = {{"pretrain", pretrain_steps_}, {"surrogate", surrogate_steps_},
                       {"generator", generator_steps_}};
    header["adam_steps"] = {{"core", core_opt_->steps()}, {"noise", noise_opt_->steps()},
                            {"surrogate", sur_opt_->steps()}};
    header["generator_config"] = model::to_json(generator_->cfg);
    header["surrogate_config"] = model::to_json(surrogate_->cfg);

    std::vector<model::NamedArray> arrays;
    ParamList<float> gen_list, sur_list;
    generator_->collect_all(gen_list);
    surrogate_->collect_all(sur_list);
    for (auto* p : gen_list.items) arrays.push_back({"gen:" + p->name, &p->value});
    for (auto* p : sur_list.items) arrays.push_back({"sur:" + p->name, &p->value});
    auto add_opt = [&arrays](const std::string& tag, Adam<float>& opt) {
      auto &m = opt.moment1(), &v = opt.moment2();
      for (std::size_t i = 0; i < m.size(); ++i) {
        arrays.push_back({tag + ".m." + std::to_string(i), &m[i]});
        arrays.push_back({tag + ".v." + std::to_string(i), &v[i]});
      }
    };
    add_opt("adam.noise", *noise_opt_);
    add_opt("adam.sur", *sur_opt_);
    model::save_checkpoint(path, header, arrays);
  }

  void load_state(const fs::path& path) {
    model::LoadedCheckpoint ck = model::load_checkpoint(path);
    check(ck.header.at("kind") == "bilevel_state", "not a bilevel state checkpoint");
    completed_rounds_ = ck.header.at("completed_rounds").get<int>();
    pretrained_ = ck.header.at("pretrained").get<bool>();
    pretrain_steps_ = ck.header.at("steps").at("pretrain").get<int>();
    surrogate_steps_ = ck.header.at("steps").at("surrogate").get<int>();
    generator_steps_ = ck.header.at("steps").at("generator").get<int>();
    core_opt_->set_steps(ck.header.at("adam_steps").at("core").get<std::int64_t>());
    noise_opt_->set_steps(ck.header.at("adam_steps").at("noise").get<std::int64_t>());
    sur_opt_->set_steps(ck.header.at("adam_steps").at("surrogate").get<std::int64_t>());

    ParamList<float> gen_list, sur_list;
    generator_->collect_all(gen_list);
    surrogate_->collect_all(sur_list);
    for (auto* p : gen_list.items) p->value = ck.get("gen:" + p->name);
    for (auto* p : sur_list.items) p->value = ck.get("sur:" + p->name);
    auto load_opt = [&ck](const std::string& tag, Adam<float>& opt) {
      auto &m = opt.moment1(), &v = opt.moment2();
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = ck.get(tag + ".m." + std::to_string(i));
        v[i] = ck.get(tag + ".v." + std::to_string(i));
      }
    };
    load_opt("adam.noise", *noise_opt_);
    load_opt("adam.sur", *sur_opt_);
  }

 private:
  float decayed_lr(int global_epoch) const {
    return global_epoch >= cfg.lr_decay_epoch ? cfg.learning_rate * 0.1f : cfg.learning_rate;
  }

  template <typename LossFn>
  void run_epoch(const std::string& phase, int round, int gepoch, const IISData& data,
                 ParamRegistry<float>& reg, Adam<float>& opt, int& step_counter, LossFn&& loss_fn) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    auto rng = substream(cfg.seed, phase + "-order", static_cast<std::uint64_t>(gepoch + 1024));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::int64_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                          order.size(), b + static_cast<std::size_t>(cfg.batch_size))));
      auto result = batch_grads<float>(reg, batch, cfg.workers, loss_fn);
      if (!std::isfinite(result.mean_loss))
        throw Error("bilevel: non-finite loss in " + phase + " phase (lr too high or degenerate data)");
      opt.step(reg, result.grads);
      log_.entries.push_back({round, phase, gepoch, step_counter++, result.mean_loss});
    }
  }

  std::unique_ptr<PromptableSegModel<float>> generator_;
  std::unique_ptr<PromptableSegModel<float>> surrogate_;
  ParamRegistry<float> core_reg_, noise_reg_, sur_reg_;
  std::unique_ptr<Adam<float>> core_opt_, noise_opt_, sur_opt_;
  TrainLog log_;
  bool pretrained_ = false;
  int completed_rounds_ = 0;
  int pretrain_steps_ = 0, surrogate_steps_ = 0, generator_steps_ = 0;
};

}  // namespace unseg::train
