#pragma once

// Victim training and the experiment matrix runner. Victims train on the
// (possibly protected, possibly defended) train split and are always
// validated on the clean validation split; the best epoch is reported, which
// is the conservative choice for the protector.

#include <filesystem>
#include <fstream>
#include <optional>

#include "unseg/core/parallel.hpp"
#include "unseg/data/manifest.hpp"
#include "unseg/eval/defense.hpp"
#include "unseg/eval/metrics.hpp"
#include "unseg/eval/svg.hpp"
#include "unseg/model/model_io.hpp"

namespace unseg::eval {

namespace fs = std::filesystem;
using data::DatasetManifest;
using data::LabelMask;
using model::VictimArch;
using model::VictimModel;
using json = nlohmann::json;

struct VictimTrainConfig {
  VictimArch arch = VictimArch::conv_fcn;
  int epochs = 8;
  int batch_size = 16;
  float lr = 2e-3f;
  std::uint64_t seed = 0;
  int eval_every = 1;
  int workers = 1;
  Defense defense = Defense::none;
  double defense_param = 0;

  void validate() const {
    check(epochs > 0 && batch_size > 0 && eval_every > 0, "victim config: values must be positive");
    check(lr > 0, "victim config: lr must be positive");
  }

  json to_json() const {
    return json{{"arch", model::to_string(arch)}, {"epochs", epochs},      {"batch_size", batch_size},
                {"lr", lr},                       {"seed", seed},          {"eval_every", eval_every},
                {"defense", eval::to_string(defense)}, {"defense_param", defense_param}};
  }
};

struct MetricsReport {
  double miou = 0;                       // best-epoch validation mIoU
  std::vector<double> per_class;         // at the best epoch
  std::vector<bool> class_present;
  int best_epoch = -1;
  std::vector<std::pair<int, double>> curve;  // (epoch, val mIoU)
  json config_echo;
  std::string provenance;  // dataset digest, hex

  json to_json() const {
    json j;
    j["miou"] = miou;
    j["per_class_iou"] = per_class;
    j["class_present"] = class_present;
    j["best_epoch"] = best_epoch;
    json c = json::array();
    for (auto& [e, v] : curve) c.push_back({{"epoch", e}, {"val_miou", v}});
    j["curve"] = c;
    j["config"] = config_echo;
    j["provenance"] = provenance;
    return j;
  }
};

/// In-memory multi-class training split.
struct VictimData {
  std::vector<Tensor<float>> images;
  std::vector<Tensor<std::int32_t>> labels_flat;  // [H*W]
  std::vector<Tensor<float>> val_images;
  std::vector<LabelMask> val_labels;
  int num_classes = 0;
  int size = 0;

  static VictimData load(const DatasetManifest& m, Defense defense, double defense_param) {
    VictimData d;
    d.num_classes = m.num_classes;
    d.size = m.size;
    d.images.resize(m.train.size());
    d.labels_flat.resize(m.train.size());
    for (std::size_t i = 0; i < m.train.size(); ++i) {
      data::Image img = m.load_image(m.train[i]);
      if (defense != Defense::none) img = apply_defense(img, defense, defense_param);
      d.images[i] = std::move(img.pixels);
      LabelMask lab = m.load_label(m.train[i]);
      Tensor<std::int32_t> flat({lab.labels.numel()});
      for (std::int64_t p = 0; p < flat.numel(); ++p) flat[p] = lab.labels[p];
      d.labels_flat[i] = std::move(flat);
    }
    d.val_images.resize(m.val.size());
    d.val_labels.resize(m.val.size());
    for (std::size_t i = 0; i < m.val.size(); ++i) {
      d.val_images[i] = m.load_image(m.val[i]).pixels;   // validation stays clean
      d.val_labels[i] = m.load_label(m.val[i]);
    }
    return d;
  }
};

/// Dataset-level mIoU of a victim over the clean validation split.
inline MiouResult evaluate_victim(VictimModel<float>& victim, const VictimData& d, int workers) {
  std::vector<LabelMask> preds(d.val_images.size());
  parallel_for(static_cast<std::int64_t>(d.val_images.size()), workers, [&](std::int64_t i) {
    const auto idx = static_cast<std::size_t>(i);
    Tensor<float> logits = model::forward_victim(victim, d.val_images[idx]);
    preds[idx] = argmax_labels(logits, d.num_classes);
  });
  IouAccumulator acc(d.num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], d.val_labels[i]);
  return acc.result();
}

struct TrainVictimResult {
  VictimModel<float> model;       // parameters at the final epoch
  VictimModel<float> best_model;  // parameters at the best validation epoch
  MetricsReport report;
};

inline TrainVictimResult train_victim(const DatasetManifest& manifest, const VictimTrainConfig& cfg) {
  cfg.validate();
  VictimData d = VictimData::load(manifest, cfg.defense, cfg.defense_param);
  check(!d.images.empty() && !d.val_images.empty(), "train_victim: empty split");

  VictimModel<float> victim = VictimModel<float>::make(cfg.arch, d.size, d.num_classes,
                                                       substream(cfg.seed, "victim-init")());
  ParamRegistry<float> reg;
  victim.collect(reg);
  Adam<float> opt(reg, cfg.lr);

  MetricsReport report;
  report.config_echo = cfg.to_json();
  report.provenance = data::digest_hex(data::dataset_digest(manifest));

  const std::int64_t hw = static_cast<std::int64_t>(d.size) * d.size;
  double best = -1.0;
  std::vector<Tensor<float>> best_snapshot;  // parameter values at the best epoch
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order(d.images.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = substream(cfg.seed, "victim-epoch", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::int64_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(b),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size))));
      auto res = batch_grads<float>(reg, batch, cfg.workers, [&](Tape<float>& tape, std::int64_t i) {
        const auto idx = static_cast<std::size_t>(i);
        auto logits = victim.forward(tape, d.images[idx], true);
        auto flat = reshape(logits, {hw, static_cast<std::int64_t>(d.num_classes)});
        return softmax_xent_mean(flat, d.labels_flat[idx]);
      });
      if (!std::isfinite(res.mean_loss)) throw Error("train_victim: non-finite loss (lr too high?)");
      opt.step(reg, res.grads);
    }

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      MiouResult r = evaluate_victim(victim, d, cfg.workers);
      report.curve.push_back({epoch, r.miou});
      if (r.miou > best) {
        best = r.miou;
        report.miou = r.miou;
        report.per_class = r.per_class;
        report.class_present = r.present;
        report.best_epoch = epoch;
        best_snapshot.clear();
        for (std::size_t i = 0; i < reg.size(); ++i) best_snapshot.push_back(reg.at(i).value);
      }
    }
  }

  TrainVictimResult result;
  result.model = victim;
  result.best_model = VictimModel<float>::make(cfg.arch, d.size, d.num_classes,
                                               substream(cfg.seed, "victim-init")());
  {
    ParamList<float> list;
    result.best_model.collect(list);
    check(list.items.size() == best_snapshot.size(), "train_victim: snapshot size mismatch");
    for (std::size_t i = 0; i < list.items.size(); ++i) list.items[i]->value = best_snapshot[i];
  }
  result.report = report;
  return result;
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

struct ExperimentCell {
  std::string id;
  fs::path dataset;        // manifest path
  std::string method;      // what protected the dataset (free-form, for the CSV)
  VictimTrainConfig train;
  double clean_fraction = 0;

  static ExperimentCell from_json(const json& j) {
    ExperimentCell c;
    c.id = j.at("id").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
    c.method = j.value("method", "unknown");
    c.clean_fraction = j.value("clean_fraction", 0.0);
    c.train.arch = model::victim_arch_from_string(j.value("arch", "conv_fcn"));
    c.train.epochs = j.value("epochs", 8);
    c.train.batch_size = j.value("batch_size", 16);
    c.train.lr = j.value("lr", 2e-3f);
    c.train.seed = j.value("seed", std::uint64_t{0});
    c.train.eval_every = j.value("eval_every", 1);
    c.train.defense = defense_from_string(j.value("defense", "none"));
    c.train.defense_param = j.value("defense_param", 0.0);
    return c;
  }
};

struct ExperimentManifest {
  std::string name = "experiments";
  std::vector<ExperimentCell> cells;

  static ExperimentManifest from_json(const json& j) {
    ExperimentManifest m;
    m.name = j.value("name", "experiments");
    for (const auto& e : j.at("cells")) m.cells.push_back(ExperimentCell::from_json(e));
    return m;
  }

  static ExperimentManifest load(const fs::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open experiment manifest: " + path.string());
    return from_json(json::parse(in));
  }
};

constexpr const char* kConsolidatedHeader = "method,arch,defense,clean_fraction,seed,miou,per_class_iou,provenance";

/// Run every cell: train a victim, write a report and a curve plot, and one
/// consolidated CSV row per cell. All referenced datasets are checked before
/// any training starts.
inline std::vector<MetricsReport> run_experiment(const ExperimentManifest& m, const fs::path& out_dir,
                                                 int workers = 1) {
  std::string missing;
  for (const auto& c : m.cells)
    if (!fs::exists(c.dataset)) missing += "  " + c.dataset.string() + "\n";
  check(missing.empty(), "run_experiment: missing artifacts:\n" + missing);

  fs::create_directories(out_dir);
  std::vector<MetricsReport> reports;
  std::string csv = std::string(kConsolidatedHeader) + "\n";

  for (const auto& cell : m.cells) {
    DatasetManifest ds = DatasetManifest::load(cell.dataset);
    VictimTrainConfig cfg = cell.train;
    cfg.workers = workers;
    TrainVictimResult r = train_victim(ds, cfg);
    reports.push_back(r.report);

    const std::string text = r.report.to_json().dump(2) + "\n";
    data::atomic_write(out_dir / (cell.id + ".report.json"),
                       std::vector<unsigned char>(text.begin(), text.end()));
    CurveSeries s;
    s.label = cell.id;
    for (auto& [e, v] : r.report.curve) s.points.push_back({static_cast<double>(e), v});
    write_curve_svg(out_dir / (cell.id + ".curve.svg"), cell.method + " / " + model::to_string(cell.train.arch),
                    {s});

    std::string per_class;
    for (std::size_t c = 0; c < r.report.per_class.size(); ++c) {
      if (c) per_class += ';';
      char num[32];
      std::snprintf(num, sizeof(num), "%.6f", r.report.per_class[c]);
      per_class += num;
    }
    char row[512];
    std::snprintf(row, sizeof(row), "%s,%s,%s,%.3f,%llu,%.6f,%s,%s\n", cell.method.c_str(),
                  model::to_string(cell.train.arch), eval::to_string(cell.train.defense), cell.clean_fraction,
                  static_cast<unsigned long long>(cell.train.seed), r.report.miou, per_class.c_str(),
                  r.report.provenance.c_str());
    csv += row;
  }
  data::atomic_write(out_dir / "consolidated.csv", std::vector<unsigned char>(csv.begin(), csv.end()));
  return reports;
}

}  // namespace unseg::eval
